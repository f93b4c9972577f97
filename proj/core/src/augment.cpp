#include "dvit/augment.hpp"

#include <algorithm>
#include <cmath>

#include "dvit/errors.hpp"

namespace dvit {

void AugPolicy::validate() const {
    auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
    if (!prob(flip_prob) || !prob(jitter_prob) || !prob(grayscale_prob) || !prob(blur_prob))
        throw ConfigError("augment: probabilities must lie in [0,1]");
    if (!(crop_scale_lo > 0.0 && crop_scale_lo <= crop_scale_hi && crop_scale_hi <= 1.0))
        throw ConfigError("augment: crop scale range must satisfy 0 < lo <= hi <= 1");
    if (output_size <= 0) throw ConfigError("augment: output_size must be positive");
}

AugPolicy AugPolicy::identity(int output_size) {
    AugPolicy p;
    p.crop_scale_lo = p.crop_scale_hi = 1.0;
    p.aspect_lo = p.aspect_hi = 1.0;
    p.output_size = output_size;
    p.flip_prob = 0.0;
    p.jitter_prob = 0.0;
    p.brightness = p.contrast = p.saturation = p.hue = 0.0;
    p.grayscale_prob = 0.0;
    p.blur_prob = 0.0;
    return p;
}

Image random_resized_crop(const Image& img, Rng& rng, const AugPolicy& policy) {
    const int W = img.width, H = img.height;
    const double area = static_cast<double>(W) * H;

    int cx = 0, cy = 0, cw = W, ch = H;
    bool found = false;
    for (int attempt = 0; attempt < 10 && !found; ++attempt) {
        const double target_area = area * rng.uniform(policy.crop_scale_lo, policy.crop_scale_hi);
        const double aspect = std::exp(rng.uniform(std::log(policy.aspect_lo), std::log(policy.aspect_hi)));
        const int w = static_cast<int>(std::lround(std::sqrt(target_area * aspect)));
        const int h = static_cast<int>(std::lround(std::sqrt(target_area / aspect)));
        if (w >= 1 && h >= 1 && w <= W && h <= H) {
            cx = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(W - w + 1)));
            cy = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(H - h + 1)));
            cw = w;
            ch = h;
            found = true;
        }
    }
    if (!found) {
        // Center crop of the maximal in-bounds region with aspect clamped to the range.
        const double in_ratio = static_cast<double>(W) / H;
        if (in_ratio < policy.aspect_lo) {
            cw = W;
            ch = std::max(1, static_cast<int>(std::lround(W / policy.aspect_lo)));
        } else if (in_ratio > policy.aspect_hi) {
            ch = H;
            cw = std::max(1, static_cast<int>(std::lround(H * policy.aspect_hi)));
        } else {
            cw = W;
            ch = H;
        }
        cx = (W - cw) / 2;
        cy = (H - ch) / 2;
    }
    const Image cropped = crop(img, cx, cy, cw, ch);
    return resize_bilinear(cropped, policy.output_size, policy.output_size);
}

namespace {

void clamp01(Image& img) {
    for (auto& v : img.data) v = std::min(1.0f, std::max(0.0f, v));
}

void adjust_brightness(Image& img, float factor) {
    for (auto& v : img.data) v *= factor;
}

float luma_at(const Image& img, int y, int x) {
    return 0.299f * img.at(0, y, x) + 0.587f * img.at(1, y, x) + 0.114f * img.at(2, y, x);
}

void adjust_contrast(Image& img, float factor) {
    double mean = 0.0;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) mean += luma_at(img, y, x);
    mean /= static_cast<double>(img.width) * img.height;
    const float m = static_cast<float>(mean);
    for (auto& v : img.data) v = m + factor * (v - m);
}

void adjust_saturation(Image& img, float factor) {
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            const float l = luma_at(img, y, x);
            for (int c = 0; c < 3; ++c) img.at(c, y, x) = l + factor * (img.at(c, y, x) - l);
        }
}

void rgb_to_hsv(float r, float g, float b, float& h, float& s, float& v) {
    const float mx = std::max({r, g, b});
    const float mn = std::min({r, g, b});
    v = mx;
    const float d = mx - mn;
    s = mx <= 0.0f ? 0.0f : d / mx;
    if (d <= 0.0f) {
        h = 0.0f;
        return;
    }
    if (mx == r)
        h = (g - b) / d + (g < b ? 6.0f : 0.0f);
    else if (mx == g)
        h = (b - r) / d + 2.0f;
    else
        h = (r - g) / d + 4.0f;
    h /= 6.0f;
}

void hsv_to_rgb(float h, float s, float v, float& r, float& g, float& b) {
    h = h - std::floor(h);
    const float i = std::floor(h * 6.0f);
    const float f = h * 6.0f - i;
    const float p = v * (1.0f - s);
    const float q = v * (1.0f - f * s);
    const float t = v * (1.0f - (1.0f - f) * s);
    switch (static_cast<int>(i) % 6) {
        case 0: r = v; g = t; b = p; break;
        case 1: r = q; g = v; b = p; break;
        case 2: r = p; g = v; b = t; break;
        case 3: r = p; g = q; b = v; break;
        case 4: r = t; g = p; b = v; break;
        default: r = v; g = p; b = q; break;
    }
}

void adjust_hue(Image& img, float shift) {
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            float h, s, v;
            rgb_to_hsv(img.at(0, y, x), img.at(1, y, x), img.at(2, y, x), h, s, v);
            hsv_to_rgb(h + shift, s, v, img.at(0, y, x), img.at(1, y, x), img.at(2, y, x));
        }
}

}  // namespace

Image color_distort(const Image& img, Rng& rng, const AugPolicy& policy) {
    Image out = img;

    if (rng.bernoulli(policy.jitter_prob)) {
        int order[4] = {0, 1, 2, 3};
        for (int i = 3; i > 0; --i)
            std::swap(order[i], order[rng.uniform_int(static_cast<std::uint64_t>(i + 1))]);
        for (const int which : order) {
            switch (which) {
                case 0:
                    if (policy.brightness > 0.0)
                        adjust_brightness(out, static_cast<float>(rng.uniform(
                                                   std::max(0.0, 1.0 - policy.brightness), 1.0 + policy.brightness)));
                    break;
                case 1:
                    if (policy.contrast > 0.0)
                        adjust_contrast(out, static_cast<float>(rng.uniform(
                                                 std::max(0.0, 1.0 - policy.contrast), 1.0 + policy.contrast)));
                    break;
                case 2:
                    if (policy.saturation > 0.0)
                        adjust_saturation(out, static_cast<float>(rng.uniform(
                                                   std::max(0.0, 1.0 - policy.saturation), 1.0 + policy.saturation)));
                    break;
                default:
                    if (policy.hue > 0.0)
                        adjust_hue(out, static_cast<float>(rng.uniform(-policy.hue, policy.hue)));
                    break;
            }
        }
    }

    if (rng.bernoulli(policy.grayscale_prob)) {
        for (int y = 0; y < out.height; ++y)
            for (int x = 0; x < out.width; ++x) {
                const float l = luma_at(out, y, x);
                out.at(0, y, x) = out.at(1, y, x) = out.at(2, y, x) = l;
            }
    }

    clamp01(out);
    return out;
}

Image gaussian_blur(const Image& img, Rng& rng, const AugPolicy& policy) {
    if (!rng.bernoulli(policy.blur_prob)) return img;
    const double sigma = rng.uniform(policy.blur_sigma_lo, policy.blur_sigma_hi);
    const int radius = static_cast<int>(std::ceil(3.0 * sigma));

    std::vector<float> kernel(static_cast<std::size_t>(2 * radius + 1));
    double total = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        const double w = std::exp(-0.5 * (i * i) / (sigma * sigma));
        kernel[static_cast<std::size_t>(i + radius)] = static_cast<float>(w);
        total += w;
    }
    for (auto& w : kernel) w = static_cast<float>(w / total);

    auto reflect = [](int i, int n) {
        // reflect padding without repeating the edge sample (n >= 1)
        if (n == 1) return 0;
        while (i < 0 || i >= n) {
            if (i < 0) i = -i;
            if (i >= n) i = 2 * (n - 1) - i;
        }
        return i;
    };

    Image tmp(img.width, img.height);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x) {
                float acc = 0.0f;
                for (int k = -radius; k <= radius; ++k)
                    acc += kernel[static_cast<std::size_t>(k + radius)] * img.at(c, y, reflect(x + k, img.width));
                tmp.at(c, y, x) = acc;
            }
    Image out(img.width, img.height);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x) {
                float acc = 0.0f;
                for (int k = -radius; k <= radius; ++k)
                    acc += kernel[static_cast<std::size_t>(k + radius)] * tmp.at(c, reflect(y + k, img.height), x);
                out.at(c, y, x) = acc;
            }
    return out;
}

Image augment_once(const Image& img, Rng& rng, const AugPolicy& policy) {
    Image view = random_resized_crop(img, rng, policy);
    if (rng.bernoulli(policy.flip_prob)) view = flip_horizontal(view);
    view = color_distort(view, rng, policy);
    view = gaussian_blur(view, rng, policy);
    return view;
}

std::pair<Image, Image> make_view_pair(const Image& img, Rng& rng, const AugPolicy& policy) {
    Rng rng_a = rng.fork(0x5eed0001ull);
    Rng rng_b = rng.fork(0x5eed0002ull);
    return {augment_once(img, rng_a, policy), augment_once(img, rng_b, policy)};
}

}  // namespace dvit
