#pragma once

#include <utility>

#include "dvit/image.hpp"
#include "dvit/rng.hpp"

namespace dvit {

/// Two-view augmentation policy. Defaults follow the SimCLR recipe:
/// crop scale [0.08,1], flip 0.5, jitter (0.8,0.8,0.8,0.2) applied with
/// probability 0.8, grayscale 0.2, blur 0.5 with sigma in [0.1,2].
struct AugPolicy {
    double crop_scale_lo = 0.08;
    double crop_scale_hi = 1.0;
    double aspect_lo = 3.0 / 4.0;
    double aspect_hi = 4.0 / 3.0;
    int output_size = 224;
    double flip_prob = 0.5;
    double jitter_prob = 0.8;
    double brightness = 0.8;
    double contrast = 0.8;
    double saturation = 0.8;
    double hue = 0.2;
    double grayscale_prob = 0.2;
    double blur_prob = 0.5;
    double blur_sigma_lo = 0.1;
    double blur_sigma_hi = 2.0;

    void validate() const;

    /// Identity pipeline at a given size (used by tests and fine-tuning).
    static AugPolicy identity(int output_size);
};

Image random_resized_crop(const Image& img, Rng& rng, const AugPolicy& policy);
Image color_distort(const Image& img, Rng& rng, const AugPolicy& policy);
Image gaussian_blur(const Image& img, Rng& rng, const AugPolicy& policy);

/// Full pipeline once: crop -> flip -> color -> blur.
Image augment_once(const Image& img, Rng& rng, const AugPolicy& policy);

/// Two independent draws of the pipeline on the same source image.
std::pair<Image, Image> make_view_pair(const Image& img, Rng& rng, const AugPolicy& policy);

}  // namespace dvit
