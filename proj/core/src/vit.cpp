#include "dvit/vit.hpp"

#include <cmath>

namespace dvit {

void ViTConfig::validate() const {
    if (image_size <= 0 || patch_size <= 0 || embed_dim <= 0 || depth <= 0 || num_heads <= 0)
        throw ConfigError("vit: sizes must be positive");
    if (image_size % patch_size != 0)
        throw ConfigError("vit: image_size " + std::to_string(image_size) +
                          " not divisible by patch_size " + std::to_string(patch_size));
    if (embed_dim % num_heads != 0)
        throw ConfigError("vit: embed_dim " + std::to_string(embed_dim) + " not divisible by num_heads " +
                          std::to_string(num_heads));
    if (drop_path_rate < 0.0 || drop_path_rate >= 1.0)
        throw ConfigError("vit: drop_path_rate must lie in [0,1)");
    if (mlp_ratio <= 0.0) throw ConfigError("vit: mlp_ratio must be positive");
}

ViTConfig ViTConfig::micro() { return {32, 8, 64, 2, 2, 4.0, 0.0}; }
ViTConfig ViTConfig::mini() { return {64, 8, 128, 4, 4, 4.0, 0.0}; }
ViTConfig ViTConfig::tiny() { return {224, 16, 192, 12, 3, 4.0, 0.0}; }
ViTConfig ViTConfig::small() { return {224, 16, 384, 12, 6, 4.0, 0.0}; }
ViTConfig ViTConfig::base() { return {224, 16, 768, 12, 12, 4.0, 0.0}; }

ViTConfig ViTConfig::preset(const std::string& name) {
    if (name == "micro") return micro();
    if (name == "mini") return mini();
    if (name == "tiny") return tiny();
    if (name == "small") return small();
    if (name == "base") return base();
    throw ConfigError("vit: unknown preset '" + name + "'");
}

template <typename T>
ViTParamsT<T> ViTParamsT<T>::init(const ViTConfig& config, Rng& rng) {
    config.validate();
    const std::int64_t d = config.embed_dim;
    const std::int64_t pv = 3ll * config.patch_size * config.patch_size;
    const std::int64_t tokens = config.num_patches() + 1;
    const std::int64_t hidden = static_cast<std::int64_t>(std::lround(config.mlp_ratio * static_cast<double>(d)));
    const T sigma = T(0.02);

    ViTParamsT<T> p;
    p.patch_w = TensorT<T>::trunc_normal({pv, d}, rng, sigma, true);
    p.patch_b = TensorT<T>::zeros({d}, true);
    p.cls_token = TensorT<T>::randn({1, 1, d}, rng, sigma, true);
    p.pos_embed = TensorT<T>::trunc_normal({1, tokens, d}, rng, sigma, true);
    p.blocks.resize(static_cast<std::size_t>(config.depth));
    for (auto& b : p.blocks) {
        b.norm1_gamma = TensorT<T>::ones({d}, true);
        b.norm1_beta = TensorT<T>::zeros({d}, true);
        b.qkv_w = TensorT<T>::trunc_normal({d, 3 * d}, rng, sigma, true);
        b.qkv_b = TensorT<T>::zeros({3 * d}, true);
        b.attn_proj_w = TensorT<T>::trunc_normal({d, d}, rng, sigma, true);
        b.attn_proj_b = TensorT<T>::zeros({d}, true);
        b.norm2_gamma = TensorT<T>::ones({d}, true);
        b.norm2_beta = TensorT<T>::zeros({d}, true);
        b.fc1_w = TensorT<T>::trunc_normal({d, hidden}, rng, sigma, true);
        b.fc1_b = TensorT<T>::zeros({hidden}, true);
        b.fc2_w = TensorT<T>::trunc_normal({hidden, d}, rng, sigma, true);
        b.fc2_b = TensorT<T>::zeros({d}, true);
    }
    p.norm_gamma = TensorT<T>::ones({d}, true);
    p.norm_beta = TensorT<T>::zeros({d}, true);
    return p;
}

template <typename T>
std::vector<std::pair<std::string, TensorT<T>*>> ViTParamsT<T>::named() {
    std::vector<std::pair<std::string, TensorT<T>*>> out;
    out.emplace_back("patch_embed.weight", &patch_w);
    out.emplace_back("patch_embed.bias", &patch_b);
    out.emplace_back("cls_token", &cls_token);
    out.emplace_back("pos_embed", &pos_embed);
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        const std::string prefix = "blocks." + std::to_string(i) + ".";
        auto& b = blocks[i];
        out.emplace_back(prefix + "norm1.gamma", &b.norm1_gamma);
        out.emplace_back(prefix + "norm1.beta", &b.norm1_beta);
        out.emplace_back(prefix + "attn.qkv.weight", &b.qkv_w);
        out.emplace_back(prefix + "attn.qkv.bias", &b.qkv_b);
        out.emplace_back(prefix + "attn.proj.weight", &b.attn_proj_w);
        out.emplace_back(prefix + "attn.proj.bias", &b.attn_proj_b);
        out.emplace_back(prefix + "norm2.gamma", &b.norm2_gamma);
        out.emplace_back(prefix + "norm2.beta", &b.norm2_beta);
        out.emplace_back(prefix + "mlp.fc1.weight", &b.fc1_w);
        out.emplace_back(prefix + "mlp.fc1.bias", &b.fc1_b);
        out.emplace_back(prefix + "mlp.fc2.weight", &b.fc2_w);
        out.emplace_back(prefix + "mlp.fc2.bias", &b.fc2_b);
    }
    out.emplace_back("norm.gamma", &norm_gamma);
    out.emplace_back("norm.beta", &norm_beta);
    return out;
}

template <typename T>
void ViTParamsT<T>::set_requires_grad(bool b) {
    for (auto& [name, t] : named()) t->set_requires_grad(b);
}

template <typename T>
TensorT<T> patchify(const TensorT<T>& images, int patch_size) {
    if (images.rank() != 4 || images.dim(1) != 3)
        throw ShapeMismatch("patchify: expected images [B,3,H,W], got " + shape_str(images.shape()));
    const std::int64_t B = images.dim(0), H = images.dim(2), W = images.dim(3);
    const std::int64_t p = patch_size;
    if (p <= 0 || H % p != 0 || W % p != 0)
        throw ShapeMismatch("patchify: image " + std::to_string(H) + "x" + std::to_string(W) +
                            " not divisible by patch size " + std::to_string(p));
    const std::int64_t gh = H / p, gw = W / p;
    const std::int64_t N = gh * gw;
    const std::int64_t pv = 3 * p * p;

    TensorT<T> out = TensorT<T>::zeros({B, N, pv});
    {
        const auto& xd = images.data();
        auto& od = out.data();
        for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t gy = 0; gy < gh; ++gy)
                for (std::int64_t gx = 0; gx < gw; ++gx) {
                    T* patch = od.data() + ((b * N + gy * gw + gx) * pv);
                    for (std::int64_t c = 0; c < 3; ++c)
                        for (std::int64_t py = 0; py < p; ++py)
                            for (std::int64_t px = 0; px < p; ++px)
                                patch[c * p * p + py * p + px] =
                                    xd[static_cast<std::size_t>(((b * 3 + c) * H + gy * p + py) * W +
                                                                gx * p + px)];
                }
    }
    // Patch extraction is a fixed permutation; images are inputs, not
    // parameters, so no backward is recorded for them.
    return out;
}

template <typename T>
TensorT<T> embed(const TensorT<T>& patches, const TensorT<T>& patch_w, const TensorT<T>& patch_b,
                 const TensorT<T>& cls_token, const TensorT<T>& pos_embed) {
    if (patches.rank() != 3)
        throw ShapeMismatch("embed: expected patches [B,N,p_v], got " + shape_str(patches.shape()));
    if (patches.dim(2) != patch_w.dim(0))
        throw ShapeMismatch("embed: patch vector length " + std::to_string(patches.dim(2)) +
                            " does not match projection rows " + std::to_string(patch_w.dim(0)));
    const std::int64_t B = patches.dim(0);
    const std::int64_t d = patch_w.dim(1);

    TensorT<T> projected = linear(patches, patch_w, &patch_b);           // [B,N,d]
    TensorT<T> cls = add(TensorT<T>::zeros({B, 1, d}), cls_token);       // broadcast to batch
    TensorT<T> tokens = concat(cls, projected, 1);                       // [B,N+1,d]
    if (pos_embed.shape() != Shape{1, tokens.dim(1), d})
        throw ShapeMismatch("embed: pos_embed " + shape_str(pos_embed.shape()) + " incompatible with " +
                            shape_str(tokens.shape()));
    return add(tokens, pos_embed);
}

namespace {

/// Per-sample branch drop with survival rescaling.
template <typename T>
TensorT<T> drop_path(const TensorT<T>& branch, double rate, bool training, Rng* rng) {
    if (!training || rate <= 0.0) return branch;
    if (!rng) throw ConfigError("drop_path: rng required in training mode");
    const std::int64_t B = branch.dim(0);
    const std::int64_t per = branch.numel() / B;
    TensorT<T> mask = TensorT<T>::zeros(branch.shape());
    auto& md = mask.data();
    const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
    for (std::int64_t b = 0; b < B; ++b) {
        const T v = rng->bernoulli(rate) ? T(0) : keep_scale;
        for (std::int64_t i = 0; i < per; ++i) md[static_cast<std::size_t>(b * per + i)] = v;
    }
    return mul(branch, mask);
}

}  // namespace

template <typename T>
TensorT<T> encoder_block(const TensorT<T>& tokens, const BlockParamsT<T>& params, int num_heads,
                         double drop_path_rate, bool training, Rng* rng, AttnCapture<T>* capture) {
    const std::int64_t B = tokens.dim(0), Nt = tokens.dim(1), d = tokens.dim(2);
    if (d % num_heads != 0)
        throw ShapeMismatch("encoder_block: embed dim " + std::to_string(d) +
                            " not divisible by num_heads " + std::to_string(num_heads));
    const std::int64_t dh = d / num_heads;

    TensorT<T> h = layer_norm(tokens, params.norm1_gamma, params.norm1_beta);
    TensorT<T> qkv = linear(h, params.qkv_w, &params.qkv_b);  // [B,Nt,3d]
    auto heads = [&](TensorT<T> t) {
        return transpose(reshape(std::move(t), {B, Nt, num_heads, dh}), 1, 2);  // [B,H,Nt,dh]
    };
    TensorT<T> q = heads(slice(qkv, 2, 0, d));
    TensorT<T> k = heads(slice(qkv, 2, d, d));
    TensorT<T> v = heads(slice(qkv, 2, 2 * d, d));

    TensorT<T> scores = mul_scalar(matmul(q, transpose(k, 2, 3)),
                                   static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));
    TensorT<T> attn = softmax(scores, 3);  // [B,H,Nt,Nt]
    if (capture) capture->weights = attn;

    TensorT<T> ctx = reshape(transpose(matmul(attn, v), 1, 2), {B, Nt, d});
    TensorT<T> attn_out = linear(ctx, params.attn_proj_w, &params.attn_proj_b);
    TensorT<T> x = add(tokens, drop_path(attn_out, drop_path_rate, training, rng));

    TensorT<T> h2 = layer_norm(x, params.norm2_gamma, params.norm2_beta);
    TensorT<T> mlp = linear(gelu(linear(h2, params.fc1_w, &params.fc1_b)), params.fc2_w, &params.fc2_b);
    return add(x, drop_path(mlp, drop_path_rate, training, rng));
}

template <typename T>
TensorT<T> vit_forward(const TensorT<T>& images, const ViTParamsT<T>& params, const ViTConfig& config,
                       bool training, Rng* rng) {
    TensorT<T> patches = patchify(images, config.patch_size);
    const std::int64_t expected_tokens = params.pos_embed.dim(1);
    if (patches.dim(1) + 1 != expected_tokens)
        throw ShapeMismatch("vit_forward: input yields " + std::to_string(patches.dim(1)) +
                            " patches but pos_embed holds " + std::to_string(expected_tokens - 1) +
                            "; interpolate_pos_embed first");
    TensorT<T> x = embed(patches, params.patch_w, params.patch_b, params.cls_token, params.pos_embed);
    for (const auto& block : params.blocks)
        x = encoder_block(x, block, config.num_heads, config.drop_path_rate, training, rng);
    return layer_norm(x, params.norm_gamma, params.norm_beta);
}

namespace {

/// Catmull-Rom cubic kernel (a = -0.5).
double cubic_weight(double t) {
    t = std::fabs(t);
    if (t <= 1.0) return 1.5 * t * t * t - 2.5 * t * t + 1.0;
    if (t < 2.0) return -0.5 * t * t * t + 2.5 * t * t - 4.0 * t + 2.0;
    return 0.0;
}

}  // namespace

template <typename T>
TensorT<T> interpolate_pos_embed(const TensorT<T>& pos_embed, int new_grid) {
    if (pos_embed.rank() != 3 || pos_embed.dim(0) != 1)
        throw InvalidGrid("interpolate_pos_embed: expected [1,N+1,d]");
    const std::int64_t tokens = pos_embed.dim(1);
    const std::int64_t d = pos_embed.dim(2);
    const std::int64_t N = tokens - 1;
    const auto g = static_cast<std::int64_t>(std::lround(std::sqrt(static_cast<double>(N))));
    if (g * g != N) throw InvalidGrid("interpolate_pos_embed: " + std::to_string(N) + " patch rows is not a square grid");
    if (new_grid <= 0) throw InvalidGrid("interpolate_pos_embed: new grid must be positive");
    if (new_grid == g) return pos_embed.clone();

    const std::int64_t ng = new_grid;
    TensorT<T> out = TensorT<T>::zeros({1, ng * ng + 1, d});
    const auto& src = pos_embed.data();
    auto& dst = out.data();
    std::copy_n(src.begin(), d, dst.begin());  // class row unchanged

    const double scale = static_cast<double>(g) / static_cast<double>(ng);
    auto clamp_idx = [g](std::int64_t i) { return std::max<std::int64_t>(0, std::min(i, g - 1)); };
    for (std::int64_t oy = 0; oy < ng; ++oy) {
        const double fy = (static_cast<double>(oy) + 0.5) * scale - 0.5;
        const auto y0 = static_cast<std::int64_t>(std::floor(fy));
        for (std::int64_t ox = 0; ox < ng; ++ox) {
            const double fx = (static_cast<double>(ox) + 0.5) * scale - 0.5;
            const auto x0 = static_cast<std::int64_t>(std::floor(fx));
            T* out_row = dst.data() + (1 + oy * ng + ox) * d;
            for (std::int64_t ky = -1; ky <= 2; ++ky) {
                const double wy = cubic_weight(fy - static_cast<double>(y0 + ky));
                if (wy == 0.0) continue;
                const std::int64_t sy = clamp_idx(y0 + ky);
                for (std::int64_t kx = -1; kx <= 2; ++kx) {
                    const double w = wy * cubic_weight(fx - static_cast<double>(x0 + kx));
                    if (w == 0.0) continue;
                    const std::int64_t sx = clamp_idx(x0 + kx);
                    const T* src_row = src.data() + (1 + sy * g + sx) * d;
                    for (std::int64_t c = 0; c < d; ++c)
                        out_row[c] += static_cast<T>(w) * src_row[c];
                }
            }
        }
    }
    out.set_requires_grad(pos_embed.requires_grad());
    return out;
}

#define DVIT_INSTANTIATE_VIT(T)                                                                      \
    template struct ViTParamsT<T>;                                                                   \
    template TensorT<T> patchify<T>(const TensorT<T>&, int);                                         \
    template TensorT<T> embed<T>(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&,            \
                                 const TensorT<T>&, const TensorT<T>&);                              \
    template TensorT<T> encoder_block<T>(const TensorT<T>&, const BlockParamsT<T>&, int, double,     \
                                         bool, Rng*, AttnCapture<T>*);                               \
    template TensorT<T> vit_forward<T>(const TensorT<T>&, const ViTParamsT<T>&, const ViTConfig&,    \
                                       bool, Rng*);                                                  \
    template TensorT<T> interpolate_pos_embed<T>(const TensorT<T>&, int);

DVIT_INSTANTIATE_VIT(float)
DVIT_INSTANTIATE_VIT(double)

#undef DVIT_INSTANTIATE_VIT

}  // namespace dvit
