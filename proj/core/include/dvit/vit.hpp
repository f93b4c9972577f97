#pragma once

#include <string>
#include <utility>
#include <vector>

#include "dvit/ops.hpp"
#include "dvit/rng.hpp"
#include "dvit/tensor.hpp"

namespace dvit {

struct ViTConfig {
    int image_size = 224;
    int patch_size = 16;
    int embed_dim = 192;
    int depth = 12;
    int num_heads = 3;
    double mlp_ratio = 4.0;
    double drop_path_rate = 0.0;

    int grid() const { return image_size / patch_size; }
    int num_patches() const { return grid() * grid(); }
    void validate() const;

    // Desk-scale presets alongside the standard Ti/S/B configurations.
    static ViTConfig micro();  // d=64,  depth 2, heads 2, patch 8,  image 32
    static ViTConfig mini();   // d=128, depth 4, heads 4, patch 8,  image 64
    static ViTConfig tiny();   // d=192, depth 12, heads 3, patch 16, image 224
    static ViTConfig small();  // d=384, depth 12, heads 6, patch 16, image 224
    static ViTConfig base();   // d=768, depth 12, heads 12, patch 16, image 224
    static ViTConfig preset(const std::string& name);
};

template <typename T>
struct BlockParamsT {
    TensorT<T> norm1_gamma, norm1_beta;
    TensorT<T> qkv_w, qkv_b;       // [d, 3d], [3d]
    TensorT<T> attn_proj_w, attn_proj_b;
    TensorT<T> norm2_gamma, norm2_beta;
    TensorT<T> fc1_w, fc1_b;       // [d, hidden]
    TensorT<T> fc2_w, fc2_b;       // [hidden, d]
};

/// Encoder parameters. Names returned by named() are the checkpoint keys.
template <typename T>
struct ViTParamsT {
    TensorT<T> patch_w, patch_b;   // [3*p*p, d], [d]
    TensorT<T> cls_token;          // [1, 1, d]
    TensorT<T> pos_embed;          // [1, N+1, d]
    std::vector<BlockParamsT<T>> blocks;
    TensorT<T> norm_gamma, norm_beta;

    static ViTParamsT init(const ViTConfig& config, Rng& rng);

    std::vector<std::pair<std::string, TensorT<T>*>> named();
    void set_requires_grad(bool b);

    template <typename U>
    ViTParamsT<U> cast() const;
};

using ViTParams = ViTParamsT<float>;

/// Extract non-overlapping patches in row-major grid order, each flattened
/// channel-major: images [B,3,H,W] -> [B,N,3*p*p].
template <typename T>
TensorT<T> patchify(const TensorT<T>& images, int patch_size);

/// Linear patch projection, class token prepended, positional embedding
/// added: [B,N,3*p*p] -> [B,N+1,d].
template <typename T>
TensorT<T> embed(const TensorT<T>& patches, const TensorT<T>& patch_w, const TensorT<T>& patch_b,
                 const TensorT<T>& cls_token, const TensorT<T>& pos_embed);

/// Optional capture of the attention weights of one block, for inspection.
template <typename T>
struct AttnCapture {
    TensorT<T> weights;  // [B, heads, N+1, N+1]
};

/// Pre-norm transformer block: x + drop_path(MHSA(LN(x))), then
/// x + drop_path(MLP(LN(x))). When a residual branch is dropped for a sample
/// (training only), the surviving branch is scaled by 1/(1-rate).
template <typename T>
TensorT<T> encoder_block(const TensorT<T>& tokens, const BlockParamsT<T>& params, int num_heads,
                         double drop_path_rate, bool training, Rng* rng,
                         AttnCapture<T>* capture = nullptr);

/// Full encoder: patchify -> embed -> blocks -> final layer norm.
/// Output row 0 is the global token, rows 1..N the patch tokens.
template <typename T>
TensorT<T> vit_forward(const TensorT<T>& images, const ViTParamsT<T>& params, const ViTConfig& config,
                       bool training = false, Rng* rng = nullptr);

/// Resample the positional embedding to a new square grid with bicubic
/// (Catmull-Rom, a=-0.5, edge clamped) interpolation; the class row is
/// copied unchanged. Identity when the grid is unchanged.
template <typename T>
TensorT<T> interpolate_pos_embed(const TensorT<T>& pos_embed, int new_grid);

template <typename T>
template <typename U>
ViTParamsT<U> ViTParamsT<T>::cast() const {
    ViTParamsT<U> out;
    out.patch_w = patch_w.template cast<U>();
    out.patch_b = patch_b.template cast<U>();
    out.cls_token = cls_token.template cast<U>();
    out.pos_embed = pos_embed.template cast<U>();
    out.blocks.resize(blocks.size());
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        const auto& b = blocks[i];
        auto& o = out.blocks[i];
        o.norm1_gamma = b.norm1_gamma.template cast<U>();
        o.norm1_beta = b.norm1_beta.template cast<U>();
        o.qkv_w = b.qkv_w.template cast<U>();
        o.qkv_b = b.qkv_b.template cast<U>();
        o.attn_proj_w = b.attn_proj_w.template cast<U>();
        o.attn_proj_b = b.attn_proj_b.template cast<U>();
        o.norm2_gamma = b.norm2_gamma.template cast<U>();
        o.norm2_beta = b.norm2_beta.template cast<U>();
        o.fc1_w = b.fc1_w.template cast<U>();
        o.fc1_b = b.fc1_b.template cast<U>();
        o.fc2_w = b.fc2_w.template cast<U>();
        o.fc2_b = b.fc2_b.template cast<U>();
    }
    out.norm_gamma = norm_gamma.template cast<U>();
    out.norm_beta = norm_beta.template cast<U>();
    return out;
}

}  // namespace dvit
