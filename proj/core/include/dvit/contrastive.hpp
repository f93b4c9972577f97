#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dvit/ops.hpp"
#include "dvit/rng.hpp"
#include "dvit/tensor.hpp"

namespace dvit {

struct ContrastiveConfig {
    double temperature = 0.1;
    int proj_hidden_dim = 0;  // 0 -> use the encoder embed dim
    int proj_out_dim = 128;
    bool symmetric = false;
    bool normalize = true;  // cosine similarities; raw dot products when off
    enum class Mode { dense, vanilla };
    Mode mode = Mode::dense;

    void validate() const;
};

/// 3-layer MLP projection head (linear-gelu-linear-gelu-linear), shared by
/// the class token and every patch token.
template <typename T>
struct ProjectionHeadT {
    TensorT<T> fc1_w, fc1_b;
    TensorT<T> fc2_w, fc2_b;
    TensorT<T> fc3_w, fc3_b;

    static ProjectionHeadT init(int embed_dim, int hidden_dim, int out_dim, Rng& rng);
    std::vector<std::pair<std::string, TensorT<T>*>> named();
    void set_requires_grad(bool b);

    template <typename U>
    ProjectionHeadT<U> cast() const;
};

using ProjectionHead = ProjectionHeadT<float>;

/// Contrastive embeddings of one view: global [B,p] and patches [B,N,p].
/// Rows are unit-norm when the head ran with normalization on.
template <typename T>
struct ProjectedFeaturesT {
    TensorT<T> global;
    TensorT<T> patches;

    std::int64_t batch() const { return global.dim(0); }
    std::int64_t num_patches() const { return patches.dim(1); }
    std::int64_t proj_dim() const { return global.dim(1); }
};

using ProjectedFeatures = ProjectedFeaturesT<float>;

/// Project encoder tokens [B,N+1,d] to contrastive space.
template <typename T>
ProjectedFeaturesT<T> project(const TensorT<T>& tokens, const ProjectionHeadT<T>& head,
                              bool normalize = true);

/// One InfoNCE term: -log( e^{a.p/tau} / (e^{a.p/tau} + sum_n e^{a.n/tau}) ).
/// anchor/positive are [p]; negatives [K,p] with K >= 0 (empty -> 0 exactly).
template <typename T>
TensorT<T> info_nce(const TensorT<T>& anchor, const TensorT<T>& positive, const TensorT<T>& negatives,
                    double tau);

/// Index set of the contrast rows for one anchor image: the patch rows of
/// every other image's positive-side view, flattened as image*N + patch.
struct NegativeSet {
    std::int64_t anchor_image = 0;
    std::vector<std::int64_t> indices;
};

NegativeSet build_negative_sets(std::int64_t batch_size, std::int64_t num_patches,
                                std::int64_t anchor_image);

/// Local-to-global loss: for each image, the mean over patches i of the
/// InfoNCE between view A's global feature and view B's patch i, negatives
/// drawn per build_negative_sets; averaged over the batch. symmetric adds
/// the view-swapped direction and halves.
template <typename T>
TensorT<T> dense_loss(const ProjectedFeaturesT<T>& view_a, const ProjectedFeaturesT<T>& view_b,
                      const ContrastiveConfig& config);

/// Global-only InfoNCE baseline: anchor z (view A) vs positive z+ (view B),
/// negatives are the other images' view-B globals.
template <typename T>
TensorT<T> vanilla_loss(const ProjectedFeaturesT<T>& view_a, const ProjectedFeaturesT<T>& view_b,
                        const ContrastiveConfig& config);

/// Dispatch on config.mode.
template <typename T>
TensorT<T> contrastive_loss(const ProjectedFeaturesT<T>& view_a, const ProjectedFeaturesT<T>& view_b,
                            const ContrastiveConfig& config);

template <typename T>
template <typename U>
ProjectionHeadT<U> ProjectionHeadT<T>::cast() const {
    ProjectionHeadT<U> out;
    out.fc1_w = fc1_w.template cast<U>();
    out.fc1_b = fc1_b.template cast<U>();
    out.fc2_w = fc2_w.template cast<U>();
    out.fc2_b = fc2_b.template cast<U>();
    out.fc3_w = fc3_w.template cast<U>();
    out.fc3_b = fc3_b.template cast<U>();
    return out;
}

}  // namespace dvit
