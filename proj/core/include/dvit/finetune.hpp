#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "dvit/checkpoint.hpp"
#include "dvit/data.hpp"
#include "dvit/metrics.hpp"
#include "dvit/optim.hpp"
#include "dvit/pretrain.hpp"
#include "dvit/vit.hpp"

namespace dvit {

struct SegHeadConfig {
    int num_classes = 4;
    std::int64_t ignore_index = 255;

    void validate() const;
};

/// Linear segmentation head over patch tokens.
template <typename T>
struct SegHeadT {
    TensorT<T> w;  // [d, C]
    TensorT<T> b;  // [C]

    static SegHeadT init(int embed_dim, int num_classes, Rng& rng);
    std::vector<std::pair<std::string, TensorT<T>*>> named();

    template <typename U>
    SegHeadT<U> cast() const {
        SegHeadT<U> out;
        out.w = w.template cast<U>();
        out.b = b.template cast<U>();
        return out;
    }
};

using SegHead = SegHeadT<float>;

struct DepthHeadConfig {
    int up_stages = 4;                 // stride-2 stages; 2^up_stages must equal patch_size
    std::vector<int> stage_channels;   // empty -> halve embed_dim per stage, floor 8
    double d_min = 0.1;                // meters
    double d_max = 10.0;
    double smoothness_weight = 0.1;

    void validate(int patch_size) const;
    static DepthHeadConfig for_patch(int patch_size, int embed_dim);
};

/// Up-projection depth head: per stage a stride-2 transposed 3x3 conv and a
/// gelu, then a 1x1 conv and a sigmoid stretched to (d_min, d_max).
template <typename T>
struct DepthHeadT {
    struct Stage {
        TensorT<T> w;  // [Cin, Cout, 3, 3]
        TensorT<T> b;  // [Cout]
    };
    std::vector<Stage> stages;
    TensorT<T> final_w;  // [C_last, 1]
    TensorT<T> final_b;  // [1]

    static DepthHeadT init(int embed_dim, const DepthHeadConfig& config, Rng& rng);
    std::vector<std::pair<std::string, TensorT<T>*>> named();

    template <typename U>
    DepthHeadT<U> cast() const {
        DepthHeadT<U> out;
        out.stages.resize(stages.size());
        for (std::size_t i = 0; i < stages.size(); ++i) {
            out.stages[i].w = stages[i].w.template cast<U>();
            out.stages[i].b = stages[i].b.template cast<U>();
        }
        out.final_w = final_w.template cast<U>();
        out.final_b = final_b.template cast<U>();
        return out;
    }
};

using DepthHead = DepthHeadT<float>;

/// Patch tokens -> per-class logits at the patch grid -> bilinear upsample
/// to the input resolution: [B,C,H,W].
template <typename T>
TensorT<T> seg_forward(const TensorT<T>& images, const ViTParamsT<T>& encoder, const ViTConfig& config,
                       const SegHeadT<T>& head, bool training = false, Rng* rng = nullptr);

/// Patch tokens -> grid -> up-projection stages -> 1x1 conv -> dilated
/// sigmoid; output depth in (d_min, d_max), shape [B,1,H,W].
template <typename T>
TensorT<T> depth_forward(const TensorT<T>& images, const ViTParamsT<T>& encoder, const ViTConfig& config,
                         const DepthHeadT<T>& head, const DepthHeadConfig& head_config,
                         bool training = false, Rng* rng = nullptr);

/// Reverse Huber over valid pixels: |e| below c, (e^2+c^2)/(2c) above, with
/// c = 0.2 * max|e| per batch. The gradient includes the dependence of c on
/// the largest residual. mask entries are 1 = scored, 0 = ignored; an empty
/// vector scores everything.
template <typename T>
TensorT<T> berhu_loss(const TensorT<T>& pred, const TensorT<T>& target,
                      const std::vector<std::uint8_t>& valid_mask = {});

/// Sum of mean squared forward differences along x and along y, over the
/// last two axes; leading axes are batch.
template <typename T>
TensorT<T> smoothness_loss(const TensorT<T>& pred);

/// Layer-wise learning-rate decay: head 1.0, block k of D gets
/// gamma^(D-k) (k zero-based), patch/pos embedding gamma^(D+1).
struct LayerLrMultipliers {
    double head = 1.0;
    std::vector<double> blocks;
    double embed = 1.0;
    double final_norm = 1.0;
};
LayerLrMultipliers layer_lr_multipliers(int depth, double gamma);

/// Map a checkpoint-style parameter name ("encoder.blocks.3.attn.qkv.weight",
/// "head.weight", ...) to its multiplier.
double multiplier_for(const LayerLrMultipliers& m, const std::string& param_name);

struct FinetuneSchedule {
    double base_lr = 1e-4;
    double poly_power = 1.0;
    double weight_decay = 0.005;
    double drop_path_rate = 0.1;
    double layer_decay = 0.75;
    bool use_layer_decay = true;  // segmentation default; depth defaults to off
    int epochs = 20;
    int batch_size = 16;
    std::uint64_t seed = 0;

    void validate() const;
};

struct EvalRecord {
    std::string task;
    std::string metric;
    double value = 0.0;
};

struct FinetuneResult {
    std::filesystem::path checkpoint;
    std::vector<EvalRecord> report;
    std::vector<StepLog> log;
};

struct FinetuneOptions {
    std::filesystem::path out_dir;
    std::filesystem::path init_checkpoint;  // empty = random init
    std::function<void(const StepLog&)> on_step;
};

FinetuneResult finetune_seg(const DatasetManifest& train, const DatasetManifest& val,
                            ViTConfig vit_config, const SegHeadConfig& head_config,
                            const FinetuneSchedule& schedule, const FinetuneOptions& options);

FinetuneResult finetune_depth(const DatasetManifest& train, const DatasetManifest& val,
                              ViTConfig vit_config, DepthHeadConfig head_config,
                              const FinetuneSchedule& schedule, const FinetuneOptions& options);

/// Evaluate a fine-tuned checkpoint (as written by finetune_*) on a manifest.
std::vector<EvalRecord> evaluate_checkpoint(const std::filesystem::path& checkpoint,
                                            const DatasetManifest& val);

void write_eval_report(const std::filesystem::path& path, const std::vector<EvalRecord>& report);

}  // namespace dvit
