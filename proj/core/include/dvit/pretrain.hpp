#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "dvit/augment.hpp"
#include "dvit/checkpoint.hpp"
#include "dvit/contrastive.hpp"
#include "dvit/data.hpp"
#include "dvit/optim.hpp"
#include "dvit/vit.hpp"

namespace dvit {

struct StepLog {
    std::int64_t step = 0;
    std::int64_t epoch = 0;
    double lr = 0.0;
    double loss = 0.0;
    double wall_ms = 0.0;
};

struct PretrainOptions {
    std::filesystem::path out_dir;
    bool checkpoint_each_epoch = true;
    std::filesystem::path resume_from;  // empty = start fresh
    std::function<void(const StepLog&)> on_step;
};

struct PretrainResult {
    std::filesystem::path final_checkpoint;
    std::vector<StepLog> log;
};

/// One optimization step: two augmented views per image, both encoded with
/// the same weights, projected, contrasted, backward, AdamW update at `lr`.
/// All randomness derives from step_seed. Returns the loss value.
float train_step(const std::vector<Image>& batch, ViTParams& encoder, ProjectionHead& head,
                 AdamW& optimizer, const ViTConfig& vit_config, const ContrastiveConfig& loss_config,
                 const AugPolicy& policy, double lr, std::uint64_t step_seed);

/// Full self-supervised pretraining run; writes per-epoch and final
/// checkpoints plus a tab-separated step log under options.out_dir.
PretrainResult pretrain(const DatasetManifest& manifest, const ViTConfig& vit_config,
                        const ContrastiveConfig& loss_config, const AugPolicy& policy,
                        const TrainConfig& train_config, const PretrainOptions& options);

// Run-configuration echo stored inside checkpoints (JSON).
std::string make_run_config_json(const ViTConfig& vit, const ContrastiveConfig& loss,
                                 const TrainConfig& train, std::int64_t step, std::int64_t adam_t);
struct RunState {
    std::int64_t step = 0;
    std::int64_t adam_t = 0;
};
RunState run_state_from_json(const std::string& json);
ViTConfig vit_config_from_json(const std::string& json);
ContrastiveConfig contrastive_config_from_json(const std::string& json);

/// Snapshot encoder + head + optimizer state into a checkpoint.
Checkpoint snapshot(ViTParams& encoder, ProjectionHead& head, const AdamW& optimizer,
                    std::string config_json);

/// Restore encoder (+ head, + optimizer moments when present) from a
/// checkpoint produced by snapshot().
void restore(const Checkpoint& ckpt, ViTParams& encoder, ProjectionHead* head, AdamW* optimizer);

}  // namespace dvit
