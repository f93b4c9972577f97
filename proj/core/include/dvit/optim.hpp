#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "dvit/tensor.hpp"

namespace dvit {

/// Pretraining hyperparameters. The peak learning rate is
/// base_lr * batch_size / lr_reference_batch (linear batch scaling against
/// a reference of 128, one device).
struct TrainConfig {
    double base_lr = 1e-4;
    int batch_size = 128;
    int epochs = 1;
    double warmup_fraction = 0.05;
    double weight_decay = 0.05;
    std::uint64_t seed = 0;
    int lr_reference_batch = 128;

    void validate() const;
    double peak_lr() const { return base_lr * batch_size / lr_reference_batch; }
};

/// Linear warmup to the peak over round(warmup_fraction * total_steps)
/// steps, then cosine decay to zero at total_steps.
double lr_at_step(std::int64_t step, std::int64_t total_steps, const TrainConfig& config);

/// Polynomial decay: base * (1 - t/T)^power (fine-tuning policy).
double poly_lr(std::int64_t step, std::int64_t total_steps, double base_lr, double power);

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.05;
};

/// AdamW with decoupled weight decay. Parameters are registered by name;
/// biases, norm params, the class token and the positional embedding are
/// excluded from decay. Update arithmetic runs in double and is stored back
/// to f32 so the trajectory matches a scalar reference to tight tolerance.
class AdamW {
public:
    explicit AdamW(AdamWConfig config) : config_(config) {}

    /// lr_multiplier implements layer-wise learning-rate decay.
    void add_param(const std::string& name, Tensor param, double lr_multiplier = 1.0);

    void step(double lr);
    void zero_grad();

    std::int64_t t() const { return t_; }
    void set_t(std::int64_t t) { t_ = t; }

    static bool decay_excluded(std::string_view name);

    struct Slot {
        std::string name;
        Tensor param;
        Tensor m;
        Tensor v;
        bool decay = true;
        double lr_multiplier = 1.0;
    };
    std::vector<Slot>& slots() { return slots_; }
    const std::vector<Slot>& slots() const { return slots_; }
    const AdamWConfig& config() const { return config_; }

private:
    AdamWConfig config_;
    std::vector<Slot> slots_;
    std::int64_t t_ = 0;
};

}  // namespace dvit
