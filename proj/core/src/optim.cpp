#include "dvit/optim.hpp"

#include <cmath>

#include "dvit/errors.hpp"

namespace dvit {

void TrainConfig::validate() const {
    if (warmup_fraction < 0.0 || warmup_fraction >= 1.0)
        throw ConfigError("train: warmup_fraction must lie in [0,1)");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (lr_reference_batch < 1) throw ConfigError("train: lr_reference_batch must be >= 1");
    if (base_lr <= 0.0) throw ConfigError("train: base_lr must be > 0");
}

double lr_at_step(std::int64_t step, std::int64_t total_steps, const TrainConfig& config) {
    if (total_steps < 1) throw ConfigError("lr_at_step: total_steps must be >= 1");
    if (step < 0 || step > total_steps) throw ConfigError("lr_at_step: step outside [0,total_steps]");
    const double peak = config.peak_lr();
    const auto warmup_steps =
        static_cast<std::int64_t>(std::llround(config.warmup_fraction * static_cast<double>(total_steps)));
    if (step < warmup_steps)
        return peak * static_cast<double>(step) / static_cast<double>(warmup_steps);
    if (step == warmup_steps) return peak;  // joint is exact
    const double progress =
        static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps);
    return peak * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

double poly_lr(std::int64_t step, std::int64_t total_steps, double base_lr, double power) {
    if (total_steps < 1) throw ConfigError("poly_lr: total_steps must be >= 1");
    const double t = static_cast<double>(step) / static_cast<double>(total_steps);
    return base_lr * std::pow(1.0 - std::min(1.0, std::max(0.0, t)), power);
}

bool AdamW::decay_excluded(std::string_view name) {
    auto ends_with = [&](std::string_view suffix) {
        return name.size() >= suffix.size() && name.substr(name.size() - suffix.size()) == suffix;
    };
    return ends_with(".bias") || ends_with(".gamma") || ends_with(".beta") || ends_with("cls_token") ||
           ends_with("pos_embed");
}

void AdamW::add_param(const std::string& name, Tensor param, double lr_multiplier) {
    Slot slot;
    slot.name = name;
    slot.param = std::move(param);
    slot.m = Tensor::zeros(slot.param.shape());
    slot.v = Tensor::zeros(slot.param.shape());
    slot.decay = !decay_excluded(name);
    slot.lr_multiplier = lr_multiplier;
    slots_.push_back(std::move(slot));
}

void AdamW::step(double lr) {
    ++t_;
    const double b1 = config_.beta1, b2 = config_.beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (auto& slot : slots_) {
        if (!slot.param.has_grad()) continue;  // parameter untouched this step
        const auto& g = slot.param.grad();
        auto& p = slot.param.data();
        auto& m = slot.m.data();
        auto& v = slot.v.data();
        const double wd = slot.decay ? config_.weight_decay : 0.0;
        const double step_lr = lr * slot.lr_multiplier;
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double gi = static_cast<double>(g[i]);
            const double mi = b1 * static_cast<double>(m[i]) + (1.0 - b1) * gi;
            const double vi = b2 * static_cast<double>(v[i]) + (1.0 - b2) * gi * gi;
            m[i] = static_cast<float>(mi);
            v[i] = static_cast<float>(vi);
            const double mhat = mi / bc1;
            const double vhat = vi / bc2;
            const double update = mhat / (std::sqrt(vhat) + config_.eps) + wd * static_cast<double>(p[i]);
            p[i] = static_cast<float>(static_cast<double>(p[i]) - step_lr * update);
        }
    }
}

void AdamW::zero_grad() {
    for (auto& slot : slots_) slot.param.zero_grad();
}

}  // namespace dvit
