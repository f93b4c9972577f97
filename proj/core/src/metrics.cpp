#include "dvit/metrics.hpp"

#include <cmath>
#include <string>

namespace dvit {

ConfusionAccumulator::ConfusionAccumulator(int num_classes, std::int64_t ignore_index)
    : num_classes_(num_classes), ignore_index_(ignore_index),
      counts_(static_cast<std::size_t>(num_classes) * num_classes, 0) {
    if (num_classes < 1) throw ConfigError("confusion: num_classes must be >= 1");
}

void ConfusionAccumulator::add_pixel(std::int64_t pred, std::int64_t gt) {
    if (gt == ignore_index_) return;
    if (gt < 0 || gt >= num_classes_ || pred < 0 || pred >= num_classes_)
        throw InvalidTarget("confusion: label outside [0," + std::to_string(num_classes_) + ")");
    ++counts_[static_cast<std::size_t>(gt * num_classes_ + pred)];
}

void ConfusionAccumulator::add(std::span<const std::int64_t> pred, std::span<const std::int64_t> gt) {
    if (pred.size() != gt.size()) throw ShapeMismatch("confusion: pred/gt length mismatch");
    for (std::size_t i = 0; i < pred.size(); ++i) add_pixel(pred[i], gt[i]);
}

void ConfusionAccumulator::merge(const ConfusionAccumulator& other) {
    if (other.num_classes_ != num_classes_) throw ShapeMismatch("confusion: merging different class counts");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

std::int64_t ConfusionAccumulator::count(int gt, int pred) const {
    return counts_[static_cast<std::size_t>(gt * num_classes_ + pred)];
}

std::int64_t ConfusionAccumulator::total() const {
    std::int64_t t = 0;
    for (const auto c : counts_) t += c;
    return t;
}

double ConfusionAccumulator::class_iou(int c) const {
    const std::int64_t tp = count(c, c);
    std::int64_t fp = 0, fn = 0;
    for (int o = 0; o < num_classes_; ++o) {
        if (o == c) continue;
        fp += count(o, c);
        fn += count(c, o);
    }
    const std::int64_t uni = tp + fp + fn;
    if (uni == 0) return -1.0;
    return static_cast<double>(tp) / static_cast<double>(uni);
}

double miou(const ConfusionAccumulator& acc) {
    if (acc.total() == 0) throw EmptyAccumulator("miou: no scored pixels");
    double sum = 0.0;
    int classes = 0;
    for (int c = 0; c < acc.num_classes(); ++c) {
        const double iou = acc.class_iou(c);
        if (iou < 0.0) continue;  // class absent from both pred and gt
        sum += iou;
        ++classes;
    }
    return classes > 0 ? sum / classes : 0.0;
}

namespace {

template <typename F>
double masked_mean(std::span<const float> pred, std::span<const float> gt, std::span<const bool> mask,
                   F&& per_pixel) {
    if (pred.size() != gt.size() || pred.size() != mask.size())
        throw ShapeMismatch("depth metric: span length mismatch");
    double acc = 0.0;
    std::int64_t n = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (!mask[i]) continue;
        acc += per_pixel(static_cast<double>(pred[i]), static_cast<double>(gt[i]));
        ++n;
    }
    if (n == 0) throw NoValidPixels("depth metric: mask selects no pixels");
    return acc / static_cast<double>(n);
}

}  // namespace

double abs_rel(std::span<const float> pred, std::span<const float> gt, std::span<const bool> mask) {
    return masked_mean(pred, gt, mask, [](double p, double g) { return std::fabs(p - g) / g; });
}

double rmse(std::span<const float> pred, std::span<const float> gt, std::span<const bool> mask) {
    return std::sqrt(masked_mean(pred, gt, mask, [](double p, double g) { return (p - g) * (p - g); }));
}

double delta_threshold(std::span<const float> pred, std::span<const float> gt,
                       std::span<const bool> mask, int k) {
    const double threshold = std::pow(1.25, k);
    return masked_mean(pred, gt, mask, [threshold](double p, double g) {
        const double ratio = std::max(p / g, g / p);
        return ratio < threshold ? 1.0 : 0.0;
    });
}

}  // namespace dvit
