#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dvit/errors.hpp"

namespace dvit {

/// C x C confusion counts over a dataset; rows are ground truth, columns
/// predictions. Mergeable, so evaluation can be sharded.
class ConfusionAccumulator {
public:
    ConfusionAccumulator(int num_classes, std::int64_t ignore_index = 255);

    void add(std::span<const std::int64_t> pred, std::span<const std::int64_t> gt);
    void add_pixel(std::int64_t pred, std::int64_t gt);
    void merge(const ConfusionAccumulator& other);

    std::int64_t count(int gt, int pred) const;
    std::int64_t total() const;
    int num_classes() const { return num_classes_; }

    /// IoU of one class; returns -1 when the class never appears.
    double class_iou(int c) const;

private:
    int num_classes_;
    std::int64_t ignore_index_;
    std::vector<std::int64_t> counts_;
};

/// Mean IoU over classes with nonzero union. Throws EmptyAccumulator when
/// no pixel was scored.
double miou(const ConfusionAccumulator& acc);

// Depth metrics over masked pixels (mask true = scored). All throw
// NoValidPixels when the mask is empty.
double abs_rel(std::span<const float> pred, std::span<const float> gt, std::span<const bool> mask);
double rmse(std::span<const float> pred, std::span<const float> gt, std::span<const bool> mask);
/// Fraction of pixels with max(pred/gt, gt/pred) < 1.25^k.
double delta_threshold(std::span<const float> pred, std::span<const float> gt,
                       std::span<const bool> mask, int k = 1);

}  // namespace dvit
