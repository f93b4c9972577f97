#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "dvit/errors.hpp"
#include "dvit/rng.hpp"

namespace dvit {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

template <typename T>
struct TensorImpl {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // empty until a backward pass touches it
    bool requires_grad = false;
};

/// Dense row-major n-d array. Value-semantics handle over shared storage;
/// copies alias the same buffer (clone() for a deep copy). Scalar type is a
/// template parameter: float everywhere in training, double only inside the
/// finite-difference gradient checker.
template <typename T>
class TensorT {
public:
    TensorT() : impl_(std::make_shared<TensorImpl<T>>()) {}

    static TensorT zeros(Shape shape, bool requires_grad = false) {
        return filled(std::move(shape), T(0), requires_grad);
    }

    static TensorT ones(Shape shape, bool requires_grad = false) {
        return filled(std::move(shape), T(1), requires_grad);
    }

    static TensorT filled(Shape shape, T fill, bool requires_grad = false) {
        TensorT t;
        const auto n = shape_numel(shape);
        t.impl_->shape = std::move(shape);
        t.impl_->value.assign(static_cast<std::size_t>(n), fill);
        t.impl_->requires_grad = requires_grad;
        return t;
    }

    static TensorT from_data(Shape shape, std::vector<T> data, bool requires_grad = false) {
        if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
            throw ShapeMismatch("tensor: data length " + std::to_string(data.size()) +
                                " does not match shape " + shape_str(shape));
        TensorT t;
        t.impl_->shape = std::move(shape);
        t.impl_->value = std::move(data);
        t.impl_->requires_grad = requires_grad;
        return t;
    }

    static TensorT scalar(T v, bool requires_grad = false) {
        return from_data({}, {v}, requires_grad);
    }

    static TensorT randn(Shape shape, Rng& rng, T stddev = T(1), bool requires_grad = false) {
        TensorT t = zeros(std::move(shape), requires_grad);
        for (auto& v : t.data()) v = static_cast<T>(rng.normal()) * stddev;
        return t;
    }

    static TensorT trunc_normal(Shape shape, Rng& rng, T stddev, bool requires_grad = false) {
        TensorT t = zeros(std::move(shape), requires_grad);
        for (auto& v : t.data()) v = static_cast<T>(rng.trunc_normal(stddev));
        return t;
    }

    const Shape& shape() const { return impl_->shape; }
    std::int64_t rank() const { return static_cast<std::int64_t>(impl_->shape.size()); }
    std::int64_t dim(std::int64_t axis) const { return impl_->shape[static_cast<std::size_t>(axis)]; }
    std::int64_t numel() const { return static_cast<std::int64_t>(impl_->value.size()); }

    std::vector<T>& data() { return impl_->value; }
    const std::vector<T>& data() const { return impl_->value; }

    T item() const {
        if (numel() != 1) throw NotScalar("item(): tensor has " + std::to_string(numel()) + " elements");
        return impl_->value[0];
    }

    bool requires_grad() const { return impl_->requires_grad; }
    TensorT& set_requires_grad(bool b) {
        impl_->requires_grad = b;
        return *this;
    }

    /// Gradient buffer, allocated as zeros on first use.
    std::vector<T>& grad() {
        if (impl_->grad.empty()) impl_->grad.assign(impl_->value.size(), T(0));
        return impl_->grad;
    }
    /// True if some backward pass has written here.
    bool has_grad() const { return !impl_->grad.empty(); }

    void zero_grad() { impl_->grad.clear(); }

    void accumulate_grad(const std::vector<T>& g) {
        if (g.size() != impl_->value.size())
            throw ShapeMismatch("accumulate_grad: size mismatch");
        auto& dst = grad();
        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
    }

    TensorT clone() const {
        TensorT t;
        t.impl_->shape = impl_->shape;
        t.impl_->value = impl_->value;
        t.impl_->requires_grad = impl_->requires_grad;
        return t;
    }

    /// Convert element type (detached from any graph).
    template <typename U>
    TensorT<U> cast() const {
        std::vector<U> out(impl_->value.size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<U>(impl_->value[i]);
        return TensorT<U>::from_data(impl_->shape, std::move(out), impl_->requires_grad);
    }

    bool same_storage(const TensorT& other) const { return impl_ == other.impl_; }

    std::shared_ptr<TensorImpl<T>>& impl() { return impl_; }
    const std::shared_ptr<TensorImpl<T>>& impl() const { return impl_; }

private:
    std::shared_ptr<TensorImpl<T>> impl_;
};

using Tensor = TensorT<float>;
using Tensor64 = TensorT<double>;

/// Reverse-mode tape. Differentiable ops append one record per executed op,
/// in execution order, so iterating the records backwards is a valid reverse
/// topological order. backward() seeds dL/dL = 1 and runs every record whose
/// output has received a gradient; gradients accumulate across calls until
/// zero_grad. A tape is made active for a scope with Tape::Scope; ops run
/// without an active tape do not record (pure evaluation).
template <typename T>
class TapeT {
public:
    struct Record {
        std::shared_ptr<TensorImpl<T>> out;
        std::function<void()> backward;
    };

    class Scope {
    public:
        explicit Scope(TapeT& tape) : prev_(current_) { current_ = &tape; }
        ~Scope() { current_ = prev_; }
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

    private:
        TapeT* prev_;
    };

    static TapeT* current() { return current_; }

    void record(std::shared_ptr<TensorImpl<T>> out, std::function<void()> fn) {
        records_.push_back({std::move(out), std::move(fn)});
    }

    std::size_t size() const { return records_.size(); }
    void clear() { records_.clear(); }

    void backward(TensorT<T>& loss) {
        if (loss.numel() != 1) throw NotScalar("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
        loss.grad()[0] += T(1);
        for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
            if (it->out->grad.empty()) continue;  // not reachable from the loss
            it->backward();
        }
    }

private:
    static inline thread_local TapeT* current_ = nullptr;
    std::vector<Record> records_;
};

using Tape = TapeT<float>;
using Tape64 = TapeT<double>;

}  // namespace dvit
