#pragma once

// Internal helpers shared by the op implementations; not installed.

#include <functional>
#include <initializer_list>

#include "dvit/tensor.hpp"

namespace dvit::detail {

template <typename T>
inline bool tracing(std::initializer_list<const TensorT<T>*> inputs) {
    if (TapeT<T>::current() == nullptr) return false;
    for (const auto* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

template <typename T>
inline void record(TensorT<T>& out, std::function<void()> fn) {
    out.set_requires_grad(true);
    TapeT<T>::current()->record(out.impl(), std::move(fn));
}

}  // namespace dvit::detail
