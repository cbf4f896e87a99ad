#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "dtk/errors.hpp"

namespace dtk {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
class Tape;

namespace detail {

template <typename T>
struct TensorNode {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
    // Position of the producing op on the active tape; -1 for leaves.
    long tape_index = -1;
    const Tape<T>* tape = nullptr;
};

}  // namespace detail

/// Dense row-major tensor handle. Copies share storage; use `clone()` for a
/// deep copy. Rank-2 tensors are the working currency of every op; rank-1
/// tensors are treated as a single row where an op accepts a row vector.
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, T value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false);
    static Tensor scalar(T value, bool requires_grad = false);

    bool defined() const noexcept { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t numel() const { return data().size(); }
    std::size_t rows() const;
    std::size_t cols() const;

    std::span<const T> data() const;
    std::span<T> mutable_data();
    T item() const;
    T at(std::size_t r, std::size_t c) const;

    bool requires_grad() const;
    void set_requires_grad(bool flag);
    bool has_grad() const;
    std::span<const T> grad() const;
    /// Gradient buffer, allocated as zeros on first access.
    std::span<T> mutable_grad() const;
    void zero_grad();

    Tensor clone() const;
    bool same_storage(const Tensor& other) const noexcept { return node_ == other.node_; }

    detail::TensorNode<T>* node() const noexcept { return node_.get(); }

private:
    explicit Tensor(std::shared_ptr<detail::TensorNode<T>> node) : node_(std::move(node)) {}
    std::shared_ptr<detail::TensorNode<T>> node_;

    friend class Tape<T>;
    template <typename U>
    friend Tensor<U> make_op_result(const char*, Shape, std::vector<U>, std::initializer_list<Tensor<U>>,
                                    std::function<void(Tensor<U>&)>);
};

/// Ordered record of differentiable operations. Ops are recorded only while a
/// tape is active on the current thread (see `TapeScope`) and at least one
/// input requires a gradient.
template <typename T>
class Tape {
public:
    struct Entry {
        std::string op;
        std::vector<Tensor<T>> inputs;
        Tensor<T> output;
        std::function<void(Tensor<T>&)> backward;
    };

    Tape() = default;
    ~Tape() { clear(); }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    std::size_t size() const noexcept { return entries_.size(); }
    const std::vector<Entry>& entries() const noexcept { return entries_; }

    /// Reverse sweep from a scalar loss; accumulates into every
    /// `requires_grad` tensor reachable from it.
    void backward(const Tensor<T>& loss);
    void clear();

    void record(const char* op, std::vector<Tensor<T>> inputs, Tensor<T>& output,
                std::function<void(Tensor<T>&)> backward);

private:
    std::vector<Entry> entries_;
};

template <typename T>
Tape<T>*& active_tape() {
    static thread_local Tape<T>* tape = nullptr;
    return tape;
}

/// Activates a tape for the current thread for the lifetime of the scope.
template <typename T>
class TapeScope {
public:
    explicit TapeScope(Tape<T>& tape) : previous_(active_tape<T>()) { active_tape<T>() = &tape; }
    ~TapeScope() { active_tape<T>() = previous_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape<T>* previous_;
};

/// Suspends recording for the current thread.
template <typename T>
class NoTapeScope {
public:
    NoTapeScope() : previous_(active_tape<T>()) { active_tape<T>() = nullptr; }
    ~NoTapeScope() { active_tape<T>() = previous_; }
    NoTapeScope(const NoTapeScope&) = delete;
    NoTapeScope& operator=(const NoTapeScope&) = delete;

private:
    Tape<T>* previous_;
};

/// Builds an op output, recording it on the active tape when any input needs
/// a gradient. `backward` receives the output (whose grad is populated).
template <typename T>
Tensor<T> make_op_result(const char* op, Shape shape, std::vector<T> values,
                         std::initializer_list<Tensor<T>> inputs,
                         std::function<void(Tensor<T>&)> backward);

/// Throws NumericError naming `what` if any element is NaN or infinite.
template <typename T>
void check_finite(std::span<const T> values, const std::string& what);

}  // namespace dtk
