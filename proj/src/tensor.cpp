#include "dtk/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace dtk {

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) {
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        out << (i ? "x" : "") << shape[i];
    }
    out << ']';
    return out.str();
}

namespace {

void validate_shape(const Shape& shape) {
    if (shape.empty()) {
        throw ShapeError("tensor shape must have rank >= 1");
    }
    for (std::size_t d : shape) {
        if (d == 0) {
            throw ShapeError("tensor shape " + shape_str(shape) + " has a zero dimension");
        }
    }
}

}  // namespace

template <typename T>
void check_finite(std::span<const T> values, const std::string& what) {
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (!std::isfinite(values[i])) {
            std::ostringstream out;
            out << what << ": non-finite value " << values[i] << " at flat index " << i;
            throw NumericError(out.str());
        }
    }
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
    validate_shape(shape);
    auto node = std::make_shared<detail::TensorNode<T>>();
    node->data.assign(shape_numel(shape), value);
    node->shape = std::move(shape);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values, bool requires_grad) {
    validate_shape(shape);
    if (shape_numel(shape) != values.size()) {
        throw ShapeError("shape " + shape_str(shape) + " does not match " + std::to_string(values.size()) +
                         " values");
    }
    auto node = std::make_shared<detail::TensorNode<T>>();
    node->shape = std::move(shape);
    node->data = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
    return full({1, 1}, value, requires_grad);
}

template <typename T>
const Shape& Tensor<T>::shape() const {
    if (!node_) {
        throw ContractError("use of an undefined tensor");
    }
    return node_->shape;
}

template <typename T>
std::size_t Tensor<T>::rows() const {
    const Shape& s = shape();
    return s.size() == 1 ? 1 : s[0];
}

template <typename T>
std::size_t Tensor<T>::cols() const {
    const Shape& s = shape();
    if (s.size() > 2) {
        throw ShapeError("cols() on tensor of rank " + std::to_string(s.size()));
    }
    return s.back();
}

template <typename T>
std::span<const T> Tensor<T>::data() const {
    shape();
    return node_->data;
}

template <typename T>
std::span<T> Tensor<T>::mutable_data() {
    shape();
    return node_->data;
}

template <typename T>
T Tensor<T>::item() const {
    if (numel() != 1) {
        throw ContractError("item() on tensor of shape " + shape_str(shape()));
    }
    return node_->data[0];
}

template <typename T>
T Tensor<T>::at(std::size_t r, std::size_t c) const {
    return data()[r * cols() + c];
}

template <typename T>
bool Tensor<T>::requires_grad() const {
    shape();
    return node_->requires_grad;
}

template <typename T>
void Tensor<T>::set_requires_grad(bool flag) {
    shape();
    node_->requires_grad = flag;
    if (!flag) {
        node_->grad.clear();
    }
}

template <typename T>
bool Tensor<T>::has_grad() const {
    shape();
    return !node_->grad.empty();
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
    shape();
    return node_->grad;
}

template <typename T>
std::span<T> Tensor<T>::mutable_grad() const {
    shape();
    if (node_->grad.empty()) {
        node_->grad.assign(node_->data.size(), T(0));
    }
    return node_->grad;
}

template <typename T>
void Tensor<T>::zero_grad() {
    shape();
    node_->grad.clear();
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
    Tensor copy = from(shape(), node_->data, node_->requires_grad);
    copy.node_->grad = node_->grad;
    return copy;
}

template <typename T>
void Tape<T>::record(const char* op, std::vector<Tensor<T>> inputs, Tensor<T>& output,
                     std::function<void(Tensor<T>&)> backward) {
    const long index = static_cast<long>(entries_.size());
    for (const Tensor<T>& in : inputs) {
        const auto* n = in.node();
        if (n->tape == this && n->tape_index >= index) {
            throw ContractError(std::string("tape order violated recording ") + op);
        }
    }
    output.node_->tape = this;
    output.node_->tape_index = index;
    entries_.push_back(Entry{op, std::move(inputs), output, std::move(backward)});
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        throw ContractError("backward requires a scalar loss, got shape " +
                            (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
    }
    const auto* node = loss.node();
    if (node->tape != this || node->tape_index < 0) {
        throw ContractError("loss was not produced on this tape");
    }
    Tensor<T> seed = loss;
    seed.mutable_grad()[0] += T(1);
    for (long i = node->tape_index; i >= 0; --i) {
        Entry& entry = entries_[static_cast<std::size_t>(i)];
        if (entry.output.has_grad()) {
            entry.backward(entry.output);
        }
    }
}

template <typename T>
void Tape<T>::clear() {
    for (Entry& e : entries_) {
        e.output.node_->tape = nullptr;
        e.output.node_->tape_index = -1;
    }
    entries_.clear();
}

template <typename T>
Tensor<T> make_op_result(const char* op, Shape shape, std::vector<T> values,
                         std::initializer_list<Tensor<T>> inputs,
                         std::function<void(Tensor<T>&)> backward) {
    check_finite<T>(values, op);
    Tensor<T> out = Tensor<T>::from(std::move(shape), std::move(values));
    Tape<T>* tape = active_tape<T>();
    if (tape == nullptr) {
        return out;
    }
    bool needs = false;
    for (const Tensor<T>& in : inputs) {
        needs = needs || in.requires_grad();
    }
    if (needs) {
        out.node_->requires_grad = true;
        tape->record(op, std::vector<Tensor<T>>(inputs), out, std::move(backward));
    }
    return out;
}

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;
template Tensor<float> make_op_result(const char*, Shape, std::vector<float>, std::initializer_list<Tensor<float>>,
                                      std::function<void(Tensor<float>&)>);
template Tensor<double> make_op_result(const char*, Shape, std::vector<double>,
                                       std::initializer_list<Tensor<double>>, std::function<void(Tensor<double>&)>);
template void check_finite(std::span<const float>, const std::string&);
template void check_finite(std::span<const double>, const std::string&);

}  // namespace dtk
