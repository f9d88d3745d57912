#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace vesr {

using Shape = std::vector<std::int64_t>;

std::int64_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Raised for violated preconditions (bad shapes, invalid configs, bad arguments).
class ValidationError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Raised for file format and filesystem failures.
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

template <typename T>
class Tape;

/// Dense row-major N-d array. Copies share storage; ops always produce new
/// storage except reshape, which is a view.
template <typename T>
class Tensor {
public:
    Tensor();
    explicit Tensor(Shape shape);
    Tensor(Shape shape, std::vector<T> data);

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
    static Tensor full(Shape shape, T value);
    static Tensor scalar(T value) { return full({}, value); }
    static Tensor arange(Shape shape);

    const Shape& shape() const { return shape_; }
    std::int64_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t rank() const { return shape_.size(); }
    std::int64_t numel() const { return static_cast<std::int64_t>(storage_->size()); }

    /// Views into storage; not available on temporaries, whose storage may
    /// die before the view is used.
    std::span<const T> data() const& { return *storage_; }
    std::span<const T> data() const&& = delete;
    /// Writes are visible through every tensor sharing this storage.
    std::span<T> mutable_data() & { return *storage_; }
    std::span<T> mutable_data() && = delete;
    const T* storage_id() const { return storage_->data(); }

    T item() const;
    T at(std::initializer_list<std::int64_t> index) const;

    bool tracked() const { return tape_ != nullptr; }
    Tape<T>* tape() const { return tape_; }
    std::int64_t node() const { return node_; }
    /// Same storage, no tape attachment.
    Tensor detach() const;
    /// Deep copy, untracked.
    Tensor clone() const;

private:
    friend class Tape<T>;
    template <typename U>
    friend Tensor<U> reshape(const Tensor<U>& x, Shape new_shape);

    Shape shape_;
    std::shared_ptr<std::vector<T>> storage_;
    Tape<T>* tape_ = nullptr;
    std::int64_t node_ = -1;
};

/// Handed to a node's backward function; routes input gradients to parents.
template <typename T>
class GradSink {
public:
    GradSink(Tape<T>& tape, const std::vector<std::int64_t>& parents) : tape_(tape), parents_(parents) {}
    bool wants(std::size_t input) const { return parents_.at(input) >= 0; }
    void add(std::size_t input, std::span<const T> grad);

private:
    Tape<T>& tape_;
    const std::vector<std::int64_t>& parents_;
};

/// Define-by-run record of the forward pass. Node i only has parents < i.
template <typename T>
class Tape {
public:
    using BackwardFn = std::function<void(std::span<const T> grad_out, GradSink<T>& sink)>;

    struct Node {
        const char* kind;
        std::vector<std::int64_t> parents;
        Shape shape;
        BackwardFn backward;
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Tracked view of a parameter. Repeated calls with the same storage
    /// return the same node.
    Tensor<T> leaf(const Tensor<T>& value);

    /// Attaches `out` to this tape as the result of `inputs`. Untracked inputs
    /// get parent id -1.
    Tensor<T> record(const char* kind, Tensor<T> out, std::initializer_list<const Tensor<T>*> inputs,
                     BackwardFn backward);
    Tensor<T> record(const char* kind, Tensor<T> out, const std::vector<const Tensor<T>*>& inputs,
                     BackwardFn backward);

    void backward(const Tensor<T>& loss);
    /// Gradient of the last backward pass wrt `t`; zeros when unreached.
    Tensor<T> grad(const Tensor<T>& t) const;
    /// Gradient wrt a parameter previously passed to leaf(); zeros if never used.
    Tensor<T> param_grad(const Tensor<T>& param) const;

    void reset();
    std::size_t size() const { return nodes_.size(); }
    const Node& node(std::size_t i) const { return nodes_.at(i); }
    bool has_grad(std::int64_t id) const;

private:
    friend class GradSink<T>;
    void accumulate(std::int64_t id, std::span<const T> grad);
    void check_owned(const Tensor<T>& t) const;

    std::vector<Node> nodes_;
    std::vector<std::vector<T>> grads_;
    std::unordered_map<const T*, std::int64_t> leaves_;
    bool backward_done_ = false;
};

/// Returns the single tape shared by all tracked inputs, or nullptr.
template <typename T>
Tape<T>* common_tape(std::initializer_list<const Tensor<T>*> inputs);

enum class ElementwiseOp { add, sub, mul };

template <typename T>
Tensor<T> elementwise(ElementwiseOp op, const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(ElementwiseOp::add, a, b); }
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(ElementwiseOp::sub, a, b); }
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(ElementwiseOp::mul, a, b); }

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s);
template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s);

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
/// Swaps the two axes of a matrix.
template <typename T>
Tensor<T> transpose(const Tensor<T>& a);

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape new_shape);
template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& axis_order);

/// Repeats size-1 axes up to `shape`. The only broadcasting in the engine.
template <typename T>
Tensor<T> expand(const Tensor<T>& x, const Shape& shape);

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);
/// Slice [start, start + length) along `axis`.
template <typename T>
Tensor<T> narrow(const Tensor<T>& x, std::size_t axis, std::int64_t start, std::int64_t length);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);
/// |x| with subgradient 0 at x == 0.
template <typename T>
Tensor<T> abs(const Tensor<T>& x);
template <typename T>
Tensor<T> square(const Tensor<T>& x);

/// BLAS-backed GEMM on row-major buffers: C = alpha * op(A) * op(B) + beta * C.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k, T alpha, const T* a,
          const T* b, T beta, T* c);

template <typename T>
bool all_finite(std::span<const T> values);

}  // namespace vesr
