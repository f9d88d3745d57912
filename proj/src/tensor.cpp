#include "vesr/tensor.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace vesr {

std::int64_t numel_of(const Shape& shape) {
    std::int64_t n = 1;
    for (auto e : shape) {
        if (e < 1) throw ValidationError("tensor extents must be >= 1, got " + shape_str(shape));
        n *= e;
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
}

// ---------------------------------------------------------------------------
// Tensor

template <typename T>
Tensor<T>::Tensor() : storage_(std::make_shared<std::vector<T>>(1, T(0))) {}

template <typename T>
Tensor<T>::Tensor(Shape shape)
    : shape_(std::move(shape)),
      storage_(std::make_shared<std::vector<T>>(static_cast<std::size_t>(numel_of(shape_)), T(0))) {}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data)
    : shape_(std::move(shape)), storage_(std::make_shared<std::vector<T>>(std::move(data))) {
    if (numel_of(shape_) != static_cast<std::int64_t>(storage_->size())) {
        throw ValidationError("data length " + std::to_string(storage_->size()) + " does not match shape " +
                              shape_str(shape_));
    }
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value) {
    Tensor t(std::move(shape));
    std::fill(t.storage_->begin(), t.storage_->end(), value);
    return t;
}

template <typename T>
Tensor<T> Tensor<T>::arange(Shape shape) {
    Tensor t(std::move(shape));
    std::iota(t.storage_->begin(), t.storage_->end(), T(0));
    return t;
}

template <typename T>
T Tensor<T>::item() const {
    if (storage_->size() != 1) throw ValidationError("item() on tensor of shape " + shape_str(shape_));
    return (*storage_)[0];
}

template <typename T>
T Tensor<T>::at(std::initializer_list<std::int64_t> index) const {
    if (index.size() != shape_.size()) throw ValidationError("index rank does not match " + shape_str(shape_));
    std::int64_t flat = 0;
    std::size_t axis = 0;
    for (auto i : index) {
        if (i < 0 || i >= shape_[axis]) throw ValidationError("index out of range for " + shape_str(shape_));
        flat = flat * shape_[axis] + i;
        ++axis;
    }
    return (*storage_)[static_cast<std::size_t>(flat)];
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
    Tensor out = *this;
    out.tape_ = nullptr;
    out.node_ = -1;
    return out;
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
    return Tensor(shape_, *storage_);
}

// ---------------------------------------------------------------------------
// Tape

template <typename T>
void GradSink<T>::add(std::size_t input, std::span<const T> grad) {
    const auto id = parents_.at(input);
    if (id >= 0) tape_.accumulate(id, grad);
}

template <typename T>
Tensor<T> Tape<T>::leaf(const Tensor<T>& value) {
    if (value.tracked()) throw ValidationError("leaf() expects an untracked tensor");
    const T* key = value.storage_id();
    if (auto it = leaves_.find(key); it != leaves_.end()) {
        if (nodes_[static_cast<std::size_t>(it->second)].shape != value.shape()) {
            throw ValidationError("leaf() storage reused with a different shape");
        }
        Tensor<T> out = value;
        out.tape_ = this;
        out.node_ = it->second;
        return out;
    }
    Tensor<T> out = value;
    out.tape_ = this;
    out.node_ = static_cast<std::int64_t>(nodes_.size());
    nodes_.push_back(Node{"leaf", {}, value.shape(), nullptr});
    leaves_.emplace(key, out.node_);
    return out;
}

template <typename T>
Tensor<T> Tape<T>::record(const char* kind, Tensor<T> out, std::initializer_list<const Tensor<T>*> inputs,
                          BackwardFn backward) {
    return record(kind, std::move(out), std::vector<const Tensor<T>*>(inputs), std::move(backward));
}

template <typename T>
Tensor<T> Tape<T>::record(const char* kind, Tensor<T> out, const std::vector<const Tensor<T>*>& inputs,
                          BackwardFn backward) {
    std::vector<std::int64_t> parents;
    parents.reserve(inputs.size());
#ifndef NDEBUG
    bool inputs_finite = true;
#endif
    for (const auto* in : inputs) {
        if (in->tracked()) {
            check_owned(*in);
            parents.push_back(in->node());
        } else {
            parents.push_back(-1);
        }
#ifndef NDEBUG
        inputs_finite = inputs_finite && all_finite(in->data());
#endif
    }
#ifndef NDEBUG
    if (inputs_finite && !all_finite(out.data())) {
        throw std::runtime_error(std::string("non-finite output from op ") + kind + " on finite inputs");
    }
#endif
    out.tape_ = this;
    out.node_ = static_cast<std::int64_t>(nodes_.size());
    nodes_.push_back(Node{kind, std::move(parents), out.shape(), std::move(backward)});
    return out;
}

template <typename T>
void Tape<T>::check_owned(const Tensor<T>& t) const {
    if (t.tape() != this || t.node() < 0 || static_cast<std::size_t>(t.node()) >= nodes_.size()) {
        throw ValidationError("tensor is not recorded on this tape");
    }
}

template <typename T>
void Tape<T>::accumulate(std::int64_t id, std::span<const T> grad) {
    auto& buf = grads_[static_cast<std::size_t>(id)];
    if (buf.empty()) {
        buf.assign(grad.begin(), grad.end());
        return;
    }
    if (buf.size() != grad.size()) throw std::logic_error("gradient size mismatch in accumulate");
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += grad[i];
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
    if (backward_done_) throw ValidationError("backward called twice without reset");
    if (loss.numel() != 1) throw ValidationError("backward needs a scalar loss, got " + shape_str(loss.shape()));
    if (nodes_.empty()) throw ValidationError("backward on an empty tape");
    check_owned(loss);
    backward_done_ = true;
    grads_.assign(nodes_.size(), {});
    grads_[static_cast<std::size_t>(loss.node())] = {T(1)};
    for (auto i = loss.node(); i >= 0; --i) {
        auto& node = nodes_[static_cast<std::size_t>(i)];
        const auto& g = grads_[static_cast<std::size_t>(i)];
        if (g.empty() || !node.backward) continue;
        GradSink<T> sink(*this, node.parents);
        node.backward(g, sink);
    }
}

template <typename T>
bool Tape<T>::has_grad(std::int64_t id) const {
    return id >= 0 && static_cast<std::size_t>(id) < grads_.size() && !grads_[static_cast<std::size_t>(id)].empty();
}

template <typename T>
Tensor<T> Tape<T>::grad(const Tensor<T>& t) const {
    check_owned(t);
    if (!has_grad(t.node())) return Tensor<T>(t.shape());
    return Tensor<T>(t.shape(), grads_[static_cast<std::size_t>(t.node())]);
}

template <typename T>
Tensor<T> Tape<T>::param_grad(const Tensor<T>& param) const {
    auto it = leaves_.find(param.storage_id());
    if (it == leaves_.end() || !has_grad(it->second)) return Tensor<T>(param.shape());
    return Tensor<T>(param.shape(), grads_[static_cast<std::size_t>(it->second)]);
}

template <typename T>
void Tape<T>::reset() {
    nodes_.clear();
    grads_.clear();
    leaves_.clear();
    backward_done_ = false;
}

template <typename T>
Tape<T>* common_tape(std::initializer_list<const Tensor<T>*> inputs) {
    Tape<T>* tape = nullptr;
    for (const auto* in : inputs) {
        if (!in->tracked()) continue;
        if (tape && tape != in->tape()) throw ValidationError("inputs recorded on different tapes");
        tape = in->tape();
    }
    return tape;
}

// ---------------------------------------------------------------------------
// BLAS

template <typename T>
void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k, T alpha, const T* a,
          const T* b, T beta, T* c) {
    const auto ta = trans_a ? CblasTrans : CblasNoTrans;
    const auto tb = trans_b ? CblasTrans : CblasNoTrans;
    const auto lda = static_cast<int>(trans_a ? m : k);
    const auto ldb = static_cast<int>(trans_b ? k : n);
    const auto M = static_cast<int>(m), N = static_cast<int>(n), K = static_cast<int>(k);
    if constexpr (std::is_same_v<T, float>) {
        cblas_sgemm(CblasRowMajor, ta, tb, M, N, K, alpha, a, lda, b, ldb, beta, c, N);
    } else {
        cblas_dgemm(CblasRowMajor, ta, tb, M, N, K, alpha, a, lda, b, ldb, beta, c, N);
    }
}

template <typename T>
bool all_finite(std::span<const T> values) {
    return std::all_of(values.begin(), values.end(), [](T v) { return std::isfinite(v); });
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> elementwise(ElementwiseOp op, const Tensor<T>& a, const Tensor<T>& b) {
    const bool same = a.shape() == b.shape();
    const bool b_scalar = !same && b.numel() == 1;
    const bool a_scalar = !same && !b_scalar && a.numel() == 1;
    if (!same && !a_scalar && !b_scalar) {
        throw ValidationError("elementwise shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    const Shape& out_shape = a_scalar ? b.shape() : a.shape();
    const auto n = static_cast<std::size_t>(numel_of(out_shape));
    const auto ad = a.data();
    const auto bd = b.data();
    auto av = [&](std::size_t i) { return a_scalar ? ad[0] : ad[i]; };
    auto bv = [&](std::size_t i) { return b_scalar ? bd[0] : bd[i]; };
    std::vector<T> out(n);
    switch (op) {
        case ElementwiseOp::add:
            for (std::size_t i = 0; i < n; ++i) out[i] = av(i) + bv(i);
            break;
        case ElementwiseOp::sub:
            for (std::size_t i = 0; i < n; ++i) out[i] = av(i) - bv(i);
            break;
        case ElementwiseOp::mul:
            for (std::size_t i = 0; i < n; ++i) out[i] = av(i) * bv(i);
            break;
    }
    Tensor<T> result(out_shape, std::move(out));
    Tape<T>* tape = common_tape({&a, &b});
    if (!tape) return result;
    return tape->record("elementwise", std::move(result), {&a, &b},
                        [op, a = a.detach(), b = b.detach(), a_scalar, b_scalar, n](std::span<const T> g,
                                                                                   GradSink<T>& sink) {
                            // Reduce to the scalar operand when it was broadcast.
                            auto emit = [&](std::size_t input, std::vector<T> full, bool is_scalar) {
                                if (is_scalar) {
                                    T s = 0;
                                    for (auto v : full) s += v;
                                    full.assign(1, s);
                                }
                                sink.add(input, full);
                            };
                            const auto ad = a.data();
                            const auto bd = b.data();
                            if (sink.wants(0)) {
                                std::vector<T> ga(n);
                                for (std::size_t i = 0; i < n; ++i) {
                                    if (op == ElementwiseOp::mul) {
                                        ga[i] = g[i] * (b_scalar ? bd[0] : bd[i]);
                                    } else {
                                        ga[i] = g[i];
                                    }
                                }
                                emit(0, std::move(ga), a_scalar);
                            }
                            if (sink.wants(1)) {
                                std::vector<T> gb(n);
                                for (std::size_t i = 0; i < n; ++i) {
                                    switch (op) {
                                        case ElementwiseOp::add: gb[i] = g[i]; break;
                                        case ElementwiseOp::sub: gb[i] = -g[i]; break;
                                        case ElementwiseOp::mul: gb[i] = g[i] * (a_scalar ? ad[0] : ad[i]); break;
                                    }
                                }
                                emit(1, std::move(gb), b_scalar);
                            }
                        });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
    std::vector<T> out(a.data().begin(), a.data().end());
    for (auto& v : out) v += s;
    Tensor<T> result(a.shape(), std::move(out));
    if (!a.tracked()) return result;
    return a.tape()->record("add_scalar", std::move(result), {&a},
                            [](std::span<const T> g, GradSink<T>& sink) { sink.add(0, g); });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
    std::vector<T> out(a.data().begin(), a.data().end());
    for (auto& v : out) v *= s;
    Tensor<T> result(a.shape(), std::move(out));
    if (!a.tracked()) return result;
    return a.tape()->record("scale", std::move(result), {&a}, [s](std::span<const T> g, GradSink<T>& sink) {
        std::vector<T> ga(g.begin(), g.end());
        for (auto& v : ga) v *= s;
        sink.add(0, ga);
    });
}

// ---------------------------------------------------------------------------
// Linear algebra and layout

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2) {
        throw ValidationError("matmul needs matrices, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
    const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        throw ValidationError("matmul inner dimension mismatch: " + shape_str(a.shape()) + " x " +
                              shape_str(b.shape()));
    }
    Tensor<T> result({m, n});
    gemm<T>(false, false, m, n, k, T(1), a.data().data(), b.data().data(), T(0), result.mutable_data().data());
    Tape<T>* tape = common_tape({&a, &b});
    if (!tape) return result;
    return tape->record("matmul", std::move(result), {&a, &b},
                        [a = a.detach(), b = b.detach(), m, n, k](std::span<const T> g, GradSink<T>& sink) {
                            if (sink.wants(0)) {
                                std::vector<T> ga(static_cast<std::size_t>(m * k));
                                gemm<T>(false, true, m, k, n, T(1), g.data(), b.data().data(), T(0), ga.data());
                                sink.add(0, ga);
                            }
                            if (sink.wants(1)) {
                                std::vector<T> gb(static_cast<std::size_t>(k * n));
                                gemm<T>(true, false, k, n, m, T(1), a.data().data(), g.data(), T(0), gb.data());
                                sink.add(1, gb);
                            }
                        });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
    if (a.rank() != 2) throw ValidationError("transpose needs a matrix, got " + shape_str(a.shape()));
    return permute(a, {1, 0});
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape new_shape) {
    if (numel_of(new_shape) != x.numel()) {
        throw ValidationError("reshape element-count mismatch: " + shape_str(x.shape()) + " -> " +
                              shape_str(new_shape));
    }
    Tensor<T> view = x.detach();
    view.shape_ = std::move(new_shape);
    if (!x.tracked()) return view;
    return x.tape()->record("reshape", std::move(view), {&x},
                            [](std::span<const T> g, GradSink<T>& sink) { sink.add(0, g); });
}

namespace {

std::vector<std::int64_t> strides_of(const Shape& shape) {
    std::vector<std::int64_t> s(shape.size(), 1);
    for (std::size_t i = shape.size(); i-- > 1;) s[i - 1] = s[i] * shape[i];
    return s;
}

// out[j0..jn] = in[idx] where out axis i walks input axis order[i].
template <typename T>
std::vector<T> permute_buffer(std::span<const T> in, const Shape& in_shape, const std::vector<std::size_t>& order) {
    const auto rank = in_shape.size();
    const auto in_strides = strides_of(in_shape);
    Shape out_shape(rank);
    std::vector<std::int64_t> step(rank);
    for (std::size_t i = 0; i < rank; ++i) {
        out_shape[i] = in_shape[order[i]];
        step[i] = in_strides[order[i]];
    }
    std::vector<T> out(in.size());
    if (rank == 0) {
        out[0] = in[0];
        return out;
    }
    std::vector<std::int64_t> idx(rank, 0);
    std::int64_t src = 0;
    const auto inner = out_shape[rank - 1];
    const auto inner_step = step[rank - 1];
    for (std::size_t o = 0; o < out.size();) {
        for (std::int64_t j = 0; j < inner; ++j) out[o++] = in[static_cast<std::size_t>(src + j * inner_step)];
        // carry over the outer axes
        std::size_t ax = rank - 1;
        while (ax-- > 0) {
            ++idx[ax];
            src += step[ax];
            if (idx[ax] < out_shape[ax]) break;
            src -= step[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    return out;
}

}  // namespace

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& axis_order) {
    const auto rank = x.rank();
    if (axis_order.size() != rank) throw ValidationError("permutation rank does not match " + shape_str(x.shape()));
    std::vector<std::size_t> inverse(rank, rank);
    for (std::size_t i = 0; i < rank; ++i) {
        if (axis_order[i] >= rank || inverse[axis_order[i]] != rank) {
            throw ValidationError("invalid axis permutation for " + shape_str(x.shape()));
        }
        inverse[axis_order[i]] = i;
    }
    Shape out_shape(rank);
    for (std::size_t i = 0; i < rank; ++i) out_shape[i] = x.dim(axis_order[i]);
    Tensor<T> result(out_shape, permute_buffer<T>(x.data(), x.shape(), axis_order));
    if (!x.tracked()) return result;
    return x.tape()->record("permute", std::move(result), {&x},
                            [out_shape, inverse](std::span<const T> g, GradSink<T>& sink) {
                                sink.add(0, permute_buffer<T>(g, out_shape, inverse));
                            });
}

template <typename T>
Tensor<T> expand(const Tensor<T>& x, const Shape& shape) {
    if (x.rank() != shape.size()) {
        throw ValidationError("expand rank mismatch: " + shape_str(x.shape()) + " -> " + shape_str(shape));
    }
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (x.dim(i) != shape[i] && x.dim(i) != 1) {
            throw ValidationError("cannot expand " + shape_str(x.shape()) + " to " + shape_str(shape));
        }
    }
    const auto rank = shape.size();
    const auto in_strides = strides_of(x.shape());
    std::vector<std::int64_t> step(rank);
    for (std::size_t i = 0; i < rank; ++i) step[i] = x.dim(i) == 1 ? 0 : in_strides[i];
    // Precompute the source index of every output element; shared by backward.
    const auto n = static_cast<std::size_t>(numel_of(shape));
    auto src_index = std::make_shared<std::vector<std::int64_t>>(n);
    {
        std::vector<std::int64_t> idx(rank, 0);
        std::int64_t src = 0;
        for (std::size_t o = 0; o < n; ++o) {
            (*src_index)[o] = src;
            std::size_t ax = rank;
            while (ax-- > 0) {
                ++idx[ax];
                src += step[ax];
                if (idx[ax] < shape[ax]) break;
                src -= step[ax] * shape[ax];
                idx[ax] = 0;
            }
        }
    }
    std::vector<T> out(n);
    const auto xd = x.data();
    for (std::size_t o = 0; o < n; ++o) out[o] = xd[static_cast<std::size_t>((*src_index)[o])];
    Tensor<T> result(shape, std::move(out));
    if (!x.tracked()) return result;
    const auto in_n = static_cast<std::size_t>(x.numel());
    return x.tape()->record("expand", std::move(result), {&x},
                            [src_index, in_n](std::span<const T> g, GradSink<T>& sink) {
                                std::vector<T> gx(in_n, T(0));
                                for (std::size_t o = 0; o < g.size(); ++o) {
                                    gx[static_cast<std::size_t>((*src_index)[o])] += g[o];
                                }
                                sink.add(0, gx);
                            });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
    if (parts.empty()) throw ValidationError("concat of zero tensors");
    const auto& first = parts.front().shape();
    if (axis >= first.size()) throw ValidationError("concat axis out of range for " + shape_str(first));
    Shape out_shape = first;
    out_shape[axis] = 0;
    std::vector<std::int64_t> widths;
    for (const auto& p : parts) {
        bool ok = p.rank() == first.size();
        for (std::size_t i = 0; ok && i < first.size(); ++i) ok = i == axis || p.dim(i) == first[i];
        if (!ok) {
            throw ValidationError("concat shape mismatch: " + shape_str(first) + " vs " + shape_str(p.shape()));
        }
        out_shape[axis] += p.dim(axis);
    }
    std::int64_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
    for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
    std::vector<std::int64_t> chunk;
    for (const auto& p : parts) chunk.push_back(p.dim(axis) * inner);
    const auto row = out_shape[axis] * inner;

    Tensor<T> result(out_shape);
    auto out = result.mutable_data();
    std::int64_t offset = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const auto src = parts[k].data();
        for (std::int64_t o = 0; o < outer; ++o) {
            std::copy_n(src.begin() + o * chunk[k], chunk[k], out.begin() + o * row + offset);
        }
        offset += chunk[k];
    }

    std::vector<const Tensor<T>*> inputs;
    Tape<T>* tape = nullptr;
    for (const auto& p : parts) {
        inputs.push_back(&p);
        if (p.tracked()) {
            if (tape && tape != p.tape()) throw ValidationError("inputs recorded on different tapes");
            tape = p.tape();
        }
    }
    if (!tape) return result;
    return tape->record("concat", std::move(result), inputs,
                        [chunk, outer, row](std::span<const T> g, GradSink<T>& sink) {
                            std::int64_t offset = 0;
                            for (std::size_t k = 0; k < chunk.size(); ++k) {
                                if (sink.wants(k)) {
                                    std::vector<T> gk(static_cast<std::size_t>(outer * chunk[k]));
                                    for (std::int64_t o = 0; o < outer; ++o) {
                                        std::copy_n(g.begin() + o * row + offset, chunk[k], gk.begin() + o * chunk[k]);
                                    }
                                    sink.add(k, gk);
                                }
                                offset += chunk[k];
                            }
                        });
}

template <typename T>
Tensor<T> narrow(const Tensor<T>& x, std::size_t axis, std::int64_t start, std::int64_t length) {
    if (axis >= x.rank()) throw ValidationError("narrow axis out of range for " + shape_str(x.shape()));
    if (start < 0 || length < 1 || start + length > x.dim(axis)) {
        throw ValidationError("narrow range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                              ") out of bounds for " + shape_str(x.shape()));
    }
    std::int64_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
    for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
    const auto row = x.dim(axis) * inner;
    const auto chunk = length * inner;
    const auto offset = start * inner;
    Shape out_shape = x.shape();
    out_shape[axis] = length;
    Tensor<T> result(out_shape);
    auto out = result.mutable_data();
    const auto src = x.data();
    for (std::int64_t o = 0; o < outer; ++o) {
        std::copy_n(src.begin() + o * row + offset, chunk, out.begin() + o * chunk);
    }
    if (!x.tracked()) return result;
    const auto in_n = static_cast<std::size_t>(x.numel());
    return x.tape()->record("narrow", std::move(result), {&x},
                            [outer, row, chunk, offset, in_n](std::span<const T> g, GradSink<T>& sink) {
                                std::vector<T> gx(in_n, T(0));
                                for (std::int64_t o = 0; o < outer; ++o) {
                                    std::copy_n(g.begin() + o * chunk, chunk, gx.begin() + o * row + offset);
                                }
                                sink.add(0, gx);
                            });
}

// ---------------------------------------------------------------------------
// Reductions and pointwise

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    T s = 0;
    for (auto v : x.data()) s += v;
    Tensor<T> result = Tensor<T>::scalar(s);
    if (!x.tracked()) return result;
    const auto n = static_cast<std::size_t>(x.numel());
    return x.tape()->record("sum", std::move(result), {&x}, [n](std::span<const T> g, GradSink<T>& sink) {
        sink.add(0, std::vector<T>(n, g[0]));
    });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
    return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> abs(const Tensor<T>& x) {
    std::vector<T> out(x.data().begin(), x.data().end());
    for (auto& v : out) v = std::abs(v);
    Tensor<T> result(x.shape(), std::move(out));
    if (!x.tracked()) return result;
    return x.tape()->record("abs", std::move(result), {&x}, [x = x.detach()](std::span<const T> g, GradSink<T>& sink) {
        const auto xd = x.data();
        std::vector<T> gx(g.size());
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] = xd[i] > 0 ? g[i] : (xd[i] < 0 ? -g[i] : T(0));
        sink.add(0, gx);
    });
}

template <typename T>
Tensor<T> square(const Tensor<T>& x) {
    std::vector<T> out(x.data().begin(), x.data().end());
    for (auto& v : out) v *= v;
    Tensor<T> result(x.shape(), std::move(out));
    if (!x.tracked()) return result;
    return x.tape()->record("square", std::move(result), {&x},
                            [x = x.detach()](std::span<const T> g, GradSink<T>& sink) {
                                const auto xd = x.data();
                                std::vector<T> gx(g.size());
                                for (std::size_t i = 0; i < g.size(); ++i) gx[i] = T(2) * xd[i] * g[i];
                                sink.add(0, gx);
                            });
}

#define VESR_INSTANTIATE(T)                                                                                        \
    template class Tensor<T>;                                                                                      \
    template class GradSink<T>;                                                                                    \
    template class Tape<T>;                                                                                        \
    template Tape<T>* common_tape(std::initializer_list<const Tensor<T>*>);                                        \
    template Tensor<T> elementwise(ElementwiseOp, const Tensor<T>&, const Tensor<T>&);                             \
    template Tensor<T> add_scalar(const Tensor<T>&, T);                                                            \
    template Tensor<T> scale(const Tensor<T>&, T);                                                                 \
    template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                                 \
    template Tensor<T> transpose(const Tensor<T>&);                                                                \
    template Tensor<T> reshape(const Tensor<T>&, Shape);                                                           \
    template Tensor<T> permute(const Tensor<T>&, const std::vector<std::size_t>&);                                 \
    template Tensor<T> expand(const Tensor<T>&, const Shape&);                                                     \
    template Tensor<T> concat(const std::vector<Tensor<T>>&, std::size_t);                                         \
    template Tensor<T> narrow(const Tensor<T>&, std::size_t, std::int64_t, std::int64_t);                          \
    template Tensor<T> sum(const Tensor<T>&);                                                                      \
    template Tensor<T> mean(const Tensor<T>&);                                                                     \
    template Tensor<T> abs(const Tensor<T>&);                                                                      \
    template Tensor<T> square(const Tensor<T>&);                                                                   \
    template void gemm(bool, bool, std::int64_t, std::int64_t, std::int64_t, T, const T*, const T*, T, T*);        \
    template bool all_finite(std::span<const T>);

VESR_INSTANTIATE(float)
VESR_INSTANTIATE(double)

}  // namespace vesr
