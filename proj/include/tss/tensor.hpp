#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "tss/rng.hpp"

namespace tss {

struct TensorError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Bad shapes, axes, modes, ranges.
struct ArgumentError : TensorError {
    using TensorError::TensorError;
};

// Guarded numeric conditions (norm floors, non-finite values).
struct NumericError : TensorError {
    using TensorError::TensorError;
};

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) {
        if (d < 0) throw ArgumentError("negative dimension in shape");
        n *= d;
    }
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

struct TensorNode {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // allocated by backward()
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backprop;
};

// Value handle over a tape node. Cheap to copy; the node itself is immutable
// once an op has produced it. Leaves created with requires_grad act as
// trainable parameters: the optimizer may rewrite their value between passes.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}

    static Tensor from(std::vector<double> data, Shape shape, bool requires_grad = false) {
        if (static_cast<int64_t>(data.size()) != shape_numel(shape))
            throw ArgumentError("data length " + std::to_string(data.size()) +
                                " does not match shape " + shape_str(shape));
        auto n = std::make_shared<TensorNode>();
        n->shape = std::move(shape);
        n->value = std::move(data);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        size_t n = static_cast<size_t>(shape_numel(shape));
        return from(std::vector<double>(n, 0.0), std::move(shape), requires_grad);
    }

    static Tensor full(Shape shape, double v, bool requires_grad = false) {
        size_t n = static_cast<size_t>(shape_numel(shape));
        return from(std::vector<double>(n, v), std::move(shape), requires_grad);
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return from({v}, Shape{}, requires_grad);
    }

    static Tensor randn(Shape shape, const CounterRng& rng, double stddev = 1.0,
                        bool requires_grad = false) {
        int64_t n = shape_numel(shape);
        std::vector<double> d(static_cast<size_t>(n));
        for (int64_t i = 0; i < n; ++i) d[static_cast<size_t>(i)] = stddev * rng.normal(static_cast<uint64_t>(i));
        return from(std::move(d), std::move(shape), requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    int64_t dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
    int64_t numel() const { return static_cast<int64_t>(node_->value.size()); }
    bool requires_grad() const { return node_->requires_grad; }
    const std::vector<double>& value() const { return node_->value; }
    const std::vector<double>& grad() const { return node_->grad; }

    // Leaf mutation hooks for the optimizer; ops never call these.
    std::vector<double>& mutable_value() { return node_->value; }
    std::vector<double>& mutable_grad() { return node_->grad; }
    void zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }

    double item() const {
        if (numel() != 1) throw ArgumentError("item() on tensor with numel " + std::to_string(numel()));
        return node_->value[0];
    }

    double at(std::initializer_list<int64_t> idx) const {
        return node_->value[static_cast<size_t>(flat_index(idx))];
    }

    int64_t flat_index(std::initializer_list<int64_t> idx) const {
        if (idx.size() != node_->shape.size()) throw ArgumentError("index rank mismatch");
        int64_t flat = 0;
        size_t d = 0;
        for (int64_t i : idx) {
            int64_t dim = node_->shape[d];
            if (i < 0 || i >= dim) throw ArgumentError("index out of range");
            flat = flat * dim + i;
            ++d;
        }
        return flat;
    }

    Tensor detach() const {
        auto n = std::make_shared<TensorNode>();
        n->shape = node_->shape;
        n->value = node_->value;
        n->requires_grad = false;
        return Tensor(std::move(n));
    }

    Tensor clone(bool requires_grad) const {
        auto n = std::make_shared<TensorNode>();
        n->shape = node_->shape;
        n->value = node_->value;
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    std::shared_ptr<TensorNode> node() const { return node_; }

private:
    std::shared_ptr<TensorNode> node_;
};

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

inline Tensor make_op(const char* op, Shape shape, std::vector<double> value,
                      std::vector<Tensor> parents,
                      std::function<void(TensorNode&)> backprop) {
    if (static_cast<int64_t>(value.size()) != shape_numel(shape))
        throw ArgumentError(std::string(op) + ": internal shape/value mismatch");
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->op = op;
    bool rg = false;
    for (const auto& p : parents) rg = rg || p.requires_grad();
    n->requires_grad = rg;
    if (rg) {
        n->parents.reserve(parents.size());
        for (const auto& p : parents) n->parents.push_back(p.node());
        n->backprop = std::move(backprop);
    }
    return Tensor(std::move(n));
}

// outer/len/inner decomposition for an axis-sliced op.
struct AxisSpan {
    int64_t outer, len, inner;
};

inline AxisSpan axis_span(const Shape& s, int axis) {
    if (axis < 0 || axis >= static_cast<int>(s.size()))
        throw ArgumentError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(s));
    AxisSpan sp{1, s[static_cast<size_t>(axis)], 1};
    for (int d = 0; d < axis; ++d) sp.outer *= s[static_cast<size_t>(d)];
    for (int d = axis + 1; d < static_cast<int>(s.size()); ++d) sp.inner *= s[static_cast<size_t>(d)];
    return sp;
}

inline std::vector<int64_t> row_strides(const Shape& s) {
    std::vector<int64_t> st(s.size(), 1);
    for (int d = static_cast<int>(s.size()) - 2; d >= 0; --d)
        st[static_cast<size_t>(d)] = st[static_cast<size_t>(d) + 1] * s[static_cast<size_t>(d) + 1];
    return st;
}

inline std::vector<double> permute_raw(const std::vector<double>& data, const Shape& shape,
                                       const std::vector<int>& perm) {
    Shape out_shape(shape.size());
    for (size_t d = 0; d < perm.size(); ++d) out_shape[d] = shape[static_cast<size_t>(perm[d])];
    auto in_st = row_strides(shape);
    std::vector<int64_t> gather_stride(perm.size());
    for (size_t d = 0; d < perm.size(); ++d) gather_stride[d] = in_st[static_cast<size_t>(perm[d])];
    int64_t n = shape_numel(shape);
    std::vector<double> out(static_cast<size_t>(n));
    std::vector<int64_t> idx(shape.size(), 0);
    for (int64_t i = 0; i < n; ++i) {
        int64_t src = 0;
        for (size_t d = 0; d < idx.size(); ++d) src += idx[d] * gather_stride[d];
        out[static_cast<size_t>(i)] = data[static_cast<size_t>(src)];
        for (int d = static_cast<int>(idx.size()) - 1; d >= 0; --d) {
            if (++idx[static_cast<size_t>(d)] < out_shape[static_cast<size_t>(d)]) break;
            idx[static_cast<size_t>(d)] = 0;
        }
    }
    return out;
}

enum class BroadcastKind { Same, Scalar, LastDim };

inline BroadcastKind broadcast_kind(const Shape& a, const Shape& b, const char* op) {
    if (a == b) return BroadcastKind::Same;
    if (shape_numel(b) == 1) return BroadcastKind::Scalar;
    if (b.size() == 1 && !a.empty() && a.back() == b[0]) return BroadcastKind::LastDim;
    throw ArgumentError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                        " are not broadcast-compatible (same shape, scalar, or last-dim vector)");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Primitives. The set is closed: every differentiable op the library exposes
// is defined here and has a grad_check entry in the test suite.
// ---------------------------------------------------------------------------

// add(a, b): b may equal a's shape, be a scalar, or be a vector matching a's
// last dimension (bias case). Same contract for mul.
inline Tensor add(const Tensor& a, const Tensor& b) {
    auto kind = detail::broadcast_kind(a.shape(), b.shape(), "add");
    const auto& av = a.value();
    const auto& bv = b.value();
    std::vector<double> out(av.size());
    int64_t last = kind == detail::BroadcastKind::LastDim ? a.shape().back() : 1;
    for (size_t i = 0; i < av.size(); ++i) {
        double bb = kind == detail::BroadcastKind::Same ? bv[i]
                  : kind == detail::BroadcastKind::Scalar ? bv[0]
                  : bv[i % static_cast<size_t>(last)];
        out[i] = av[i] + bb;
    }
    auto an = a.node(), bn = b.node();
    return detail::make_op("add", a.shape(), std::move(out), {a, b}, [an, bn, kind, last](TensorNode& self) {
        if (an->requires_grad)
            for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
        if (bn->requires_grad) {
            for (size_t i = 0; i < self.grad.size(); ++i) {
                size_t j = kind == detail::BroadcastKind::Same ? i
                         : kind == detail::BroadcastKind::Scalar ? 0
                         : i % static_cast<size_t>(last);
                bn->grad[j] += self.grad[i];
            }
        }
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    auto kind = detail::broadcast_kind(a.shape(), b.shape(), "mul");
    const auto& av = a.value();
    const auto& bv = b.value();
    std::vector<double> out(av.size());
    int64_t last = kind == detail::BroadcastKind::LastDim ? a.shape().back() : 1;
    auto bsel = [&](size_t i) {
        return kind == detail::BroadcastKind::Same ? bv[i]
             : kind == detail::BroadcastKind::Scalar ? bv[0]
             : bv[i % static_cast<size_t>(last)];
    };
    for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bsel(i);
    auto an = a.node(), bn = b.node();
    return detail::make_op("mul", a.shape(), std::move(out), {a, b}, [an, bn, kind, last](TensorNode& self) {
        for (size_t i = 0; i < self.grad.size(); ++i) {
            size_t j = kind == detail::BroadcastKind::Same ? i
                     : kind == detail::BroadcastKind::Scalar ? 0
                     : i % static_cast<size_t>(last);
            if (an->requires_grad) an->grad[i] += self.grad[i] * bn->value[j];
            if (bn->requires_grad) bn->grad[j] += self.grad[i] * an->value[i];
        }
    });
}

inline Tensor scale(const Tensor& x, double c) {
    std::vector<double> out(x.value().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = x.value()[i] * c;
    auto xn = x.node();
    return detail::make_op("scale", x.shape(), std::move(out), {x}, [xn, c](TensorNode& self) {
        for (size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i] * c;
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw ArgumentError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                            shape_str(b.shape()));
    int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(static_cast<size_t>(m * n));
    {
        detail::ConstMatMap A(a.value().data(), m, k), B(b.value().data(), k, n);
        detail::MatMap C(out.data(), m, n);
        C.noalias() = A * B;
    }
    auto an = a.node(), bn = b.node();
    return detail::make_op("matmul", {m, n}, std::move(out), {a, b}, [an, bn, m, k, n](TensorNode& self) {
        detail::ConstMatMap G(self.grad.data(), m, n);
        if (an->requires_grad) {
            detail::ConstMatMap B(bn->value.data(), k, n);
            detail::MatMap GA(an->grad.data(), m, k);
            GA.noalias() += G * B.transpose();
        }
        if (bn->requires_grad) {
            detail::ConstMatMap A(an->value.data(), m, k);
            detail::MatMap GB(bn->grad.data(), k, n);
            GB.noalias() += A.transpose() * G;
        }
    });
}

// Batched matmul over a shared leading dimension.
inline Tensor bmm(const Tensor& a, const Tensor& b) {
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
        throw ArgumentError("bmm: incompatible shapes " + shape_str(a.shape()) + " x " +
                            shape_str(b.shape()));
    int64_t bt = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
    std::vector<double> out(static_cast<size_t>(bt * m * n));
    for (int64_t i = 0; i < bt; ++i) {
        detail::ConstMatMap A(a.value().data() + i * m * k, m, k), B(b.value().data() + i * k * n, k, n);
        detail::MatMap C(out.data() + i * m * n, m, n);
        C.noalias() = A * B;
    }
    auto an = a.node(), bn = b.node();
    return detail::make_op("bmm", {bt, m, n}, std::move(out), {a, b}, [an, bn, bt, m, k, n](TensorNode& self) {
        for (int64_t i = 0; i < bt; ++i) {
            detail::ConstMatMap G(self.grad.data() + i * m * n, m, n);
            if (an->requires_grad) {
                detail::ConstMatMap B(bn->value.data() + i * k * n, k, n);
                detail::MatMap GA(an->grad.data() + i * m * k, m, k);
                GA.noalias() += G * B.transpose();
            }
            if (bn->requires_grad) {
                detail::ConstMatMap A(an->value.data() + i * m * k, m, k);
                detail::MatMap GB(bn->grad.data() + i * k * n, k, n);
                GB.noalias() += A.transpose() * G;
            }
        }
    });
}

inline Tensor transpose(const Tensor& x, std::vector<int> perm) {
    if (perm.size() != x.shape().size()) throw ArgumentError("transpose: perm rank mismatch");
    std::vector<bool> seen(perm.size(), false);
    for (int p : perm) {
        if (p < 0 || p >= static_cast<int>(perm.size()) || seen[static_cast<size_t>(p)])
            throw ArgumentError("transpose: invalid permutation");
        seen[static_cast<size_t>(p)] = true;
    }
    Shape out_shape(perm.size());
    for (size_t d = 0; d < perm.size(); ++d) out_shape[d] = x.shape()[static_cast<size_t>(perm[d])];
    auto out = detail::permute_raw(x.value(), x.shape(), perm);
    std::vector<int> inv(perm.size());
    for (size_t d = 0; d < perm.size(); ++d) inv[static_cast<size_t>(perm[d])] = static_cast<int>(d);
    auto xn = x.node();
    Shape os = out_shape;
    return detail::make_op("transpose", std::move(out_shape), std::move(out), {x},
                           [xn, inv, os](TensorNode& self) {
                               auto g = detail::permute_raw(self.grad, os, inv);
                               for (size_t i = 0; i < g.size(); ++i) xn->grad[i] += g[i];
                           });
}

inline Tensor reshape(const Tensor& x, Shape new_shape) {
    int64_t known = 1, infer = -1;
    for (size_t d = 0; d < new_shape.size(); ++d) {
        if (new_shape[d] == -1) {
            if (infer >= 0) throw ArgumentError("reshape: more than one -1");
            infer = static_cast<int64_t>(d);
        } else {
            known *= new_shape[d];
        }
    }
    if (infer >= 0) {
        if (known == 0 || x.numel() % known != 0) throw ArgumentError("reshape: cannot infer dimension");
        new_shape[static_cast<size_t>(infer)] = x.numel() / known;
    }
    if (shape_numel(new_shape) != x.numel())
        throw ArgumentError("reshape: numel mismatch " + shape_str(x.shape()) + " -> " + shape_str(new_shape));
    auto xn = x.node();
    return detail::make_op("reshape", std::move(new_shape), x.value(), {x}, [xn](TensorNode& self) {
        for (size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i];
    });
}

inline Tensor concatenate(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw ArgumentError("concatenate: empty input");
    Shape base = parts[0].shape();
    if (axis < 0 || axis >= static_cast<int>(base.size())) throw ArgumentError("concatenate: axis out of range");
    int64_t total = 0;
    for (const auto& p : parts) {
        if (p.rank() != static_cast<int>(base.size())) throw ArgumentError("concatenate: rank mismatch");
        for (int d = 0; d < p.rank(); ++d)
            if (d != axis && p.dim(d) != base[static_cast<size_t>(d)])
                throw ArgumentError("concatenate: shape mismatch off-axis");
        total += p.dim(axis);
    }
    Shape out_shape = base;
    out_shape[static_cast<size_t>(axis)] = total;
    auto sp = detail::axis_span(out_shape, axis);
    std::vector<double> out(static_cast<size_t>(shape_numel(out_shape)));
    std::vector<int64_t> offsets(parts.size());
    {
        int64_t off = 0;
        for (size_t p = 0; p < parts.size(); ++p) {
            offsets[p] = off;
            int64_t len = parts[p].dim(axis);
            const auto& pv = parts[p].value();
            for (int64_t o = 0; o < sp.outer; ++o)
                std::copy_n(pv.data() + o * len * sp.inner, len * sp.inner,
                            out.data() + (o * sp.len + off) * sp.inner);
            off += len;
        }
    }
    std::vector<std::shared_ptr<TensorNode>> pnodes;
    std::vector<int64_t> lens;
    for (const auto& p : parts) {
        pnodes.push_back(p.node());
        lens.push_back(p.dim(axis));
    }
    return detail::make_op("concatenate", std::move(out_shape), std::move(out), parts,
                           [pnodes, lens, offsets, sp](TensorNode& self) {
                               for (size_t p = 0; p < pnodes.size(); ++p) {
                                   if (!pnodes[p]->requires_grad) continue;
                                   for (int64_t o = 0; o < sp.outer; ++o) {
                                       const double* src = self.grad.data() + (o * sp.len + offsets[p]) * sp.inner;
                                       double* dst = pnodes[p]->grad.data() + o * lens[p] * sp.inner;
                                       for (int64_t i = 0; i < lens[p] * sp.inner; ++i) dst[i] += src[i];
                                   }
                               }
                           });
}

// out.flat[i] = mapping[i] < 0 ? 0 : x.flat[mapping[i]]. The one primitive
// behind every pure index rearrangement (row gathers, temporal shifts,
// embedding lookups); gradient is the transposed scatter-add.
inline Tensor gather(const Tensor& x, const std::vector<int64_t>& mapping, Shape out_shape) {
    if (static_cast<int64_t>(mapping.size()) != shape_numel(out_shape))
        throw ArgumentError("gather: mapping length does not match output shape");
    const auto& xv = x.value();
    std::vector<double> out(mapping.size());
    for (size_t i = 0; i < mapping.size(); ++i) {
        int64_t src = mapping[i];
        if (src >= x.numel()) throw ArgumentError("gather: source index out of range");
        out[i] = src < 0 ? 0.0 : xv[static_cast<size_t>(src)];
    }
    auto xn = x.node();
    auto map = std::make_shared<std::vector<int64_t>>(mapping);
    return detail::make_op("gather", std::move(out_shape), std::move(out), {x}, [xn, map](TensorNode& self) {
        for (size_t i = 0; i < map->size(); ++i) {
            int64_t src = (*map)[i];
            if (src >= 0) xn->grad[static_cast<size_t>(src)] += self.grad[i];
        }
    });
}

// Convenience: gather whole rows of a 2-D tensor; row index -1 yields zeros.
inline Tensor gather_rows(const Tensor& x, const std::vector<int64_t>& rows) {
    if (x.rank() != 2) throw ArgumentError("gather_rows: expected rank-2 input");
    int64_t c = x.dim(1);
    std::vector<int64_t> mapping(rows.size() * static_cast<size_t>(c));
    for (size_t r = 0; r < rows.size(); ++r) {
        if (rows[r] >= x.dim(0)) throw ArgumentError("gather_rows: row index out of range");
        for (int64_t j = 0; j < c; ++j)
            mapping[r * static_cast<size_t>(c) + static_cast<size_t>(j)] =
                rows[r] < 0 ? -1 : rows[r] * c + j;
    }
    return gather(x, mapping, {static_cast<int64_t>(rows.size()), c});
}

inline Tensor softmax(const Tensor& x, int axis) {
    auto sp = detail::axis_span(x.shape(), axis);
    const auto& xv = x.value();
    std::vector<double> out(xv.size());
    for (int64_t o = 0; o < sp.outer; ++o) {
        for (int64_t i = 0; i < sp.inner; ++i) {
            double mx = -std::numeric_limits<double>::infinity();
            for (int64_t l = 0; l < sp.len; ++l)
                mx = std::max(mx, xv[static_cast<size_t>((o * sp.len + l) * sp.inner + i)]);
            double z = 0;
            for (int64_t l = 0; l < sp.len; ++l) {
                size_t idx = static_cast<size_t>((o * sp.len + l) * sp.inner + i);
                out[idx] = std::exp(xv[idx] - mx);
                z += out[idx];
            }
            for (int64_t l = 0; l < sp.len; ++l) out[static_cast<size_t>((o * sp.len + l) * sp.inner + i)] /= z;
        }
    }
    auto xn = x.node();
    auto saved = std::make_shared<std::vector<double>>(out);
    return detail::make_op("softmax", x.shape(), std::move(out), {x}, [xn, saved, sp](TensorNode& self) {
        const auto& s = *saved;
        for (int64_t o = 0; o < sp.outer; ++o) {
            for (int64_t i = 0; i < sp.inner; ++i) {
                double dot = 0;
                for (int64_t l = 0; l < sp.len; ++l) {
                    size_t idx = static_cast<size_t>((o * sp.len + l) * sp.inner + i);
                    dot += self.grad[idx] * s[idx];
                }
                for (int64_t l = 0; l < sp.len; ++l) {
                    size_t idx = static_cast<size_t>((o * sp.len + l) * sp.inner + i);
                    xn->grad[idx] += s[idx] * (self.grad[idx] - dot);
                }
            }
        }
    });
}

inline Tensor log_softmax(const Tensor& x, int axis) {
    auto sp = detail::axis_span(x.shape(), axis);
    const auto& xv = x.value();
    std::vector<double> out(xv.size());
    for (int64_t o = 0; o < sp.outer; ++o) {
        for (int64_t i = 0; i < sp.inner; ++i) {
            double mx = -std::numeric_limits<double>::infinity();
            for (int64_t l = 0; l < sp.len; ++l)
                mx = std::max(mx, xv[static_cast<size_t>((o * sp.len + l) * sp.inner + i)]);
            double z = 0;
            for (int64_t l = 0; l < sp.len; ++l)
                z += std::exp(xv[static_cast<size_t>((o * sp.len + l) * sp.inner + i)] - mx);
            double lz = mx + std::log(z);
            for (int64_t l = 0; l < sp.len; ++l) {
                size_t idx = static_cast<size_t>((o * sp.len + l) * sp.inner + i);
                out[idx] = xv[idx] - lz;
            }
        }
    }
    auto xn = x.node();
    auto saved = std::make_shared<std::vector<double>>(out);
    return detail::make_op("log_softmax", x.shape(), std::move(out), {x}, [xn, saved, sp](TensorNode& self) {
        const auto& y = *saved;
        for (int64_t o = 0; o < sp.outer; ++o) {
            for (int64_t i = 0; i < sp.inner; ++i) {
                double gsum = 0;
                for (int64_t l = 0; l < sp.len; ++l)
                    gsum += self.grad[static_cast<size_t>((o * sp.len + l) * sp.inner + i)];
                for (int64_t l = 0; l < sp.len; ++l) {
                    size_t idx = static_cast<size_t>((o * sp.len + l) * sp.inner + i);
                    xn->grad[idx] += self.grad[idx] - std::exp(y[idx]) * gsum;
                }
            }
        }
    });
}

// Normalizes the last axis to zero mean / unit variance (population variance,
// eps inside the square root), then applies the affine gain/bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5) {
    if (x.rank() < 1) throw ArgumentError("layer_norm: scalar input");
    int64_t c = x.shape().back();
    if (gain.numel() != c || bias.numel() != c)
        throw ArgumentError("layer_norm: gain/bias must match last dimension " + std::to_string(c));
    if (eps <= 0) throw ArgumentError("layer_norm: eps must be positive");
    int64_t rows = x.numel() / c;
    const auto& xv = x.value();
    std::vector<double> out(xv.size());
    auto xhat = std::make_shared<std::vector<double>>(xv.size());
    auto rstd = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
    for (int64_t r = 0; r < rows; ++r) {
        const double* xr = xv.data() + r * c;
        double mean = 0;
        for (int64_t j = 0; j < c; ++j) mean += xr[j];
        mean /= static_cast<double>(c);
        double var = 0;
        for (int64_t j = 0; j < c; ++j) var += (xr[j] - mean) * (xr[j] - mean);
        var /= static_cast<double>(c);
        double rs = 1.0 / std::sqrt(var + eps);
        (*rstd)[static_cast<size_t>(r)] = rs;
        for (int64_t j = 0; j < c; ++j) {
            double h = (xr[j] - mean) * rs;
            (*xhat)[static_cast<size_t>(r * c + j)] = h;
            out[static_cast<size_t>(r * c + j)] = h * gain.value()[static_cast<size_t>(j)] +
                                                  bias.value()[static_cast<size_t>(j)];
        }
    }
    auto xn = x.node(), gn = gain.node(), bn = bias.node();
    return detail::make_op("layer_norm", x.shape(), std::move(out), {x, gain, bias},
                           [xn, gn, bn, xhat, rstd, rows, c](TensorNode& self) {
                               for (int64_t r = 0; r < rows; ++r) {
                                   const double* g = self.grad.data() + r * c;
                                   const double* h = xhat->data() + r * c;
                                   double rs = (*rstd)[static_cast<size_t>(r)];
                                   double m1 = 0, m2 = 0;  // mean(g*gain), mean(g*gain*xhat)
                                   for (int64_t j = 0; j < c; ++j) {
                                       double gg = g[j] * gn->value[static_cast<size_t>(j)];
                                       m1 += gg;
                                       m2 += gg * h[j];
                                   }
                                   m1 /= static_cast<double>(c);
                                   m2 /= static_cast<double>(c);
                                   for (int64_t j = 0; j < c; ++j) {
                                       double gg = g[j] * gn->value[static_cast<size_t>(j)];
                                       if (xn->requires_grad)
                                           xn->grad[static_cast<size_t>(r * c + j)] += rs * (gg - m1 - h[j] * m2);
                                       if (gn->requires_grad) gn->grad[static_cast<size_t>(j)] += g[j] * h[j];
                                       if (bn->requires_grad) bn->grad[static_cast<size_t>(j)] += g[j];
                                   }
                               }
                           });
}

// GELU, tanh approximation.
inline Tensor gelu(const Tensor& x) {
    constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double kA = 0.044715;
    const auto& xv = x.value();
    std::vector<double> out(xv.size());
    for (size_t i = 0; i < xv.size(); ++i) {
        double v = xv[i];
        out[i] = 0.5 * v * (1.0 + std::tanh(kC * (v + kA * v * v * v)));
    }
    auto xn = x.node();
    return detail::make_op("gelu", x.shape(), std::move(out), {x}, [xn](TensorNode& self) {
        for (size_t i = 0; i < self.grad.size(); ++i) {
            double v = xn->value[i];
            double u = kC * (v + kA * v * v * v);
            double t = std::tanh(u);
            double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * kC * (1.0 + 3.0 * kA * v * v);
            xn->grad[i] += self.grad[i] * d;
        }
    });
}

inline Tensor exp(const Tensor& x) {
    const auto& xv = x.value();
    std::vector<double> out(xv.size());
    for (size_t i = 0; i < xv.size(); ++i) out[i] = std::exp(xv[i]);
    auto xn = x.node();
    auto saved = std::make_shared<std::vector<double>>(out);
    return detail::make_op("exp", x.shape(), std::move(out), {x}, [xn, saved](TensorNode& self) {
        for (size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i] * (*saved)[i];
    });
}

// Gradient passes through where lo <= x <= hi, zero outside.
inline Tensor clamp(const Tensor& x, double lo, double hi) {
    if (lo > hi) throw ArgumentError("clamp: lo > hi");
    const auto& xv = x.value();
    std::vector<double> out(xv.size());
    for (size_t i = 0; i < xv.size(); ++i) out[i] = std::min(std::max(xv[i], lo), hi);
    auto xn = x.node();
    return detail::make_op("clamp", x.shape(), std::move(out), {x}, [xn, lo, hi](TensorNode& self) {
        for (size_t i = 0; i < self.grad.size(); ++i)
            if (xn->value[i] >= lo && xn->value[i] <= hi) xn->grad[i] += self.grad[i];
    });
}

inline Tensor sum(const Tensor& x) {
    double s = 0;
    for (double v : x.value()) s += v;
    auto xn = x.node();
    return detail::make_op("sum", Shape{}, {s}, {x}, [xn](TensorNode& self) {
        for (size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += self.grad[0];
    });
}

inline Tensor mean(const Tensor& x) {
    if (x.numel() == 0) throw ArgumentError("mean: empty tensor");
    double s = 0;
    for (double v : x.value()) s += v;
    double inv = 1.0 / static_cast<double>(x.numel());
    auto xn = x.node();
    return detail::make_op("mean", Shape{}, {s * inv}, {x}, [xn, inv](TensorNode& self) {
        for (size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += self.grad[0] * inv;
    });
}

// Rows scaled to unit L2 norm; rows whose norm falls below eps are scaled by
// 1/eps instead (linear regime keeps the gradient defined at zero).
inline Tensor l2_normalize_rows(const Tensor& x, double eps = 1e-12) {
    if (x.rank() != 2) throw ArgumentError("l2_normalize_rows: expected rank-2 input");
    int64_t rows = x.dim(0), c = x.dim(1);
    const auto& xv = x.value();
    std::vector<double> out(xv.size());
    auto norms = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
    for (int64_t r = 0; r < rows; ++r) {
        double n2 = 0;
        for (int64_t j = 0; j < c; ++j) n2 += xv[static_cast<size_t>(r * c + j)] * xv[static_cast<size_t>(r * c + j)];
        double n = std::max(std::sqrt(n2), eps);
        (*norms)[static_cast<size_t>(r)] = n;
        for (int64_t j = 0; j < c; ++j) out[static_cast<size_t>(r * c + j)] = xv[static_cast<size_t>(r * c + j)] / n;
    }
    auto xn = x.node();
    return detail::make_op("l2_normalize_rows", x.shape(), std::move(out), {x},
                           [xn, norms, rows, c, eps](TensorNode& self) {
                               for (int64_t r = 0; r < rows; ++r) {
                                   double n = (*norms)[static_cast<size_t>(r)];
                                   bool floored = false;
                                   {
                                       double n2 = 0;
                                       for (int64_t j = 0; j < c; ++j) {
                                           double v = xn->value[static_cast<size_t>(r * c + j)];
                                           n2 += v * v;
                                       }
                                       floored = std::sqrt(n2) < eps;
                                   }
                                   if (floored) {
                                       for (int64_t j = 0; j < c; ++j)
                                           xn->grad[static_cast<size_t>(r * c + j)] +=
                                               self.grad[static_cast<size_t>(r * c + j)] / n;
                                       continue;
                                   }
                                   double dot = 0;
                                   for (int64_t j = 0; j < c; ++j)
                                       dot += self.grad[static_cast<size_t>(r * c + j)] *
                                              xn->value[static_cast<size_t>(r * c + j)] / n;
                                   for (int64_t j = 0; j < c; ++j) {
                                       double y = xn->value[static_cast<size_t>(r * c + j)] / n;
                                       xn->grad[static_cast<size_t>(r * c + j)] +=
                                           (self.grad[static_cast<size_t>(r * c + j)] - y * dot) / n;
                                   }
                               }
                           });
}

// Cosine similarity between all row pairs: [P,C] x [Q,C] -> [P,Q]. Composed
// from primitives, so it differentiates for free.
inline Tensor cosine_similarity(const Tensor& a, const Tensor& b, double eps = 1e-12) {
    Tensor an = l2_normalize_rows(a, eps);
    Tensor bn = l2_normalize_rows(b, eps);
    return matmul(an, transpose(bn, {1, 0}));
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

// ---------------------------------------------------------------------------
// Reverse pass
// ---------------------------------------------------------------------------

inline void backward(const Tensor& loss) {
    if (loss.numel() != 1) throw ArgumentError("backward: loss must be scalar");
    if (!loss.requires_grad()) throw ArgumentError("backward: loss does not depend on any parameter");

    // Iterative post-order topological sort.
    std::vector<TensorNode*> topo;
    std::unordered_set<TensorNode*> visited;
    std::vector<std::pair<TensorNode*, size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    visited.insert(loss.node().get());
    while (!stack.empty()) {
        TensorNode* node = stack.back().first;
        size_t i = stack.back().second;
        if (i < node->parents.size()) {
            ++stack.back().second;
            TensorNode* p = node->parents[i].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            topo.push_back(node);
            stack.pop_back();
        }
    }
    for (TensorNode* n : topo) n->grad.assign(n->value.size(), 0.0);
    loss.node()->grad[0] = 1.0;
    for (auto it = topo.rbegin(); it != topo.rend(); ++it)
        if ((*it)->backprop) (*it)->backprop(**it);
}

inline bool all_finite(const Tensor& t) {
    for (double v : t.value())
        if (!std::isfinite(v)) return false;
    return true;
}

}  // namespace tss
