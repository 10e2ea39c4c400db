#include "teaforn/tensor.h"

#include <malloc.h>

// Small products would otherwise take Eigen's coefficient-wise path, whose
// vectorized dot products peel by buffer address; results would then depend
// on where the allocator placed the operands.
#define EIGEN_GEMM_TO_COEFFBASED_THRESHOLD 0
#include <Eigen/Core>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "teaforn/errors.h"

namespace teaforn {

namespace {

std::atomic<std::uint64_t> g_next_node_id{1};
thread_local bool t_grad_enabled = true;
thread_local MemoryStats t_memory;

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using MutMap = Eigen::Map<RowMat<T>>;

void track_alloc(std::size_t bytes) {
    t_memory.live_bytes += static_cast<std::int64_t>(bytes);
    t_memory.peak_bytes = std::max(t_memory.peak_bytes, t_memory.live_bytes);
}

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

// Builds a result node. Operands are recorded only when some operand needs
// a gradient and recording is enabled.
template <typename T>
NodePtr<T> make_result(Shape shape, std::vector<T> values, const char *op, std::vector<NodePtr<T>> operands) {
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->values = std::move(values);
    node->id = g_next_node_id.fetch_add(1, std::memory_order_relaxed);
    node->op = op;
    node->tracked_bytes = node->values.size() * sizeof(T);
    track_alloc(node->tracked_bytes);
    if (t_grad_enabled) {
        bool any = std::any_of(operands.begin(), operands.end(), [](const NodePtr<T> &p) { return p->requires_grad; });
        if (any) {
            node->requires_grad = true;
            node->parents = std::move(operands);
        }
    }
    return node;
}

template <typename T>
NodePtr<T> make_leaf(Shape shape, std::vector<T> values, bool requires_grad) {
    if (shape_numel(shape) != values.size()) {
        throw DimensionError("tensor of shape " + shape_string(shape) + " cannot hold " +
                             std::to_string(values.size()) + " values");
    }
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->values = std::move(values);
    node->requires_grad = requires_grad;
    node->id = g_next_node_id.fetch_add(1, std::memory_order_relaxed);
    node->tracked_bytes = node->values.size() * sizeof(T);
    track_alloc(node->tracked_bytes);
    return node;
}

// Leading-batch broadcast: b's shape must equal a's or be a suffix of it.
bool is_suffix(const Shape &whole, const Shape &suffix) {
    if (suffix.size() > whole.size()) return false;
    return std::equal(suffix.rbegin(), suffix.rend(), whole.rbegin());
}

template <typename T>
void require_broadcastable(const Tensor<T> &a, const Tensor<T> &b, const char *op) {
    if (!is_suffix(a.shape(), b.shape())) {
        throw DimensionError(std::string(op) + ": cannot broadcast " + shape_string(b.shape()) + " onto " +
                             shape_string(a.shape()));
    }
}

std::size_t last_dim(const Shape &shape, const char *op) {
    if (shape.empty() || shape.back() == 0) {
        throw DimensionError(std::string(op) + ": last dimension must be at least 1, got shape " +
                             shape_string(shape));
    }
    return shape.back();
}

}  // namespace

std::size_t shape_numel(const Shape &shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape &shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

template <typename T>
Node<T>::~Node() {
    t_memory.live_bytes -= static_cast<std::int64_t>(tracked_bytes);
}

template <typename T>
void Node<T>::ensure_grad() {
    if (grad.empty()) grad.assign(values.size(), T(0));
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

MemoryStats memory_stats() { return t_memory; }
void reset_peak_memory() { t_memory.peak_bytes = t_memory.live_bytes; }

// ---------------------------------------------------------------------------
// Tensor

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
    std::size_t n = shape_numel(shape);
    return Tensor(make_leaf<T>(std::move(shape), std::vector<T>(n, T(0)), requires_grad));
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
    std::size_t n = shape_numel(shape);
    return Tensor(make_leaf<T>(std::move(shape), std::vector<T>(n, value), requires_grad));
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values, bool requires_grad) {
    return Tensor(make_leaf<T>(std::move(shape), std::move(values), requires_grad));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
    return Tensor(make_leaf<T>(Shape{}, std::vector<T>{value}, requires_grad));
}

template <typename T>
T Tensor<T>::item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_string(shape()));
    return node_->values[0];
}

template <typename T>
T Tensor<T>::at(std::initializer_list<std::size_t> index) const {
    if (index.size() != rank()) throw DimensionError("index rank does not match " + shape_string(shape()));
    std::size_t offset = 0;
    std::size_t axis = 0;
    for (std::size_t i : index) {
        if (i >= node_->shape[axis]) throw IndexError("index out of range for " + shape_string(shape()));
        offset = offset * node_->shape[axis] + i;
        ++axis;
    }
    return node_->values[offset];
}

template <typename T>
std::span<T> Tensor<T>::mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
    return Tensor(make_leaf<T>(node_->shape, node_->values, false));
}

// ---------------------------------------------------------------------------
// matmul

template <typename T>
Tensor<T> matmul(const Tensor<T> &a, const Tensor<T> &b, Transpose transpose_b) {
    const Shape &sa = a.shape();
    const Shape &sb = b.shape();
    auto fail = [&]() -> DimensionError {
        return DimensionError("matmul: incompatible shapes " + shape_string(sa) + " and " + shape_string(sb) +
                              (transpose_b == Transpose::yes ? " (b transposed)" : ""));
    };
    if (sa.size() < 2 || sb.size() < 2) throw fail();
    const bool tb = transpose_b == Transpose::yes;
    const std::size_t m = sa[sa.size() - 2];
    const std::size_t k = sa.back();
    const std::size_t bk = tb ? sb.back() : sb[sb.size() - 2];
    const std::size_t n = tb ? sb[sb.size() - 2] : sb.back();
    if (k != bk) throw fail();

    const bool shared_b = sb.size() == 2;
    std::size_t batches = 1;
    if (!shared_b) {
        if (sa.size() != sb.size() || !std::equal(sa.begin(), sa.end() - 2, sb.begin())) throw fail();
        batches = shape_numel(Shape(sa.begin(), sa.end() - 2));
    }
    Shape out_shape(sa.begin(), sa.end() - 1);
    out_shape.push_back(n);

    std::vector<T> out(shape_numel(out_shape));
    const T *pa = a.values().data();
    const T *pb = b.values().data();
    if (shared_b) {
        const std::size_t rows = a.numel() / std::max<std::size_t>(k, 1);
        if (rows > 0 && k > 0 && n > 0) {
            ConstMap<T> A(pa, rows, k);
            MutMap<T> C(out.data(), rows, n);
            if (tb) {
                C.noalias() = A * ConstMap<T>(pb, n, k).transpose();
            } else {
                C.noalias() = A * ConstMap<T>(pb, k, n);
            }
        } else {
            std::fill(out.begin(), out.end(), T(0));
        }
    } else {
        for (std::size_t i = 0; i < batches; ++i) {
            ConstMap<T> A(pa + i * m * k, m, k);
            MutMap<T> C(out.data() + i * m * n, m, n);
            if (tb) {
                C.noalias() = A * ConstMap<T>(pb + i * n * k, n, k).transpose();
            } else {
                C.noalias() = A * ConstMap<T>(pb + i * k * n, k, n);
            }
        }
    }

    auto node = make_result<T>(std::move(out_shape), std::move(out), "matmul", {a.node(), b.node()});
    if (node->requires_grad) {
        node->backward_fn = [m, k, n, batches, shared_b, tb](Node<T> &self) {
            auto &na = *self.parents[0];
            auto &nb = *self.parents[1];
            const T *g = self.grad.data();
            if (shared_b) {
                const std::size_t rows = na.values.size() / std::max<std::size_t>(k, 1);
                if (rows == 0 || k == 0 || n == 0) return;
                ConstMap<T> G(g, rows, n);
                if (na.requires_grad) {
                    na.ensure_grad();
                    MutMap<T> dA(na.grad.data(), rows, k);
                    if (tb) {
                        dA.noalias() += G * ConstMap<T>(nb.values.data(), n, k);
                    } else {
                        dA.noalias() += G * ConstMap<T>(nb.values.data(), k, n).transpose();
                    }
                }
                if (nb.requires_grad) {
                    nb.ensure_grad();
                    ConstMap<T> A(na.values.data(), rows, k);
                    if (tb) {
                        MutMap<T>(nb.grad.data(), n, k).noalias() += G.transpose() * A;
                    } else {
                        MutMap<T>(nb.grad.data(), k, n).noalias() += A.transpose() * G;
                    }
                }
                return;
            }
            if (na.requires_grad) na.ensure_grad();
            if (nb.requires_grad) nb.ensure_grad();
            for (std::size_t i = 0; i < batches; ++i) {
                ConstMap<T> G(g + i * m * n, m, n);
                if (na.requires_grad) {
                    MutMap<T> dA(na.grad.data() + i * m * k, m, k);
                    if (tb) {
                        dA.noalias() += G * ConstMap<T>(nb.values.data() + i * n * k, n, k);
                    } else {
                        dA.noalias() += G * ConstMap<T>(nb.values.data() + i * k * n, k, n).transpose();
                    }
                }
                if (nb.requires_grad) {
                    ConstMap<T> A(na.values.data() + i * m * k, m, k);
                    if (tb) {
                        MutMap<T>(nb.grad.data() + i * n * k, n, k).noalias() += G.transpose() * A;
                    } else {
                        MutMap<T>(nb.grad.data() + i * k * n, k, n).noalias() += A.transpose() * G;
                    }
                }
            }
        };
    }
    return Tensor<T>(node);
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> add(const Tensor<T> &a, const Tensor<T> &b) {
    require_broadcastable(a, b, "add");
    const std::size_t inner = b.numel();
    std::vector<T> out(a.values().begin(), a.values().end());
    const T *pb = b.values().data();
    for (std::size_t i = 0; i < out.size(); i += inner) {
        for (std::size_t j = 0; j < inner; ++j) out[i + j] += pb[j];
    }
    auto node = make_result<T>(a.shape(), std::move(out), "add", {a.node(), b.node()});
    if (node->requires_grad) {
        node->backward_fn = [inner](Node<T> &self) {
            auto &na = *self.parents[0];
            auto &nb = *self.parents[1];
            const auto &g = self.grad;
            if (na.requires_grad) {
                na.ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) na.grad[i] += g[i];
            }
            if (nb.requires_grad) {
                nb.ensure_grad();
                for (std::size_t i = 0; i < g.size(); i += inner) {
                    for (std::size_t j = 0; j < inner; ++j) nb.grad[j] += g[i + j];
                }
            }
        };
    }
    return Tensor<T>(node);
}

template <typename T>
Tensor<T> sub(const Tensor<T> &a, const Tensor<T> &b) {
    return add(a, scale(b, T(-1)));
}

template <typename T>
Tensor<T> mul(const Tensor<T> &a, const Tensor<T> &b) {
    require_broadcastable(a, b, "mul");
    const std::size_t inner = b.numel();
    std::vector<T> out(a.numel());
    const T *pa = a.values().data();
    const T *pb = b.values().data();
    for (std::size_t i = 0; i < out.size(); i += inner) {
        for (std::size_t j = 0; j < inner; ++j) out[i + j] = pa[i + j] * pb[j];
    }
    auto node = make_result<T>(a.shape(), std::move(out), "mul", {a.node(), b.node()});
    if (node->requires_grad) {
        node->backward_fn = [inner](Node<T> &self) {
            auto &na = *self.parents[0];
            auto &nb = *self.parents[1];
            const auto &g = self.grad;
            if (na.requires_grad) {
                na.ensure_grad();
                for (std::size_t i = 0; i < g.size(); i += inner) {
                    for (std::size_t j = 0; j < inner; ++j) na.grad[i + j] += g[i + j] * nb.values[j];
                }
            }
            if (nb.requires_grad) {
                nb.ensure_grad();
                for (std::size_t i = 0; i < g.size(); i += inner) {
                    for (std::size_t j = 0; j < inner; ++j) nb.grad[j] += g[i + j] * na.values[i + j];
                }
            }
        };
    }
    return Tensor<T>(node);
}

namespace {

// Unary map with derivative expressed through input x and output y.
template <typename T, typename F, typename D>
Tensor<T> unary(const Tensor<T> &a, const char *op, F f, D dfdx) {
    std::vector<T> out(a.numel());
    const T *pa = a.values().data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(pa[i]);
    auto node = make_result<T>(a.shape(), std::move(out), op, {a.node()});
    if (node->requires_grad) {
        node->backward_fn = [dfdx](Node<T> &self) {
            auto &na = *self.parents[0];
            na.ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                na.grad[i] += self.grad[i] * dfdx(na.values[i], self.values[i]);
            }
        };
    }
    return Tensor<T>(node);
}

}  // namespace

template <typename T>
Tensor<T> scale(const Tensor<T> &a, T factor) {
    return unary(
        a, "scale", [factor](T x) { return x * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Tensor<T> relu(const Tensor<T> &a) {
    return unary(
        a, "relu", [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> log(const Tensor<T> &a) {
    return unary(
        a, "log", [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
Tensor<T> exp(const Tensor<T> &a) {
    return unary(
        a, "exp", [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> tanh(const Tensor<T> &a) {
    return unary(
        a, "tanh", [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Tensor<T> sum(const Tensor<T> &a) {
    T total = T(0);
    for (T v : a.values()) total += v;
    auto node = make_result<T>(Shape{}, std::vector<T>{total}, "sum", {a.node()});
    if (node->requires_grad) {
        node->backward_fn = [](Node<T> &self) {
            auto &na = *self.parents[0];
            na.ensure_grad();
            const T g = self.grad[0];
            for (auto &v : na.grad) v += g;
        };
    }
    return Tensor<T>(node);
}

template <typename T>
Tensor<T> mean(const Tensor<T> &a) {
    if (a.numel() == 0) throw ContractError("mean of an empty tensor");
    return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

// ---------------------------------------------------------------------------
// Last-axis normalizers

template <typename T>
Tensor<T> softmax(const Tensor<T> &logits) {
    const std::size_t v = last_dim(logits.shape(), "softmax");
    const std::size_t rows = logits.numel() / v;
    std::vector<T> out(logits.numel());
    const T *px = logits.values().data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T *x = px + r * v;
        T *y = out.data() + r * v;
        T mx = mask_value<T>();
        bool any = false;
        for (std::size_t j = 0; j < v; ++j) {
            if (!is_masked(x[j])) {
                mx = any ? std::max(mx, x[j]) : x[j];
                any = true;
            }
        }
        if (!any) throw DegenerateDistributionError("softmax: every entry of row " + std::to_string(r) + " is masked");
        T z = T(0);
        for (std::size_t j = 0; j < v; ++j) {
            y[j] = is_masked(x[j]) ? T(0) : std::exp(x[j] - mx);
            z += y[j];
        }
        const T inv = T(1) / z;
        for (std::size_t j = 0; j < v; ++j) y[j] *= inv;
    }
    auto node = make_result<T>(logits.shape(), std::move(out), "softmax", {logits.node()});
    if (node->requires_grad) {
        node->backward_fn = [v, rows](Node<T> &self) {
            auto &nx = *self.parents[0];
            nx.ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const T *y = self.values.data() + r * v;
                const T *g = self.grad.data() + r * v;
                T dot = T(0);
                for (std::size_t j = 0; j < v; ++j) dot += g[j] * y[j];
                T *dx = nx.grad.data() + r * v;
                for (std::size_t j = 0; j < v; ++j) dx[j] += y[j] * (g[j] - dot);
            }
        };
    }
    return Tensor<T>(node);
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T> &logits) {
    const std::size_t v = last_dim(logits.shape(), "log_softmax");
    const std::size_t rows = logits.numel() / v;
    std::vector<T> out(logits.numel());
    const T *px = logits.values().data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T *x = px + r * v;
        T *y = out.data() + r * v;
        T mx = mask_value<T>();
        bool any = false;
        for (std::size_t j = 0; j < v; ++j) {
            if (!is_masked(x[j])) {
                mx = any ? std::max(mx, x[j]) : x[j];
                any = true;
            }
        }
        if (!any) {
            throw DegenerateDistributionError("log_softmax: every entry of row " + std::to_string(r) + " is masked");
        }
        T z = T(0);
        for (std::size_t j = 0; j < v; ++j) {
            if (!is_masked(x[j])) z += std::exp(x[j] - mx);
        }
        const T lse = mx + std::log(z);
        for (std::size_t j = 0; j < v; ++j) y[j] = is_masked(x[j]) ? mask_value<T>() : x[j] - lse;
    }
    auto node = make_result<T>(logits.shape(), std::move(out), "log_softmax", {logits.node()});
    if (node->requires_grad) {
        node->backward_fn = [v, rows](Node<T> &self) {
            auto &nx = *self.parents[0];
            nx.ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const T *y = self.values.data() + r * v;
                const T *g = self.grad.data() + r * v;
                T total = T(0);
                for (std::size_t j = 0; j < v; ++j) {
                    if (!is_masked(y[j])) total += g[j];
                }
                T *dx = nx.grad.data() + r * v;
                for (std::size_t j = 0; j < v; ++j) {
                    if (!is_masked(y[j])) dx[j] += g[j] - std::exp(y[j]) * total;
                }
            }
        };
    }
    return Tensor<T>(node);
}

template <typename T>
Tensor<T> top_k_mask(const Tensor<T> &logits, std::size_t k) {
    const std::size_t v = last_dim(logits.shape(), "top_k_mask");
    if (k < 1 || k > v) {
        throw ParameterError("top_k_mask: k=" + std::to_string(k) + " outside [1, " + std::to_string(v) + "]");
    }
    const std::size_t rows = logits.numel() / v;
    std::vector<T> out(logits.numel(), mask_value<T>());
    std::vector<std::uint8_t> kept(logits.numel(), 0);
    std::vector<std::size_t> order(v);
    const T *px = logits.values().data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T *x = px + r * v;
        std::iota(order.begin(), order.end(), std::size_t{0});
        // Larger value first; ties go to the lower index.
        auto before = [x](std::size_t i, std::size_t j) { return x[i] > x[j] || (x[i] == x[j] && i < j); };
        // `before` is a strict total order, so exactly k entries rank at or above the pivot.
        std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k - 1), order.end(), before);
        const std::size_t pivot = order[k - 1];
        for (std::size_t j = 0; j < v; ++j) {
            if (j == pivot || before(j, pivot)) {
                out[r * v + j] = x[j];
                kept[r * v + j] = 1;
            }
        }
    }
    auto node = make_result<T>(logits.shape(), std::move(out), "top_k_mask", {logits.node()});
    if (node->requires_grad) {
        node->backward_fn = [kept = std::move(kept)](Node<T> &self) {
            auto &nx = *self.parents[0];
            nx.ensure_grad();
            for (std::size_t i = 0; i < kept.size(); ++i) {
                if (kept[i]) nx.grad[i] += self.grad[i];
            }
        };
    }
    return Tensor<T>(node);
}

template <typename T>
std::vector<std::int32_t> argmax(const Tensor<T> &a) {
    const std::size_t v = last_dim(a.shape(), "argmax");
    const std::size_t rows = a.numel() / v;
    std::vector<std::int32_t> out(rows);
    const T *px = a.values().data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T *x = px + r * v;
        std::size_t best = 0;
        for (std::size_t j = 1; j < v; ++j) {
            if (x[j] > x[best]) best = j;
        }
        out[r] = static_cast<std::int32_t>(best);
    }
    return out;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T> &x, const Tensor<T> &gain, const Tensor<T> &bias, T eps) {
    const std::size_t d = last_dim(x.shape(), "layer_norm");
    if (gain.numel() != d || bias.numel() != d) {
        throw DimensionError("layer_norm: gain " + shape_string(gain.shape()) + " / bias " +
                             shape_string(bias.shape()) + " do not match " + shape_string(x.shape()));
    }
    const std::size_t rows = x.numel() / d;
    std::vector<T> out(x.numel());
    std::vector<T> xhat(x.numel());
    std::vector<T> inv_std(rows);
    const T *px = x.values().data();
    const T *pg = gain.values().data();
    const T *pb = bias.values().data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T *row = px + r * d;
        T mu = T(0);
        for (std::size_t j = 0; j < d; ++j) mu += row[j];
        mu /= static_cast<T>(d);
        T var = T(0);
        for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<T>(d);
        const T inv = T(1) / std::sqrt(var + eps);
        inv_std[r] = inv;
        for (std::size_t j = 0; j < d; ++j) {
            const T h = (row[j] - mu) * inv;
            xhat[r * d + j] = h;
            out[r * d + j] = h * pg[j] + pb[j];
        }
    }
    auto node = make_result<T>(x.shape(), std::move(out), "layer_norm", {x.node(), gain.node(), bias.node()});
    if (node->requires_grad) {
        node->backward_fn = [d, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T> &self) {
            auto &nx = *self.parents[0];
            auto &ng = *self.parents[1];
            auto &nb = *self.parents[2];
            if (ng.requires_grad) ng.ensure_grad();
            if (nb.requires_grad) nb.ensure_grad();
            if (nx.requires_grad) nx.ensure_grad();
            std::vector<T> dh(d);
            for (std::size_t r = 0; r < rows; ++r) {
                const T *g = self.grad.data() + r * d;
                const T *h = xhat.data() + r * d;
                if (ng.requires_grad) {
                    for (std::size_t j = 0; j < d; ++j) ng.grad[j] += g[j] * h[j];
                }
                if (nb.requires_grad) {
                    for (std::size_t j = 0; j < d; ++j) nb.grad[j] += g[j];
                }
                if (!nx.requires_grad) continue;
                T mean_dh = T(0);
                T mean_dh_h = T(0);
                for (std::size_t j = 0; j < d; ++j) {
                    dh[j] = g[j] * ng.values[j];
                    mean_dh += dh[j];
                    mean_dh_h += dh[j] * h[j];
                }
                mean_dh /= static_cast<T>(d);
                mean_dh_h /= static_cast<T>(d);
                T *dx = nx.grad.data() + r * d;
                for (std::size_t j = 0; j < d; ++j) dx[j] += inv_std[r] * (dh[j] - mean_dh - h[j] * mean_dh_h);
            }
        };
    }
    return Tensor<T>(node);
}

// ---------------------------------------------------------------------------
// Indexing

template <typename T>
Tensor<T> gather_rows(const Tensor<T> &table, std::span<const std::int32_t> indices) {
    if (table.rank() != 2) throw DimensionError("gather_rows: table must be rank 2, got " + shape_string(table.shape()));
    const std::size_t rows = table.dim(0);
    const std::size_t d = table.dim(1);
    std::vector<T> out(indices.size() * d);
    const T *pt = table.values().data();
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const auto idx = indices[i];
        if (idx < 0 || static_cast<std::size_t>(idx) >= rows) {
            throw IndexError("gather_rows: index " + std::to_string(idx) + " at position " + std::to_string(i) +
                             " outside [0, " + std::to_string(rows) + ")");
        }
        std::copy_n(pt + static_cast<std::size_t>(idx) * d, d, out.data() + i * d);
    }
    auto node = make_result<T>(Shape{indices.size(), d}, std::move(out), "gather_rows", {table.node()});
    if (node->requires_grad) {
        node->backward_fn = [d, idx = std::vector<std::int32_t>(indices.begin(), indices.end())](Node<T> &self) {
            auto &nt = *self.parents[0];
            nt.ensure_grad();
            for (std::size_t i = 0; i < idx.size(); ++i) {
                T *dst = nt.grad.data() + static_cast<std::size_t>(idx[i]) * d;
                const T *g = self.grad.data() + i * d;
                for (std::size_t j = 0; j < d; ++j) dst[j] += g[j];
            }
        };
    }
    return Tensor<T>(node);
}

template <typename T>
Tensor<T> pick(const Tensor<T> &x, std::span<const std::int32_t> indices) {
    const std::size_t v = last_dim(x.shape(), "pick");
    const std::size_t rows = x.numel() / v;
    if (indices.size() != rows) {
        throw DimensionError("pick: " + std::to_string(indices.size()) + " indices for " + std::to_string(rows) +
                             " rows of " + shape_string(x.shape()));
    }
    std::vector<T> out(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const auto idx = indices[r];
        if (idx < 0 || static_cast<std::size_t>(idx) >= v) {
            throw IndexError("pick: index " + std::to_string(idx) + " at position " + std::to_string(r) +
                             " outside [0, " + std::to_string(v) + ")");
        }
        out[r] = x.values()[r * v + static_cast<std::size_t>(idx)];
    }
    Shape shape(x.shape().begin(), x.shape().end() - 1);
    auto node = make_result<T>(std::move(shape), std::move(out), "pick", {x.node()});
    if (node->requires_grad) {
        node->backward_fn = [v, idx = std::vector<std::int32_t>(indices.begin(), indices.end())](Node<T> &self) {
            auto &nx = *self.parents[0];
            nx.ensure_grad();
            for (std::size_t r = 0; r < idx.size(); ++r) {
                nx.grad[r * v + static_cast<std::size_t>(idx[r])] += self.grad[r];
            }
        };
    }
    return Tensor<T>(node);
}

template <typename T>
Tensor<T> apply_mask(const Tensor<T> &x, std::vector<T> mask) {
    if (mask.size() != x.numel()) {
        throw DimensionError("apply_mask: mask of " + std::to_string(mask.size()) + " values for " +
                             shape_string(x.shape()));
    }
    std::vector<T> out(x.numel());
    const T *px = x.values().data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = px[i] * mask[i];
    auto node = make_result<T>(x.shape(), std::move(out), "apply_mask", {x.node()});
    if (node->requires_grad) {
        node->backward_fn = [mask = std::move(mask)](Node<T> &self) {
            auto &nx = *self.parents[0];
            nx.ensure_grad();
            for (std::size_t i = 0; i < mask.size(); ++i) nx.grad[i] += self.grad[i] * mask[i];
        };
    }
    return Tensor<T>(node);
}

template <typename T>
Tensor<T> masked_fill(const Tensor<T> &x, std::span<const std::uint8_t> keep) {
    if (keep.size() != x.numel()) {
        throw DimensionError("masked_fill: mask of " + std::to_string(keep.size()) + " entries for " +
                             shape_string(x.shape()));
    }
    std::vector<T> out(x.numel());
    const T *px = x.values().data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = keep[i] ? px[i] : mask_value<T>();
    auto node = make_result<T>(x.shape(), std::move(out), "masked_fill", {x.node()});
    if (node->requires_grad) {
        node->backward_fn = [keep = std::vector<std::uint8_t>(keep.begin(), keep.end())](Node<T> &self) {
            auto &nx = *self.parents[0];
            nx.ensure_grad();
            for (std::size_t i = 0; i < keep.size(); ++i) {
                if (keep[i]) nx.grad[i] += self.grad[i];
            }
        };
    }
    return Tensor<T>(node);
}

// ---------------------------------------------------------------------------
// Layout

template <typename T>
Tensor<T> reshape(const Tensor<T> &x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw DimensionError("reshape: " + shape_string(x.shape()) + " to " + shape_string(shape));
    }
    std::vector<T> out(x.values().begin(), x.values().end());
    auto node = make_result<T>(std::move(shape), std::move(out), "reshape", {x.node()});
    if (node->requires_grad) {
        node->backward_fn = [](Node<T> &self) {
            auto &nx = *self.parents[0];
            nx.ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) nx.grad[i] += self.grad[i];
        };
    }
    return Tensor<T>(node);
}

namespace {

// Shape viewed as [outer, A, middle, B, inner] around the two swapped axes.
struct SwapLayout {
    std::size_t outer, a, middle, b, inner;

    std::size_t src(std::size_t o, std::size_t i, std::size_t m, std::size_t j) const {
        return (((o * a + i) * middle + m) * b + j) * inner;
    }
    std::size_t dst(std::size_t o, std::size_t i, std::size_t m, std::size_t j) const {
        return (((o * b + j) * middle + m) * a + i) * inner;
    }
};

template <typename T, typename Copy>
void for_each_swap(const SwapLayout &l, Copy copy) {
    for (std::size_t o = 0; o < l.outer; ++o)
        for (std::size_t i = 0; i < l.a; ++i)
            for (std::size_t m = 0; m < l.middle; ++m)
                for (std::size_t j = 0; j < l.b; ++j) copy(l.src(o, i, m, j), l.dst(o, i, m, j));
}

}  // namespace

template <typename T>
Tensor<T> swap_axes(const Tensor<T> &x, std::size_t axis_a, std::size_t axis_b) {
    const Shape &s = x.shape();
    if (axis_a >= s.size() || axis_b >= s.size()) {
        throw DimensionError("swap_axes: axes out of range for " + shape_string(s));
    }
    if (axis_a == axis_b) return reshape(x, s);
    if (axis_a > axis_b) std::swap(axis_a, axis_b);
    auto prod = [&](std::size_t lo, std::size_t hi) {
        std::size_t p = 1;
        for (std::size_t i = lo; i < hi; ++i) p *= s[i];
        return p;
    };
    SwapLayout l{prod(0, axis_a), s[axis_a], prod(axis_a + 1, axis_b), s[axis_b], prod(axis_b + 1, s.size())};
    Shape out_shape = s;
    std::swap(out_shape[axis_a], out_shape[axis_b]);
    std::vector<T> out(x.numel());
    const T *px = x.values().data();
    const std::size_t inner = l.inner;
    for_each_swap<T>(l, [&](std::size_t from, std::size_t to) { std::copy_n(px + from, inner, out.data() + to); });
    auto node = make_result<T>(std::move(out_shape), std::move(out), "swap_axes", {x.node()});
    if (node->requires_grad) {
        node->backward_fn = [l](Node<T> &self) {
            auto &nx = *self.parents[0];
            nx.ensure_grad();
            for_each_swap<T>(l, [&](std::size_t from, std::size_t to) {
                for (std::size_t e = 0; e < l.inner; ++e) nx.grad[from + e] += self.grad[to + e];
            });
        };
    }
    return Tensor<T>(node);
}

template <typename T>
Tensor<T> concat(std::span<const Tensor<T>> parts, std::size_t axis) {
    if (parts.empty()) throw ContractError("concat: no operands");
    const Shape &first = parts[0].shape();
    if (axis >= first.size()) throw DimensionError("concat: axis out of range for " + shape_string(first));
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
    for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
    std::size_t total = 0;
    std::vector<std::size_t> widths;
    std::vector<NodePtr<T>> operands;
    for (const auto &p : parts) {
        const Shape &s = p.shape();
        bool ok = s.size() == first.size();
        for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == first[i];
        if (!ok) throw DimensionError("concat: " + shape_string(s) + " does not match " + shape_string(first));
        widths.push_back(s[axis] * inner);
        total += s[axis];
        operands.push_back(p.node());
    }
    Shape out_shape = first;
    out_shape[axis] = total;
    const std::size_t row = total * inner;
    std::vector<T> out(outer * row);
    std::size_t offset = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
        const T *src = parts[p].values().data();
        for (std::size_t o = 0; o < outer; ++o) std::copy_n(src + o * widths[p], widths[p], out.data() + o * row + offset);
        offset += widths[p];
    }
    auto node = make_result<T>(std::move(out_shape), std::move(out), "concat", std::move(operands));
    if (node->requires_grad) {
        node->backward_fn = [outer, row, widths = std::move(widths)](Node<T> &self) {
            std::size_t offset = 0;
            for (std::size_t p = 0; p < self.parents.size(); ++p) {
                auto &np = *self.parents[p];
                if (np.requires_grad) {
                    np.ensure_grad();
                    for (std::size_t o = 0; o < outer; ++o)
                        for (std::size_t e = 0; e < widths[p]; ++e)
                            np.grad[o * widths[p] + e] += self.grad[o * row + offset + e];
                }
                offset += widths[p];
            }
        };
    }
    return Tensor<T>(node);
}

template <typename T>
Tensor<T> slice(const Tensor<T> &x, std::size_t axis, std::size_t begin, std::size_t end) {
    const Shape &s = x.shape();
    if (axis >= s.size()) throw DimensionError("slice: axis out of range for " + shape_string(s));
    if (begin > end || end > s[axis]) {
        throw IndexError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) + ") outside axis of " +
                         std::to_string(s[axis]));
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    const std::size_t src_row = s[axis] * inner;
    const std::size_t dst_row = (end - begin) * inner;
    const std::size_t start = begin * inner;
    Shape out_shape = s;
    out_shape[axis] = end - begin;
    std::vector<T> out(outer * dst_row);
    const T *px = x.values().data();
    for (std::size_t o = 0; o < outer; ++o) std::copy_n(px + o * src_row + start, dst_row, out.data() + o * dst_row);
    auto node = make_result<T>(std::move(out_shape), std::move(out), "slice", {x.node()});
    if (node->requires_grad) {
        node->backward_fn = [outer, src_row, dst_row, start](Node<T> &self) {
            auto &nx = *self.parents[0];
            nx.ensure_grad();
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t e = 0; e < dst_row; ++e) nx.grad[o * src_row + start + e] += self.grad[o * dst_row + e];
        };
    }
    return Tensor<T>(node);
}

template <typename T>
std::vector<T> dropout_mask(std::size_t n, double p, std::mt19937_64 &rng) {
    if (p < 0.0 || p > 1.0) throw ParameterError("dropout probability " + std::to_string(p) + " outside [0, 1]");
    std::vector<T> mask(n, T(1));
    if (p == 0.0) return mask;
    const T keep_scale = p < 1.0 ? static_cast<T>(1.0 / (1.0 - p)) : T(0);
    // One engine draw seeds a SplitMix64 stream; each output yields two 32-bit uniforms.
    const std::uint64_t threshold = static_cast<std::uint64_t>(std::ldexp(p, 32));
    std::uint64_t state = rng();
    for (std::size_t i = 0; i < n; i += 2) {
        std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        z ^= z >> 31;
        mask[i] = (z & 0xffffffffULL) < threshold ? T(0) : keep_scale;
        if (i + 1 < n) mask[i + 1] = (z >> 32) < threshold ? T(0) : keep_scale;
    }
    return mask;
}

void tune_allocator() {
    static const bool done = [] {
        mallopt(M_MMAP_THRESHOLD, 1 << 30);
        mallopt(M_TRIM_THRESHOLD, 1 << 30);
        mallopt(M_TOP_PAD, 64 << 20);
        return true;
    }();
    (void)done;
}

// ---------------------------------------------------------------------------
// Differentiation

template <typename T>
void backward(const Tensor<T> &loss) {
    if (!loss.defined() || loss.numel() != 1) {
        throw ContractError("backward: loss must be a scalar, got " +
                            (loss.defined() ? shape_string(loss.shape()) : std::string("undefined tensor")));
    }
    const auto &root = loss.node();
    if (!root->requires_grad) return;

    std::vector<Node<T> *> order;
    std::unordered_set<Node<T> *> seen;
    std::vector<Node<T> *> stack{root.get()};
    while (!stack.empty()) {
        Node<T> *n = stack.back();
        stack.pop_back();
        if (!seen.insert(n).second) continue;
        order.push_back(n);
        for (const auto &p : n->parents) {
            if (p->requires_grad && !seen.count(p.get())) stack.push_back(p.get());
        }
    }
    std::sort(order.begin(), order.end(), [](const Node<T> *a, const Node<T> *b) { return a->id > b->id; });

    for (Node<T> *n : order) {
        if (!n->is_leaf()) n->grad.clear();
    }
    root->ensure_grad();
    root->grad[0] += T(1);
    for (Node<T> *n : order) {
        if (!n->is_leaf() && n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
    for (Node<T> *n : order) {
        if (!n->is_leaf()) {
            n->grad.clear();
            n->grad.shrink_to_fit();
        }
    }
}

template <typename T>
bool depends_on(const Tensor<T> &from, const Tensor<T> &target) {
    const Node<T> *goal = target.node().get();
    std::unordered_set<const Node<T> *> seen;
    std::vector<const Node<T> *> stack{from.node().get()};
    while (!stack.empty()) {
        const Node<T> *n = stack.back();
        stack.pop_back();
        if (n == goal) return true;
        if (!seen.insert(n).second) continue;
        for (const auto &p : n->parents) stack.push_back(p.get());
    }
    return false;
}

#define TEAFORN_INSTANTIATE(T)                                                                            \
    template struct Node<T>;                                                                              \
    template class Tensor<T>;                                                                             \
    template Tensor<T> matmul(const Tensor<T> &, const Tensor<T> &, Transpose);                          \
    template Tensor<T> add(const Tensor<T> &, const Tensor<T> &);                                         \
    template Tensor<T> sub(const Tensor<T> &, const Tensor<T> &);                                         \
    template Tensor<T> mul(const Tensor<T> &, const Tensor<T> &);                                         \
    template Tensor<T> scale(const Tensor<T> &, T);                                                       \
    template Tensor<T> relu(const Tensor<T> &);                                                           \
    template Tensor<T> log(const Tensor<T> &);                                                            \
    template Tensor<T> exp(const Tensor<T> &);                                                            \
    template Tensor<T> tanh(const Tensor<T> &);                                                           \
    template Tensor<T> sum(const Tensor<T> &);                                                            \
    template Tensor<T> mean(const Tensor<T> &);                                                           \
    template Tensor<T> softmax(const Tensor<T> &);                                                        \
    template Tensor<T> log_softmax(const Tensor<T> &);                                                    \
    template Tensor<T> top_k_mask(const Tensor<T> &, std::size_t);                                        \
    template std::vector<std::int32_t> argmax(const Tensor<T> &);                                         \
    template Tensor<T> layer_norm(const Tensor<T> &, const Tensor<T> &, const Tensor<T> &, T);            \
    template Tensor<T> gather_rows(const Tensor<T> &, std::span<const std::int32_t>);                     \
    template Tensor<T> pick(const Tensor<T> &, std::span<const std::int32_t>);                            \
    template Tensor<T> apply_mask(const Tensor<T> &, std::vector<T>);                                     \
    template Tensor<T> masked_fill(const Tensor<T> &, std::span<const std::uint8_t>);                     \
    template Tensor<T> reshape(const Tensor<T> &, Shape);                                                 \
    template Tensor<T> swap_axes(const Tensor<T> &, std::size_t, std::size_t);                            \
    template Tensor<T> concat(std::span<const Tensor<T>>, std::size_t);                                   \
    template Tensor<T> slice(const Tensor<T> &, std::size_t, std::size_t, std::size_t);                   \
    template std::vector<T> dropout_mask<T>(std::size_t, double, std::mt19937_64 &);                      \
    template void backward(const Tensor<T> &);                                                            \
    template bool depends_on(const Tensor<T> &, const Tensor<T> &);

TEAFORN_INSTANTIATE(float)
TEAFORN_INSTANTIATE(double)

#undef TEAFORN_INSTANTIATE

}  // namespace teaforn
