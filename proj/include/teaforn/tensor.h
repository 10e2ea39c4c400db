#pragma once

// Dense tensors with reverse-mode automatic differentiation.
//
// A Tensor is a cheap handle onto a graph node. Operations record their
// operands while gradient recording is enabled; backward() walks the
// reachable nodes in reverse creation order, which is a valid reverse
// topological order because a node can only be created after its operands.
//
// Masked logits use the most negative finite value of the element type
// (mask_value<T>()). softmax() maps such entries to exactly zero.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace teaforn {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape &shape);
std::string shape_string(const Shape &shape);

template <typename T>
constexpr T mask_value() {
    return std::numeric_limits<T>::lowest();
}

template <typename T>
constexpr bool is_masked(T v) {
    return v <= std::numeric_limits<T>::lowest();
}

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> values;
    std::vector<T> grad;  // empty means absent
    bool requires_grad = false;
    std::uint64_t id = 0;
    const char *op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node &)> backward_fn;
    std::size_t tracked_bytes = 0;

    Node() = default;
    Node(const Node &) = delete;
    Node &operator=(const Node &) = delete;
    ~Node();

    bool is_leaf() const { return parents.empty(); }
    void ensure_grad();
};

template <typename T>
class Tensor {
   public:
    using value_type = T;

    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, T value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false);
    static Tensor scalar(T value, bool requires_grad = false);

    bool defined() const { return static_cast<bool>(node_); }
    const Shape &shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
    std::size_t numel() const { return node_->values.size(); }

    std::span<const T> values() const { return node_->values; }
    // Direct write access. Only meaningful on leaves (parameters, inputs).
    std::span<T> mutable_values() { return node_->values; }
    T item() const;
    T at(std::initializer_list<std::size_t> index) const;

    bool requires_grad() const { return node_->requires_grad; }
    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const T> grad() const { return node_->grad; }
    std::span<T> mutable_grad();
    void zero_grad() { node_->grad.clear(); }

    bool is_leaf() const { return node_->is_leaf(); }
    const char *op_name() const { return node_->op; }

    // Identity of the underlying storage; tied parameters compare equal.
    const void *storage_id() const { return node_.get(); }
    bool same_storage(const Tensor &other) const { return node_ == other.node_; }

    // Handle without history; shares no graph edges with *this.
    Tensor detach() const;

    const std::shared_ptr<Node<T>> &node() const { return node_; }
    explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

   private:
    std::shared_ptr<Node<T>> node_;
};

// Gradient recording switch, scoped to the current thread.
class NoGradGuard {
   public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard &) = delete;
    NoGradGuard &operator=(const NoGradGuard &) = delete;

   private:
    bool previous_;
};

bool grad_enabled();

// Live/peak bytes of tensor value storage on the current thread.
struct MemoryStats {
    std::int64_t live_bytes = 0;
    std::int64_t peak_bytes = 0;
};
MemoryStats memory_stats();
void reset_peak_memory();

// Keeps freed graph storage in the process heap instead of returning it to
// the OS after every step. Process-wide; idempotent.
void tune_allocator();

enum class Transpose { no, yes };

// a: [..., m, k]; b: [k, n] (shared across leading dims) or [..., k, n]
// with identical leading dims. Transpose::yes reads b as [..., n, k].
template <typename T>
Tensor<T> matmul(const Tensor<T> &a, const Tensor<T> &b, Transpose transpose_b = Transpose::no);

// Elementwise; b may equal a's shape or any suffix of it.
template <typename T>
Tensor<T> add(const Tensor<T> &a, const Tensor<T> &b);
template <typename T>
Tensor<T> sub(const Tensor<T> &a, const Tensor<T> &b);
template <typename T>
Tensor<T> mul(const Tensor<T> &a, const Tensor<T> &b);

template <typename T>
Tensor<T> scale(const Tensor<T> &a, T factor);
template <typename T>
Tensor<T> relu(const Tensor<T> &a);
template <typename T>
Tensor<T> log(const Tensor<T> &a);
template <typename T>
Tensor<T> exp(const Tensor<T> &a);
template <typename T>
Tensor<T> tanh(const Tensor<T> &a);

template <typename T>
Tensor<T> sum(const Tensor<T> &a);
template <typename T>
Tensor<T> mean(const Tensor<T> &a);

// Last-axis reductions and normalizers.
template <typename T>
Tensor<T> softmax(const Tensor<T> &logits);
template <typename T>
Tensor<T> log_softmax(const Tensor<T> &logits);
template <typename T>
Tensor<T> top_k_mask(const Tensor<T> &logits, std::size_t k);
template <typename T>
std::vector<std::int32_t> argmax(const Tensor<T> &a);
template <typename T>
Tensor<T> layer_norm(const Tensor<T> &x, const Tensor<T> &gain, const Tensor<T> &bias, T eps = T(1e-6));

// Row lookup: result row i is table row indices[i]. Result shape [n, D].
template <typename T>
Tensor<T> gather_rows(const Tensor<T> &table, std::span<const std::int32_t> indices);
// x: [..., V]; picks x[r, indices[r]] for every leading row r. Result drops the last axis.
template <typename T>
Tensor<T> pick(const Tensor<T> &x, std::span<const std::int32_t> indices);

// Multiplies by a constant tensor of the same size (dropout, word drop).
template <typename T>
Tensor<T> apply_mask(const Tensor<T> &x, std::vector<T> mask);
// keep[i] == 0 replaces element i with mask_value<T>(); no gradient there.
template <typename T>
Tensor<T> masked_fill(const Tensor<T> &x, std::span<const std::uint8_t> keep);

template <typename T>
Tensor<T> reshape(const Tensor<T> &x, Shape shape);
template <typename T>
Tensor<T> swap_axes(const Tensor<T> &x, std::size_t axis_a, std::size_t axis_b);
template <typename T>
Tensor<T> concat(std::span<const Tensor<T>> parts, std::size_t axis);
template <typename T>
Tensor<T> slice(const Tensor<T> &x, std::size_t axis, std::size_t begin, std::size_t end);

// Inverted dropout with a freshly drawn keep mask.
template <typename T>
std::vector<T> dropout_mask(std::size_t n, double p, std::mt19937_64 &rng);

template <typename T>
void backward(const Tensor<T> &loss);

// True when `target` is reachable from `from` by following operand edges.
template <typename T>
bool depends_on(const Tensor<T> &from, const Tensor<T> &target);

}  // namespace teaforn
