#pragma once

// Dense f64 N-D tensor with define-by-run reverse-mode differentiation.
// Shapes are immutable after construction; grad buffers are the only
// mutable state, so forward evaluation is safe to run concurrently on
// disjoint outputs.

#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace brg {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t e : s) {
    if (e <= 0) throw std::invalid_argument("tensor extent must be positive");
    n *= e;
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string r = "[";
  for (size_t i = 0; i < s.size(); ++i) r += (i ? "," : "") + std::to_string(s[i]);
  return r + "]";
}

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // sized on demand, same length as value
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Accumulates this node's grad into its parents' grads.
  std::function<void(Node&)> backward_fn;

  int64_t numel() const { return static_cast<int64_t>(value.size()); }

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  static Tensor zeros(const Shape& s, bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    n->shape = s;
    n->value.assign(static_cast<size_t>(shape_numel(s)), 0.0);
    n->requires_grad = requires_grad;
    return Tensor(n);
  }

  static Tensor full(const Shape& s, double v, bool requires_grad = false) {
    Tensor t = zeros(s, requires_grad);
    for (double& x : t.node_->value) x = v;
    return t;
  }

  static Tensor from(const Shape& s, std::vector<double> data, bool requires_grad = false) {
    if (static_cast<int64_t>(data.size()) != shape_numel(s))
      throw std::invalid_argument("data length does not match shape " + shape_str(s));
    auto n = std::make_shared<Node>();
    n->shape = s;
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(n);
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return from({1}, {v}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int64_t numel() const { return node_->numel(); }
  int64_t extent(int axis) const { return node_->shape[static_cast<size_t>(axis)]; }

  double* data() { return node_->value.data(); }
  const double* data() const { return node_->value.data(); }
  std::vector<double>& values() { return node_->value; }
  const std::vector<double>& values() const { return node_->value; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool b) { node_->requires_grad = b; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::vector<double>& grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() {
    if (!node_->grad.empty()) node_->grad.assign(node_->value.size(), 0.0);
  }

  double item() const {
    if (numel() != 1) throw std::invalid_argument("item() requires a scalar tensor");
    return node_->value[0];
  }

  double operator[](int64_t i) const { return node_->value[static_cast<size_t>(i)]; }
  double& operator[](int64_t i) { return node_->value[static_cast<size_t>(i)]; }

  std::shared_ptr<Node> node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Builds a result node wired into the graph. The backward_fn is attached
// only when some input requires grad, so pure inference carries no tape.
inline Tensor make_op(const Shape& out_shape, std::vector<double> out_value,
                      const std::vector<Tensor>& inputs,
                      std::function<void(Node&)> backward_fn) {
  auto n = std::make_shared<Node>();
  n->shape = out_shape;
  n->value = std::move(out_value);
  bool need = false;
  for (const Tensor& t : inputs) need = need || t.requires_grad();
  n->requires_grad = need;
  if (need) {
    for (const Tensor& t : inputs) n->parents.push_back(t.node());
    n->backward_fn = std::move(backward_fn);
  }
  return Tensor(n);
}

// Reverse-mode backward from a scalar loss. The tape is the graph itself;
// replay order is exact reverse topological order of construction.
inline void backward(const Tensor& loss) {
  if (loss.numel() != 1) throw std::invalid_argument("backward requires a scalar loss");
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  // iterative post-order DFS
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      Node* p = n->parents[idx++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  loss.node()->ensure_grad();
  loss.node()->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn) {
      n->ensure_grad();
      for (auto& p : n->parents) p->ensure_grad();
      n->backward_fn(*n);
    }
  }
}

// Deterministic uniform double in [0,1) from a raw 64-bit stream.
// std::uniform_real_distribution is implementation-defined, so we avoid it.
struct Rng {
  explicit Rng(uint64_t seed) : state(seed ? seed : 0x9e3779b97f4a7c15ull) {}
  uint64_t next_u64() {
    // splitmix64
    uint64_t z = (state += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }
  double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  double next_uniform(double lo, double hi) { return lo + (hi - lo) * next_unit(); }
  uint64_t state;
};

inline Tensor random_uniform(const Shape& s, double lo, double hi, Rng& rng,
                             bool requires_grad = false) {
  Tensor t = Tensor::zeros(s, requires_grad);
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.next_uniform(lo, hi);
  return t;
}

}  // namespace brg
