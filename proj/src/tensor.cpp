#include "etl/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "etl/errors.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace etl {

namespace {

#if defined(__GLIBC__)
// Activation buffers are a few MB and are freed every step. Keep them on the
// heap instead of letting glibc mmap/munmap (and page-fault) each one.
[[maybe_unused]] const bool kAllocatorTuned = [] {
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
  return true;
}();
#endif

}  // namespace

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

void check_finite(std::span<const double> values, const char* where) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string("non-finite value in ") + where);
    }
  }
}

namespace detail {

std::span<double> grad_buffer(Node& node) {
  if (node.grad.empty()) node.grad.assign(node.values.size(), 0.0);
  return node.grad;
}

}  // namespace detail

namespace {

detail::Node& require(const std::shared_ptr<detail::Node>& node) {
  if (!node) throw Error("use of an undefined tensor");
  return *node;
}

}  // namespace

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) {
  if (numel(shape) != values.size()) {
    throw ShapeError("tensor shape " + shape_string(shape) + " holds " +
                     std::to_string(numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  check_finite(values, "tensor construction");
  node_ = std::make_shared<detail::Node>();
  node_->shape = std::move(shape);
  node_->values = std::move(values);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::vector<double> values(numel(shape), value);
  return Tensor(std::move(shape), std::move(values), requires_grad);
}

Tensor Tensor::scalar(double value) { return Tensor({}, {value}); }

Tensor Tensor::from_node(std::shared_ptr<detail::Node> node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

const Shape& Tensor::shape() const { return require(node_).shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) throw ShapeError("axis out of range for " + shape_string(s));
  return s[axis];
}

std::size_t Tensor::size() const { return require(node_).values.size(); }

std::span<const double> Tensor::values() const { return require(node_).values; }

std::span<double> Tensor::mutable_values() {
  detail::Node& n = require(node_);
  if (!n.leaf) throw GraphError("cannot mutate an interior graph node");
  return n.values;
}

double Tensor::item() const {
  const detail::Node& n = require(node_);
  if (n.values.size() != 1) {
    throw ShapeError("item() on tensor of shape " + shape_string(n.shape));
  }
  return n.values[0];
}

bool Tensor::requires_grad() const { return require(node_).requires_grad; }

void Tensor::set_requires_grad(bool on) {
  detail::Node& n = require(node_);
  if (!n.leaf) throw GraphError("requires_grad can only be toggled on leaves");
  n.requires_grad = on;
}

bool Tensor::is_leaf() const { return require(node_).leaf; }

bool Tensor::has_grad() const { return !require(node_).grad.empty(); }

std::span<const double> Tensor::grad() const { return require(node_).grad; }

void Tensor::zero_grad() {
  detail::Node& n = require(node_);
  std::fill(n.grad.begin(), n.grad.end(), 0.0);
}

Tensor Tensor::clone() const {
  const detail::Node& n = require(node_);
  return Tensor(n.shape, n.values, false);
}

void Tensor::backward() const {
  detail::Node& root = require(node_);
  if (root.values.size() != 1) {
    throw GraphError("backward() requires a scalar loss, got shape " + shape_string(root.shape));
  }
  if (root.consumed) throw GraphError("graph already consumed by a previous backward()");
  if (!root.requires_grad) throw GraphError("loss does not depend on any tensor requiring grad");
  check_finite(root.values, "backward loss");

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{&root, 0}};
  visited.insert(&root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* p = node->parents[next++].get();
      if (p->requires_grad && !p->leaf && p->consumed) {
        throw GraphError("graph already consumed by a previous backward()");
      }
      if (p->requires_grad && visited.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  detail::grad_buffer(root)[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    if (node->leaf || !node->backward) continue;
    detail::grad_buffer(*node);
    node->backward(*node);
  }
  for (detail::Node* node : order) {
    if (node->leaf) continue;
    check_finite(node->grad, "backward");
    node->backward = nullptr;
    node->parents.clear();
    node->grad.clear();
    node->grad.shrink_to_fit();
    node->consumed = true;
  }
  for (detail::Node* node : order) {
    if (node->leaf) check_finite(node->grad, "leaf gradient");
  }
}

}  // namespace etl
