#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace etl {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {

// One vertex of the dynamic tape. Leaves have no backward function.
struct Node {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  bool leaf = true;
  bool consumed = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into parents.
  std::function<void(const Node&)> backward;
};

// Returns the parent's grad buffer, allocating zeros on first use.
std::span<double> grad_buffer(Node& node);

}  // namespace detail

/// Dense row-major float64 tensor with reverse-mode autodiff.
///
/// Tensor is a shared handle: copies alias the same storage and graph node,
/// like a framework tensor. Use clone() for an independent leaf copy.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t size() const;

  std::span<const double> values() const;
  // Mutable access is restricted to leaves; interior nodes are immutable.
  std::span<double> mutable_values();
  double item() const;

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool is_leaf() const;
  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  // New leaf with copied values, detached from any graph.
  Tensor clone() const;
  Tensor detach() const { return clone(); }

  /// Back-propagates from this scalar into every requires_grad leaf.
  /// Leaf gradients accumulate across calls until zero_grad().
  void backward() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  static Tensor from_node(std::shared_ptr<detail::Node> node);

 private:
  std::shared_ptr<detail::Node> node_;
};

// Throws NumericError naming `where` if any value is NaN/Inf.
void check_finite(std::span<const double> values, const char* where);

}  // namespace etl
