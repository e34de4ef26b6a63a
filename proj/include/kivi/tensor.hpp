#pragma once

// Reverse-mode automatic differentiation over dense row-major float64 tensors.
//
// Every Tensor owns (shared) a graph node. Constants and detached values are
// parentless nodes that do not require gradients; operations on them produce
// constants again, so no graph is recorded unless a parameter is involved.
// The graph is rebuilt on every forward pass and walked once by backward().

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace kivi {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);
std::size_t shape_size(const Shape& shape);

struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct DomainError : std::domain_error {
    using std::domain_error::domain_error;
};

/// Raised when an operation on finite inputs produced NaN or Inf.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

namespace detail {

struct Node;

/// Handed to backward closures; yields the gradient buffer of a parent, or an
/// empty span when that parent does not require gradients.
class GradSink {
public:
    virtual ~GradSink() = default;
    virtual std::span<double> parent_grad(std::size_t parent_index) = 0;
};

using BackwardFn = std::function<void(const Node& self, std::span<const double> grad, GradSink& sink)>;

struct Node {
    Shape shape;
    std::vector<double> values;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    BackwardFn backward;
    const char* op = "constant";
};

}  // namespace detail

class Tensor {
public:
    /// Scalar constant zero.
    Tensor();

    static Tensor constant(Shape shape, std::vector<double> values);
    static Tensor scalar(double value);
    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double value);
    static Tensor vector(std::vector<double> values);
    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values);

    /// Leaf tensor that receives gradients. Its values may be updated in place
    /// between forward passes (by an optimizer).
    static Tensor parameter(Shape shape, std::vector<double> values);

    const Shape& shape() const noexcept;
    std::size_t rank() const noexcept { return shape().size(); }
    std::size_t size() const noexcept;
    std::size_t dim(std::size_t axis) const;

    std::span<const double> values() const noexcept;
    std::vector<double> to_vector() const;
    double item() const;
    double operator[](std::size_t flat_index) const;
    double at(std::size_t row, std::size_t col) const;

    bool requires_grad() const noexcept;
    bool is_leaf() const noexcept;

    /// Writable view of a leaf's values. Throws for operation results.
    std::span<double> mutable_values();

    /// Same values, no graph identity.
    Tensor detach() const;

    const detail::Node* node() const noexcept { return node_.get(); }
    const std::shared_ptr<detail::Node>& node_ptr() const noexcept { return node_; }

    /// Builds an operation result. When no parent requires gradients the
    /// result is a plain constant and `backward` is dropped.
    static Tensor from_op(const char* op, Shape shape, std::vector<double> values,
                          std::vector<Tensor> parents, detail::BackwardFn backward);

private:
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
    std::shared_ptr<detail::Node> node_;
};

/// Ordered record of the operations reachable from a root. Parents always
/// precede their children.
class Tape {
public:
    static Tape record(const Tensor& root);

    const std::vector<const detail::Node*>& nodes() const noexcept { return order_; }
    std::size_t size() const noexcept { return order_.size(); }

private:
    std::vector<const detail::Node*> order_;
};

/// Gradient map keyed by graph identity.
class Gradients {
public:
    bool contains(const Tensor& t) const;
    /// Gradient of the root w.r.t. `t`; zeros when `t` was unreachable.
    Tensor operator[](const Tensor& t) const;
    std::span<const double> values(const Tensor& t) const;

    void set(const detail::Node* node, std::vector<double> grad);

private:
    std::unordered_map<const detail::Node*, std::vector<double>> grads_;
};

/// Reverse accumulation from a scalar root. Gradients are kept for every leaf
/// and for each tensor listed in `keep`.
Gradients backward(const Tensor& root, std::span<const Tensor> keep = {});

/// Disables the NaN/Inf check on operation results for the current thread
/// while alive.
class FiniteCheckSuspend {
public:
    FiniteCheckSuspend();
    ~FiniteCheckSuspend();
    FiniteCheckSuspend(const FiniteCheckSuspend&) = delete;
    FiniteCheckSuspend& operator=(const FiniteCheckSuspend&) = delete;

private:
    bool previous_;
};

bool finite_checks_enabled() noexcept;

}  // namespace kivi
