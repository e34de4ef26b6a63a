#include "kivi/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace kivi {

namespace {

thread_local bool t_check_finite = true;

std::shared_ptr<detail::Node> make_node(Shape shape, std::vector<double> values, bool requires_grad) {
    if (shape_size(shape) != values.size()) {
        throw ShapeError("tensor: shape " + shape_string(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->values = std::move(values);
    node->requires_grad = requires_grad;
    node->op = requires_grad ? "parameter" : "constant";
    return node;
}

}  // namespace

std::string shape_string(const Shape& shape) {
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out << ", ";
        out << shape[i];
    }
    out << ']';
    return out.str();
}

std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Tensor::Tensor() : node_(make_node({}, {0.0}, false)) {}

Tensor Tensor::constant(Shape shape, std::vector<double> values) {
    return Tensor(make_node(std::move(shape), std::move(values), false));
}

Tensor Tensor::scalar(double value) { return constant({}, {value}); }

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
    const auto n = shape_size(shape);
    return constant(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::vector(std::vector<double> values) {
    const auto n = values.size();
    return constant({n}, std::move(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
    return constant({rows, cols}, std::move(values));
}

Tensor Tensor::parameter(Shape shape, std::vector<double> values) {
    return Tensor(make_node(std::move(shape), std::move(values), true));
}

const Shape& Tensor::shape() const noexcept { return node_->shape; }

std::size_t Tensor::size() const noexcept { return node_->values.size(); }

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= rank()) {
        throw ShapeError("tensor: axis " + std::to_string(axis) + " out of range for shape " +
                         shape_string(shape()));
    }
    return node_->shape[axis];
}

std::span<const double> Tensor::values() const noexcept { return node_->values; }

std::vector<double> Tensor::to_vector() const { return node_->values; }

double Tensor::item() const {
    if (size() != 1) throw ShapeError("tensor: item() on shape " + shape_string(shape()));
    return node_->values[0];
}

double Tensor::operator[](std::size_t flat_index) const { return node_->values.at(flat_index); }

double Tensor::at(std::size_t row, std::size_t col) const {
    if (rank() != 2) throw ShapeError("tensor: at(row, col) needs a matrix, got " + shape_string(shape()));
    return node_->values.at(row * node_->shape[1] + col);
}

bool Tensor::requires_grad() const noexcept { return node_->requires_grad; }

bool Tensor::is_leaf() const noexcept { return node_->parents.empty(); }

std::span<double> Tensor::mutable_values() {
    if (!is_leaf()) throw std::logic_error(std::string("tensor: cannot mutate result of ") + node_->op);
    return node_->values;
}

Tensor Tensor::detach() const { return constant(node_->shape, node_->values); }

Tensor Tensor::from_op(const char* op, Shape shape, std::vector<double> values, std::vector<Tensor> parents,
                       detail::BackwardFn backward) {
    if (t_check_finite) {
        for (double v : values) {
            if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + op);
        }
    }
    const bool needs_grad =
        std::any_of(parents.begin(), parents.end(), [](const Tensor& p) { return p.requires_grad(); });
    auto node = make_node(std::move(shape), std::move(values), needs_grad);
    node->op = op;
    if (needs_grad) {
        node->parents.reserve(parents.size());
        for (auto& p : parents) node->parents.push_back(p.node_);
        node->backward = std::move(backward);
    }
    return Tensor(std::move(node));
}

Tape Tape::record(const Tensor& root) {
    Tape tape;
    if (!root.requires_grad()) return tape;
    // Iterative post-order DFS; parents are explored in declaration order so
    // the resulting order is deterministic.
    std::unordered_set<const detail::Node*> seen;
    std::vector<std::pair<const detail::Node*, std::size_t>> stack;
    stack.emplace_back(root.node(), 0);
    seen.insert(root.node());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            const detail::Node* parent = node->parents[next++].get();
            if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
        } else {
            tape.order_.push_back(node);
            stack.pop_back();
        }
    }
    return tape;
}

bool Gradients::contains(const Tensor& t) const { return grads_.count(t.node()) != 0; }

Tensor Gradients::operator[](const Tensor& t) const {
    auto it = grads_.find(t.node());
    if (it == grads_.end()) return Tensor::zeros(t.shape());
    return Tensor::constant(t.shape(), it->second);
}

std::span<const double> Gradients::values(const Tensor& t) const {
    auto it = grads_.find(t.node());
    if (it == grads_.end()) throw std::out_of_range("gradients: tensor not reached by backward pass");
    return it->second;
}

void Gradients::set(const detail::Node* node, std::vector<double> grad) { grads_[node] = std::move(grad); }

namespace {

class BufferSink final : public detail::GradSink {
public:
    BufferSink(const detail::Node& node,
               std::unordered_map<const detail::Node*, std::vector<double>>& buffers)
        : node_(node), buffers_(buffers) {}

    std::span<double> parent_grad(std::size_t parent_index) override {
        const detail::Node* parent = node_.parents.at(parent_index).get();
        if (!parent->requires_grad) return {};
        auto& buf = buffers_[parent];
        if (buf.empty()) buf.assign(parent->values.size(), 0.0);
        return buf;
    }

private:
    const detail::Node& node_;
    std::unordered_map<const detail::Node*, std::vector<double>>& buffers_;
};

}  // namespace

Gradients backward(const Tensor& root, std::span<const Tensor> keep) {
    if (root.size() != 1) throw ShapeError("backward: root must be scalar, got " + shape_string(root.shape()));
    Gradients result;
    const Tape tape = Tape::record(root);
    if (tape.size() == 0) return result;

    std::unordered_set<const detail::Node*> kept;
    for (const auto& t : keep) kept.insert(t.node());

    std::unordered_map<const detail::Node*, std::vector<double>> buffers;
    buffers[root.node()] = {1.0};
    const auto& order = tape.nodes();
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        const detail::Node* node = *it;
        auto found = buffers.find(node);
        if (found == buffers.end()) continue;
        std::vector<double> grad = std::move(found->second);
        buffers.erase(found);
        if (!node->parents.empty()) {
            BufferSink sink(*node, buffers);
            node->backward(*node, grad, sink);
        }
        if (node->parents.empty() || kept.count(node)) result.set(node, std::move(grad));
    }
    return result;
}

FiniteCheckSuspend::FiniteCheckSuspend() : previous_(t_check_finite) { t_check_finite = false; }

FiniteCheckSuspend::~FiniteCheckSuspend() { t_check_finite = previous_; }

bool finite_checks_enabled() noexcept { return t_check_finite; }

}  // namespace kivi
