#include "kda/gradcore.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <sstream>
#include <unordered_set>

namespace kda {

namespace {

std::atomic<std::uint64_t> g_next_id{1};

std::shared_ptr<Node> new_node(Shape shape, std::vector<double> data) {
    if (shape_numel(shape) != data.size()) {
        throw ShapeError("tensor data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
    }
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(data);
    node->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
    return node;
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
    if (t.rank() != rank) {
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         " tensor, got " + shape_str(t.shape()));
    }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

// Gradient buffer of an input, or an empty span when it takes no gradient.
std::span<double> grad_of(const Tensor& t) {
    if (!t.requires_grad()) return {};
    Node& n = *t.node();
    if (n.grad.size() != n.value.size()) n.grad.assign(n.value.size(), 0.0);
    return n.grad;
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << ']';
    return os.str();
}

// ---- Tensor ----

Tensor::Tensor() = default;

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
    auto n = shape_numel(shape);
    return Tensor(new_node(std::move(shape), std::vector<double>(n, value)));
}

Tensor Tensor::from(Shape shape, std::vector<double> data) {
    return Tensor(new_node(std::move(shape), std::move(data)));
}

Tensor Tensor::scalar(double value) { return from({}, {value}); }

Tensor Tensor::parameter(Shape shape, std::vector<double> data) {
    auto node = new_node(std::move(shape), std::move(data));
    node->requires_grad = true;
    node->grad.assign(node->value.size(), 0.0);
    return Tensor(std::move(node));
}

Tensor Tensor::from_op(std::string op, Shape shape, std::vector<double> data,
                       std::vector<Tensor> inputs, BackwardFn backward) {
    auto node = new_node(std::move(shape), std::move(data));
    node->op = std::move(op);
    node->leaf = false;
    node->requires_grad = std::any_of(inputs.begin(), inputs.end(),
                                      [](const Tensor& t) { return t.requires_grad(); });
    if (node->requires_grad) {
        node->grad.assign(node->value.size(), 0.0);
        node->inputs = std::move(inputs);
        node->backward = std::move(backward);
    }
    return Tensor(std::move(node));
}

const Shape& Tensor::shape() const { return node_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= node_->shape.size()) {
        throw IndexError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_str(node_->shape));
    }
    return node_->shape[axis];
}

std::size_t Tensor::numel() const { return node_->value.size(); }

std::span<const double> Tensor::data() const { return node_->value; }
std::span<double> Tensor::mutable_data() { return node_->value; }

double Tensor::item() const {
    if (numel() != 1) {
        throw ContractError("item() on tensor of shape " + shape_str(shape()));
    }
    return node_->value[0];
}

double Tensor::at(std::size_t i) const {
    if (i >= numel()) throw IndexError("flat index " + std::to_string(i) + " out of range");
    return node_->value[i];
}

double Tensor::at(std::size_t row, std::size_t col) const {
    if (rank() != 2 || row >= shape()[0] || col >= shape()[1]) {
        throw IndexError("index (" + std::to_string(row) + "," + std::to_string(col) +
                         ") out of range for " + shape_str(shape()));
    }
    return node_->value[row * shape()[1] + col];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
bool Tensor::is_leaf() const { return node_->leaf; }
bool Tensor::has_grad() const { return !node_->grad.empty(); }
std::span<const double> Tensor::grad() const { return node_->grad; }
std::span<double> Tensor::mutable_grad() {
    if (node_->grad.size() != node_->value.size()) node_->grad.assign(node_->value.size(), 0.0);
    return node_->grad;
}

void Tensor::zero_grad() {
    std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

std::uint64_t Tensor::node_id() const { return node_->id; }
const std::string& Tensor::op() const { return node_->op; }

Tensor Tensor::detach() const { return from(shape(), node_->value); }

Tensor Tensor::clone() const {
    return node_->leaf && node_->requires_grad ? parameter(shape(), node_->value) : detach();
}

// ---- graph traversal ----

namespace {

// Non-leaf nodes reachable from root through grad-requiring edges,
// inputs before outputs.
std::vector<Node*> topo_order(const Tensor& root) {
    std::vector<Node*> order;
    if (!root.requires_grad() || root.is_leaf()) return order;
    std::unordered_set<Node*> visited;
    // (node, next input index) frames avoid recursion depth limits.
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    visited.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node* child = node->inputs[next++].node().get();
            if (child->requires_grad && !child->leaf && visited.insert(child).second) {
                stack.emplace_back(child, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    return order;
}

}  // namespace

Graph trace(const Tensor& root) {
    Graph g;
    for (Node* node : topo_order(root)) {
        OpRecord rec;
        rec.op = node->op;
        rec.output_id = node->id;
        for (const auto& in : node->inputs) rec.input_ids.push_back(in.node_id());
        g.ops.push_back(std::move(rec));
    }
    return g;
}

double min_relu_margin(const Tensor& root) {
    double best = std::numeric_limits<double>::infinity();
    for (Node* node : topo_order(root)) {
        if (node->op != "relu") continue;
        for (double v : node->inputs[0].data()) best = std::min(best, std::abs(v));
    }
    return best;
}

void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        throw ContractError("backward() requires a scalar loss, got shape " +
                            (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
    }
    if (!loss.requires_grad()) return;
    if (loss.is_leaf()) {
        loss.node()->grad[0] += 1.0;
        return;
    }
    auto order = topo_order(loss);
    for (Node* node : order) std::fill(node->grad.begin(), node->grad.end(), 0.0);
    loss.node()->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        // Non-owning handle; the node is kept alive by `loss`.
        Tensor out(std::shared_ptr<Node>(std::shared_ptr<Node>{}, node));
        node->backward(out, node->inputs);
    }
}

// ---- ops ----

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank(a, 2, "matmul");
    require_rank(b, 2, "matmul");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        throw ShapeError("matmul: inner dimensions disagree for " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    }
    std::vector<double> out(m * n, 0.0);
    auto A = a.data();
    auto B = b.data();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const double av = A[i * k + p];
            for (std::size_t j = 0; j < n; ++j) out[i * n + j] += av * B[p * n + j];
        }
    }
    return Tensor::from_op(
        "matmul", {m, n}, std::move(out), {a, b},
        [m, k, n](const Tensor& o, std::span<const Tensor> in) {
            auto G = o.grad();
            auto A = in[0].data();
            auto B = in[1].data();
            // dA = G·Bᵀ
            if (auto dA = grad_of(in[0]); !dA.empty()) {
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t p = 0; p < k; ++p) {
                        double acc = 0.0;
                        for (std::size_t j = 0; j < n; ++j) acc += G[i * n + j] * B[p * n + j];
                        dA[i * k + p] += acc;
                    }
            }
            // dB = Aᵀ·G
            if (auto dB = grad_of(in[1]); !dB.empty()) {
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t p = 0; p < k; ++p) {
                        const double av = A[i * k + p];
                        for (std::size_t j = 0; j < n; ++j) dB[p * n + j] += av * G[i * n + j];
                    }
            }
        });
}

Tensor transpose(const Tensor& a) {
    require_rank(a, 2, "transpose");
    const std::size_t r = a.dim(0), c = a.dim(1);
    std::vector<double> out(r * c);
    auto A = a.data();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = A[i * c + j];
    return Tensor::from_op("transpose", {c, r}, std::move(out), {a},
                           [r, c](const Tensor& o, std::span<const Tensor> in) {
                               auto G = o.grad();
                               auto dA = grad_of(in[0]);
                               for (std::size_t i = 0; i < r; ++i)
                                   for (std::size_t j = 0; j < c; ++j)
                                       dA[i * c + j] += G[j * r + i];
                           });
}

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    std::vector<double> out(a.numel());
    auto A = a.data(), B = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] + B[i];
    return Tensor::from_op("add", a.shape(), std::move(out), {a, b},
                           [](const Tensor& o, std::span<const Tensor> in) {
                               auto G = o.grad();
                               for (const auto& t : in) {
                                   auto d = grad_of(t);
                                   for (std::size_t i = 0; i < d.size(); ++i) d[i] += G[i];
                               }
                           });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    std::vector<double> out(a.numel());
    auto A = a.data(), B = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] - B[i];
    return Tensor::from_op("sub", a.shape(), std::move(out), {a, b},
                           [](const Tensor& o, std::span<const Tensor> in) {
                               auto G = o.grad();
                               auto dA = grad_of(in[0]);
                               for (std::size_t i = 0; i < dA.size(); ++i) dA[i] += G[i];
                               auto dB = grad_of(in[1]);
                               for (std::size_t i = 0; i < dB.size(); ++i) dB[i] -= G[i];
                           });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    std::vector<double> out(a.numel());
    auto A = a.data(), B = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] * B[i];
    return Tensor::from_op("mul", a.shape(), std::move(out), {a, b},
                           [](const Tensor& o, std::span<const Tensor> in) {
                               auto G = o.grad();
                               auto A = in[0].data(), B = in[1].data();
                               auto dA = grad_of(in[0]);
                               for (std::size_t i = 0; i < dA.size(); ++i) dA[i] += G[i] * B[i];
                               auto dB = grad_of(in[1]);
                               for (std::size_t i = 0; i < dB.size(); ++i) dB[i] += G[i] * A[i];
                           });
}

Tensor relu(const Tensor& a) {
    std::vector<double> out(a.numel());
    auto A = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] > 0.0 ? A[i] : 0.0;
    return Tensor::from_op("relu", a.shape(), std::move(out), {a},
                           [](const Tensor& o, std::span<const Tensor> in) {
                               auto G = o.grad();
                               auto A = in[0].data();
                               auto dA = grad_of(in[0]);
                               for (std::size_t i = 0; i < dA.size(); ++i)
                                   if (A[i] > 0.0) dA[i] += G[i];
                           });
}

Tensor sqrt(const Tensor& a) {
    std::vector<double> out(a.numel());
    auto A = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (A[i] < 0.0) {
            throw DomainError("sqrt of negative value " + std::to_string(A[i]) + " at index " +
                              std::to_string(i));
        }
        out[i] = std::sqrt(A[i]);
    }
    return Tensor::from_op("sqrt", a.shape(), std::move(out), {a},
                           [](const Tensor& o, std::span<const Tensor> in) {
                               auto G = o.grad();
                               auto A = in[0].data();
                               auto dA = grad_of(in[0]);
                               for (std::size_t i = 0; i < dA.size(); ++i)
                                   dA[i] += G[i] / (2.0 * std::sqrt(std::max(A[i], kSqrtGradFloor)));
                           });
}

Tensor square(const Tensor& a) {
    std::vector<double> out(a.numel());
    auto A = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] * A[i];
    return Tensor::from_op("square", a.shape(), std::move(out), {a},
                           [](const Tensor& o, std::span<const Tensor> in) {
                               auto G = o.grad();
                               auto A = in[0].data();
                               auto dA = grad_of(in[0]);
                               for (std::size_t i = 0; i < dA.size(); ++i) dA[i] += 2.0 * A[i] * G[i];
                           });
}

Tensor scale(const Tensor& a, double factor) {
    std::vector<double> out(a.numel());
    auto A = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] * factor;
    return Tensor::from_op("scale", a.shape(), std::move(out), {a},
                           [factor](const Tensor& o, std::span<const Tensor> in) {
                               auto G = o.grad();
                               auto dA = grad_of(in[0]);
                               for (std::size_t i = 0; i < dA.size(); ++i) dA[i] += factor * G[i];
                           });
}

Tensor elementwise(Elementwise kind, const Tensor& a, const Tensor* b, double factor) {
    auto rhs = [&]() -> const Tensor& {
        if (!b) throw ContractError("elementwise: binary op needs a second operand");
        return *b;
    };
    switch (kind) {
        case Elementwise::add: return add(a, rhs());
        case Elementwise::sub: return sub(a, rhs());
        case Elementwise::mul: return mul(a, rhs());
        case Elementwise::relu: return relu(a);
        case Elementwise::sqrt: return sqrt(a);
        case Elementwise::square: return square(a);
        case Elementwise::scale: return scale(a, factor);
    }
    throw ContractError("elementwise: unknown op kind");
}

Tensor sum(const Tensor& a) {
    double total = 0.0;
    for (double v : a.data()) total += v;
    return Tensor::from_op("sum", {}, {total}, {a},
                           [](const Tensor& o, std::span<const Tensor> in) {
                               const double g = o.grad()[0];
                               for (auto& d : grad_of(in[0])) d += g;
                           });
}

Tensor mean(const Tensor& a) {
    if (a.numel() == 0) throw DomainError("mean of empty tensor");
    return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
    require_rank(x, 2, "add_bias");
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    if (bias.numel() != cols) {
        throw ShapeError("add_bias: bias " + shape_str(bias.shape()) + " does not fit " +
                         shape_str(x.shape()));
    }
    std::vector<double> out(x.data().begin(), x.data().end());
    auto Bv = bias.data();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += Bv[c];
    return Tensor::from_op("add_bias", x.shape(), std::move(out), {x, bias},
                           [rows, cols](const Tensor& o, std::span<const Tensor> in) {
                               auto G = o.grad();
                               auto dX = grad_of(in[0]);
                               for (std::size_t i = 0; i < dX.size(); ++i) dX[i] += G[i];
                               auto dB = grad_of(in[1]);
                               if (!dB.empty())
                                   for (std::size_t r = 0; r < rows; ++r)
                                       for (std::size_t c = 0; c < cols; ++c) dB[c] += G[r * cols + c];
                           });
}

Tensor row_sum(const Tensor& x) {
    require_rank(x, 2, "row_sum");
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    std::vector<double> out(rows, 0.0);
    auto X = x.data();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) out[r] += X[r * cols + c];
    return Tensor::from_op("row_sum", {rows, 1}, std::move(out), {x},
                           [rows, cols](const Tensor& o, std::span<const Tensor> in) {
                               auto G = o.grad();
                               auto dX = grad_of(in[0]);
                               for (std::size_t r = 0; r < rows; ++r)
                                   for (std::size_t c = 0; c < cols; ++c) dX[r * cols + c] += G[r];
                           });
}

Tensor scale_rows(const Tensor& x, const Tensor& w) {
    require_rank(x, 2, "scale_rows");
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    if (w.numel() != rows || w.rank() > 2 || (w.rank() == 2 && w.dim(1) != 1)) {
        throw ShapeError("scale_rows: weights " + shape_str(w.shape()) + " do not fit " +
                         shape_str(x.shape()));
    }
    std::vector<double> out(x.numel());
    auto X = x.data(), W = w.data();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = X[r * cols + c] * W[r];
    return Tensor::from_op("scale_rows", x.shape(), std::move(out), {x, w},
                           [rows, cols](const Tensor& o, std::span<const Tensor> in) {
                               auto G = o.grad();
                               auto X = in[0].data(), W = in[1].data();
                               auto dX = grad_of(in[0]);
                               if (!dX.empty())
                                   for (std::size_t r = 0; r < rows; ++r)
                                       for (std::size_t c = 0; c < cols; ++c)
                                           dX[r * cols + c] += G[r * cols + c] * W[r];
                               auto dW = grad_of(in[1]);
                               if (!dW.empty())
                                   for (std::size_t r = 0; r < rows; ++r)
                                       for (std::size_t c = 0; c < cols; ++c)
                                           dW[r] += G[r * cols + c] * X[r * cols + c];
                           });
}

Tensor softmax_rows(const Tensor& x) {
    require_rank(x, 2, "softmax_rows");
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    std::vector<double> out(x.numel());
    auto X = x.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = X.data() + r * cols;
        const double mx = *std::max_element(row, row + cols);
        double z = 0.0;
        for (std::size_t c = 0; c < cols; ++c) z += (out[r * cols + c] = std::exp(row[c] - mx));
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] /= z;
    }
    return Tensor::from_op("softmax_rows", x.shape(), std::move(out), {x},
                           [rows, cols](const Tensor& o, std::span<const Tensor> in) {
                               auto G = o.grad();
                               auto P = o.data();
                               auto dX = grad_of(in[0]);
                               for (std::size_t r = 0; r < rows; ++r) {
                                   double dot = 0.0;
                                   for (std::size_t c = 0; c < cols; ++c)
                                       dot += G[r * cols + c] * P[r * cols + c];
                                   for (std::size_t c = 0; c < cols; ++c)
                                       dX[r * cols + c] += P[r * cols + c] * (G[r * cols + c] - dot);
                               }
                           });
}

Tensor column(const Tensor& x, std::size_t col) {
    require_rank(x, 2, "column");
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    if (col >= cols) throw IndexError("column " + std::to_string(col) + " out of range for " +
                                      shape_str(x.shape()));
    std::vector<double> out(rows);
    for (std::size_t r = 0; r < rows; ++r) out[r] = x.data()[r * cols + col];
    return Tensor::from_op("column", {rows, 1}, std::move(out), {x},
                           [rows, cols, col](const Tensor& o, std::span<const Tensor> in) {
                               auto G = o.grad();
                               auto dX = grad_of(in[0]);
                               for (std::size_t r = 0; r < rows; ++r) dX[r * cols + col] += G[r];
                           });
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
    require_rank(a, 2, "concat_cols");
    require_rank(b, 2, "concat_cols");
    if (a.dim(0) != b.dim(0)) {
        throw ShapeError("concat_cols: row counts differ " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
    const std::size_t rows = a.dim(0), ca = a.dim(1), cb = b.dim(1), cw = ca + cb;
    std::vector<double> out(rows * cw);
    auto A = a.data(), B = b.data();
    for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(A.data() + r * ca, ca, out.data() + r * cw);
        std::copy_n(B.data() + r * cb, cb, out.data() + r * cw + ca);
    }
    return Tensor::from_op("concat_cols", {rows, cw}, std::move(out), {a, b},
                           [rows, ca, cb, cw](const Tensor& o, std::span<const Tensor> in) {
                               auto G = o.grad();
                               auto dA = grad_of(in[0]);
                               auto dB = grad_of(in[1]);
                               for (std::size_t r = 0; r < rows; ++r) {
                                   if (!dA.empty())
                                       for (std::size_t c = 0; c < ca; ++c) dA[r * ca + c] += G[r * cw + c];
                                   if (!dB.empty())
                                       for (std::size_t c = 0; c < cb; ++c)
                                           dB[r * cb + c] += G[r * cw + ca + c];
                               }
                           });
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
    require_rank(x, 2, "gather_rows");
    const std::size_t n = x.dim(0), cols = x.dim(1);
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    std::vector<double> out(idx.size() * cols);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= n) {
            throw IndexError("gather_rows: row " + std::to_string(idx[i]) + " out of range for " +
                             shape_str(x.shape()));
        }
        std::copy_n(x.data().data() + idx[i] * cols, cols, out.data() + i * cols);
    }
    const std::size_t out_rows = idx.size();
    return Tensor::from_op("gather_rows", {out_rows, cols}, std::move(out), {x},
                           [idx = std::move(idx), cols](const Tensor& o, std::span<const Tensor> in) {
                               auto G = o.grad();
                               auto dX = grad_of(in[0]);
                               for (std::size_t i = 0; i < idx.size(); ++i)
                                   for (std::size_t c = 0; c < cols; ++c)
                                       dX[idx[i] * cols + c] += G[i * cols + c];
                           });
}

Tensor segment_mean_rows(const Tensor& x, std::span<const std::size_t> counts) {
    require_rank(x, 2, "segment_mean_rows");
    const std::size_t cols = x.dim(1);
    std::vector<std::size_t> cnt(counts.begin(), counts.end());
    std::size_t total = 0;
    for (auto c : cnt) {
        if (c == 0) throw DomainError("segment_mean_rows: empty segment");
        total += c;
    }
    if (total != x.dim(0)) {
        throw ShapeError("segment_mean_rows: counts sum to " + std::to_string(total) + " but x is " +
                         shape_str(x.shape()));
    }
    std::vector<double> out(cnt.size() * cols, 0.0);
    auto X = x.data();
    std::size_t row = 0;
    for (std::size_t s = 0; s < cnt.size(); ++s) {
        for (std::size_t k = 0; k < cnt[s]; ++k, ++row)
            for (std::size_t c = 0; c < cols; ++c) out[s * cols + c] += X[row * cols + c];
        for (std::size_t c = 0; c < cols; ++c) out[s * cols + c] /= static_cast<double>(cnt[s]);
    }
    const std::size_t segs = cnt.size();
    return Tensor::from_op("segment_mean_rows", {segs, cols}, std::move(out), {x},
                           [cnt = std::move(cnt), cols](const Tensor& o, std::span<const Tensor> in) {
                               auto G = o.grad();
                               auto dX = grad_of(in[0]);
                               std::size_t row = 0;
                               for (std::size_t s = 0; s < cnt.size(); ++s) {
                                   const double inv = 1.0 / static_cast<double>(cnt[s]);
                                   for (std::size_t k = 0; k < cnt[s]; ++k, ++row)
                                       for (std::size_t c = 0; c < cols; ++c)
                                           dX[row * cols + c] += G[s * cols + c] * inv;
                               }
                           });
}

Tensor dropout(const Tensor& x, double p, std::mt19937_64& rng) {
    if (!(p >= 0.0 && p < 1.0)) throw DomainError("dropout probability must be in [0,1)");
    if (p == 0.0) return x;
    std::bernoulli_distribution keep(1.0 - p);
    const double s = 1.0 / (1.0 - p);
    std::vector<double> mask(x.numel());
    for (auto& m : mask) m = keep(rng) ? s : 0.0;
    return mul(x, Tensor::from(x.shape(), std::move(mask)));
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const std::size_t> labels,
                             const Tensor* margins) {
    if (logits.rank() != 1 && logits.rank() != 2) {
        throw ShapeError("softmax_cross_entropy: logits must be [C] or [BxC], got " +
                         shape_str(logits.shape()));
    }
    const std::size_t rows = logits.rank() == 1 ? 1 : logits.dim(0);
    const std::size_t classes = logits.rank() == 1 ? logits.dim(0) : logits.dim(1);
    if (labels.size() != rows) {
        throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                         " labels for " + std::to_string(rows) + " rows");
    }
    if (rows == 0 || classes == 0) throw DomainError("softmax_cross_entropy: empty logits");
    if (margins && margins->shape() != logits.shape()) {
        throw ShapeError("softmax_cross_entropy: margins " + shape_str(margins->shape()) +
                         " vs logits " + shape_str(logits.shape()));
    }
    for (auto y : labels) {
        if (y >= classes) {
            throw IndexError("softmax_cross_entropy: label " + std::to_string(y) +
                             " out of range for " + std::to_string(classes) + " classes");
        }
    }
    std::vector<std::size_t> ys(labels.begin(), labels.end());
    auto S = logits.data();
    // Shifted logits z_k = s_k + m_k (k != y), z_y = s_y, stored as softmax(z).
    std::vector<double> probs(rows * classes);
    double total = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        const double* s = S.data() + r * classes;
        double* z = probs.data() + r * classes;
        for (std::size_t k = 0; k < classes; ++k) {
            z[k] = s[k];
            if (margins && k != ys[r]) z[k] += margins->data()[r * classes + k];
        }
        const double mx = *std::max_element(z, z + classes);
        double part = 0.0;
        for (std::size_t k = 0; k < classes; ++k) part += std::exp(z[k] - mx);
        const double lse = mx + std::log(part);
        total += lse - s[ys[r]];
        for (std::size_t k = 0; k < classes; ++k) z[k] = std::exp(z[k] - lse);
    }
    const double loss = total / static_cast<double>(rows);
    return Tensor::from_op(
        "softmax_cross_entropy", {}, {loss}, {logits},
        [rows, classes, ys = std::move(ys), probs = std::move(probs)](const Tensor& o,
                                                                      std::span<const Tensor> in) {
            const double g = o.grad()[0] / static_cast<double>(rows);
            auto dS = grad_of(in[0]);
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t k = 0; k < classes; ++k) {
                    double d = probs[r * classes + k];
                    if (k == ys[r]) d -= 1.0;
                    dS[r * classes + k] += g * d;
                }
            }
        });
}

Tensor softmax_cross_entropy(const Tensor& logits, std::size_t label, const Tensor* margins) {
    const std::size_t labels[1] = {label};
    return softmax_cross_entropy(logits, std::span<const std::size_t>(labels, 1), margins);
}

BatchStats reduce_stats(const Tensor& x) {
    require_rank(x, 2, "reduce_stats");
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    if (rows == 0) throw DomainError("reduce_stats: empty batch");
    const double inv = 1.0 / static_cast<double>(rows);
    auto X = x.data();
    // Accumulate offsets from the first row so a constant batch yields that
    // row exactly.
    std::vector<double> mu(cols, 0.0);
    for (std::size_t c = 0; c < cols; ++c) {
        double acc = 0.0;
        for (std::size_t r = 0; r < rows; ++r) acc += X[r * cols + c] - X[c];
        mu[c] = X[c] + acc * inv;
    }
    std::vector<double> var(cols, 0.0);
    for (std::size_t c = 0; c < cols; ++c) {
        double acc = 0.0;
        for (std::size_t r = 0; r < rows; ++r) {
            const double d = X[r * cols + c] - mu[c];
            acc += d * d;
        }
        var[c] = acc * inv;
    }
    Tensor mean_t = Tensor::from_op("batch_mean", {cols}, mu, {x},
                                    [rows, cols, inv](const Tensor& o, std::span<const Tensor> in) {
                                        auto G = o.grad();
                                        auto dX = grad_of(in[0]);
                                        for (std::size_t r = 0; r < rows; ++r)
                                            for (std::size_t c = 0; c < cols; ++c)
                                                dX[r * cols + c] += G[c] * inv;
                                    });
    Tensor var_t = Tensor::from_op(
        "batch_var", {cols}, std::move(var), {x},
        [rows, cols, inv, mu = std::move(mu)](const Tensor& o, std::span<const Tensor> in) {
            auto G = o.grad();
            auto X = in[0].data();
            auto dX = grad_of(in[0]);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c)
                    dX[r * cols + c] += G[c] * 2.0 * (X[r * cols + c] - mu[c]) * inv;
        });
    return {std::move(mean_t), std::move(var_t)};
}

// ---- finite differences ----

GradCheckReport finite_difference_check(const std::function<Tensor()>& f,
                                        std::span<const std::pair<std::string, Tensor>> params,
                                        const GradCheckOptions& options) {
    if (!(options.step > 0.0)) throw DomainError("finite_difference_check: step must be > 0");
    GradCheckReport report;
    report.step = options.step;

    auto fail = [&report](std::string why) {
        if (report.pass) report.failure = std::move(why);
        report.pass = false;
    };

    std::vector<Tensor> ps;
    for (const auto& [name, t] : params) ps.push_back(t);
    for (auto& p : ps) p.zero_grad();

    Tensor loss = f();
    if (!std::isfinite(loss.item())) {
        fail("non-finite loss at the base point");
        return report;
    }
    backward(loss);
    std::vector<std::vector<double>> analytic;
    for (auto& p : ps) {
        analytic.emplace_back(p.numel(), 0.0);
        if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), analytic.back().begin());
        p.zero_grad();
    }

    const double h = options.step;
    for (std::size_t pi = 0; pi < ps.size(); ++pi) {
        ParamCheck pc;
        pc.name = params[pi].first;
        auto data = ps[pi].mutable_data();
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double orig = data[i];
            data[i] = orig + h;
            const double fp = f().item();
            data[i] = orig - h;
            const double fm = f().item();
            data[i] = orig;
            const std::string where = pc.name + "[" + std::to_string(i) + "]";
            if (!std::isfinite(fp) || !std::isfinite(fm)) {
                fail("non-finite function value while probing " + where);
                continue;
            }
            const double numeric = (fp - fm) / (2.0 * h);
            const double a = analytic[pi][i];
            const double abs_err = std::abs(a - numeric);
            const double denom = std::max(std::abs(a), std::abs(numeric));
            const double rel_err = denom > 0.0 ? abs_err / denom : 0.0;
            pc.max_abs_err = std::max(pc.max_abs_err, abs_err);
            if (abs_err <= options.abs_floor) continue;
            pc.max_rel_err = std::max(pc.max_rel_err, rel_err);
            if (!(rel_err < options.rel_tol)) {
                fail(where + ": analytic " + std::to_string(a) + " vs numeric " +
                     std::to_string(numeric) + " (rel err " + std::to_string(rel_err) + ")");
            }
        }
        report.params.push_back(std::move(pc));
    }
    return report;
}

}  // namespace kda
