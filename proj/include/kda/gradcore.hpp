#pragma once

// Dense float64 tensors with tape-free reverse-mode differentiation.
//
// Every op result keeps shared ownership of its inputs plus a backward
// closure, so the graph lives exactly as long as the tensors that reference
// it. backward() orders the reachable nodes topologically and runs each
// recorded op once, in reverse.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "kda/errors.hpp"

namespace kda {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct Node;

class Tensor {
public:
    // Receives the gradient of the op output and must accumulate into the
    // gradient buffers of `inputs` (only those with requires_grad()).
    using BackwardFn = std::function<void(const Tensor& out, std::span<const Tensor> inputs)>;

    Tensor();

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double value);
    static Tensor from(Shape shape, std::vector<double> data);
    static Tensor scalar(double value);
    // Leaf with a gradient buffer; the only tensors that optimizers update.
    static Tensor parameter(Shape shape, std::vector<double> data);

    // Records a custom op. Tests use this to build deliberately broken rules.
    static Tensor from_op(std::string op, Shape shape, std::vector<double> data,
                          std::vector<Tensor> inputs, BackwardFn backward);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const;

    std::span<const double> data() const;
    // Mutating values in place bypasses the graph; used by optimizers and
    // the finite-difference probe.
    std::span<double> mutable_data();

    double item() const;
    double at(std::size_t i) const;
    double at(std::size_t row, std::size_t col) const;

    bool requires_grad() const;
    bool is_leaf() const;
    bool has_grad() const;
    std::span<const double> grad() const;
    std::span<double> mutable_grad();
    void zero_grad();

    std::uint64_t node_id() const;
    const std::string& op() const;

    // Same values, no history.
    Tensor detach() const;
    // Deep copy of values as a new leaf (parameter if this one is).
    Tensor clone() const;

    explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}
    const std::shared_ptr<Node>& node() const { return node_; }

private:
    std::shared_ptr<Node> node_;
};

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    bool leaf = true;
    std::string op = "leaf";
    std::vector<Tensor> inputs;
    Tensor::BackwardFn backward;
    std::uint64_t id = 0;
};

// One recorded operation, as seen by backward().
struct OpRecord {
    std::string op;
    std::vector<std::uint64_t> input_ids;
    std::uint64_t output_id = 0;
};

// Recorded ops reachable from a root, inputs before outputs.
struct Graph {
    std::vector<OpRecord> ops;
};

Graph trace(const Tensor& root);

// Smallest |x| over the inputs of every relu reachable from root (+inf if
// none). Central differences with step h are only valid when this exceeds h.
double min_relu_margin(const Tensor& root);

// Accumulates d(loss)/d(leaf) into every reachable leaf that requires grad.
void backward(const Tensor& loss);

// ---- ops ----

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

enum class Elementwise { add, sub, mul, relu, sqrt, square, scale };

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor relu(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor square(const Tensor& a);
Tensor scale(const Tensor& a, double factor);
// Dispatch form for the unary/binary kinds above; `factor` only for scale.
Tensor elementwise(Elementwise kind, const Tensor& a, const Tensor* b = nullptr,
                   double factor = 1.0);

// Lower bound used in place of x inside the derivative 1/(2*sqrt(x)).
inline constexpr double kSqrtGradFloor = 1e-12;

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// x[B×N] + bias[N] on every row.
Tensor add_bias(const Tensor& x, const Tensor& bias);
// [B×N] -> [B×1]
Tensor row_sum(const Tensor& x);
// x[B×N] with row b multiplied by w[b]; w is [B×1] or [B].
Tensor scale_rows(const Tensor& x, const Tensor& w);
Tensor softmax_rows(const Tensor& x);
// [B×C] -> [B×1]
Tensor column(const Tensor& x, std::size_t col);
Tensor concat_cols(const Tensor& a, const Tensor& b);
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows);
// Mean over consecutive row groups of the given sizes: [sum(counts)×D] -> [C×D].
Tensor segment_mean_rows(const Tensor& x, std::span<const std::size_t> counts);

// Multiplies by a fixed 0/1 mask scaled by 1/(1-p). Identity when p == 0.
Tensor dropout(const Tensor& x, double p, std::mt19937_64& rng);

// Mean over rows of -log(e^{s_y} / (e^{s_y} + sum_{k != y} e^{s_k + m_k})).
// `logits` is [C] (one sample) or [B×C]; `margins` has the same shape and its
// entry at the label position is ignored. Without margins this is plain
// softmax cross-entropy. Margins are treated as constants.
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const std::size_t> labels,
                             const Tensor* margins = nullptr);
Tensor softmax_cross_entropy(const Tensor& logits, std::size_t label,
                             const Tensor* margins = nullptr);

struct BatchStats {
    Tensor mean;
    Tensor var;
};

// Per-column mean and population variance (divide by B) of x[B×D].
BatchStats reduce_stats(const Tensor& x);

// ---- finite-difference checking ----

struct ParamCheck {
    std::string name;
    double max_rel_err = 0.0;
    double max_abs_err = 0.0;
};

struct GradCheckOptions {
    double step = 1e-5;
    double rel_tol = 1e-4;
    // Entries whose absolute error is at or below this pass regardless of
    // the relative error.
    double abs_floor = 1e-7;
};

struct GradCheckReport {
    std::vector<ParamCheck> params;
    bool pass = true;
    double step = 0.0;
    // Set when an entry fails or the probed function goes non-finite.
    std::string failure;
};

// Compares backward() gradients of f() against central differences
// (f(p+h) - f(p-h)) / 2h for every entry of every named parameter.
// Parameter grads are zeroed before and after.
GradCheckReport finite_difference_check(const std::function<Tensor()>& f,
                                        std::span<const std::pair<std::string, Tensor>> params,
                                        const GradCheckOptions& options = {});

}  // namespace kda
