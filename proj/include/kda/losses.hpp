#pragma once

#include <span>
#include <vector>

#include "kda/gradcore.hpp"
#include "kda/model.hpp"

namespace kda {

// Diagonal Gaussian: mean and per-dimension variance, both [D].
struct GaussianStats {
    Tensor mu;
    Tensor var;

    // Constant stats; throws DomainError on negative variance.
    static GaussianStats from(std::vector<double> mu, std::vector<double> var);
    std::size_t dim() const { return mu.numel(); }
};

// Sample mean and population variance of the rows of samples[B x D].
GaussianStats estimate_gaussian(const Tensor& samples);

// 2-Wasserstein distance through the Bures trace form
//   ||mu1 - mu2||^2 + tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2),
// specialised to diagonal covariances. Not differentiable.
double w2_exact(const GaussianStats& a, const GaussianStats& b);

// (||mu1 - mu2||^2 + ||S1^1/2 - S2^1/2||_F^2)^1/2 with elementwise roots of
// the diagonal variances. Differentiable in both arguments.
Tensor w2_approx(const GaussianStats& a, const GaussianStats& b);

// w2_approx between the batch Gaussians of rho_av[B x D] and of the
// knowledge embeddings matched to each sample's label. Needs B >= 2.
Tensor align_loss(const Tensor& rho_av, const Tensor& rho_t_matched);

// Pairwise class margins m[i][j] = alpha * w2_approx(stats_i, stats_j) + beta.
struct MarginMatrix {
    std::size_t classes = 0;
    std::vector<double> m;  // row-major [classes x classes]
    double alpha = 1.0;
    double beta = 0.2;

    double at(std::size_t i, std::size_t j) const { return m[i * classes + j]; }
    // All-zero margins over `classes` classes.
    static MarginMatrix zeros(std::size_t classes);
    // Row m[labels[b]] for each sample: [B x classes].
    Tensor rows_for(std::span<const std::size_t> labels) const;
};

// One [K_i x D] tensor of embedded descriptions per class. Values are read
// detached; the result carries no gradient.
MarginMatrix compute_margins(std::span<const Tensor> class_knowledge_embedded, double alpha,
                             double beta);

// Mean margin cross-entropy where sample b's competitor k is shifted by
// m[y_b][k]. Labels index the classes of the margin matrix.
Tensor kaml_loss(const Tensor& logits, std::span<const std::size_t> labels,
                 const MarginMatrix& margins);

struct LossBreakdown {
    Tensor kaml;
    Tensor align;
    Tensor total;
    double lambda = 0.0;
};

// total = kaml + lambda * align, with logits from class_logits(rho_av, rho_t)
// and rho_t rows gathered by label for the alignment term. With lambda == 0
// the alignment term is evaluated for reporting only.
LossBreakdown kda_objective(const ForwardOutput& forward, std::span<const std::size_t> labels,
                            const MarginMatrix& margins, double lambda);

}  // namespace kda
