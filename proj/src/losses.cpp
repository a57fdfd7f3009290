#include "kda/losses.hpp"

#include <cmath>

namespace kda {

GaussianStats GaussianStats::from(std::vector<double> mu, std::vector<double> var) {
    if (mu.size() != var.size()) {
        throw ShapeError("GaussianStats: mean has " + std::to_string(mu.size()) + " dims, variance " +
                         std::to_string(var.size()));
    }
    for (double v : var)
        if (!(v >= 0.0)) throw DomainError("GaussianStats: variance entries must be >= 0");
    const std::size_t d = mu.size();
    return {Tensor::from({d}, std::move(mu)), Tensor::from({d}, std::move(var))};
}

GaussianStats estimate_gaussian(const Tensor& samples) {
    auto s = reduce_stats(samples);
    return {std::move(s.mean), std::move(s.var)};
}

namespace {

void require_same_dim(const GaussianStats& a, const GaussianStats& b, const char* op) {
    if (a.mu.shape() != b.mu.shape() || a.var.shape() != a.mu.shape() || b.var.shape() != b.mu.shape()) {
        throw ShapeError(std::string(op) + ": dimension mismatch " + shape_str(a.mu.shape()) + " vs " +
                         shape_str(b.mu.shape()));
    }
}

}  // namespace

double w2_exact(const GaussianStats& a, const GaussianStats& b) {
    require_same_dim(a, b, "w2_exact");
    auto mu1 = a.mu.data(), mu2 = b.mu.data(), v1 = a.var.data(), v2 = b.var.data();
    double mean_term = 0.0;
    double trace_term = 0.0;
    for (std::size_t d = 0; d < mu1.size(); ++d) {
        const double dm = mu1[d] - mu2[d];
        mean_term += dm * dm;
        // (S1^1/2 S2 S1^1/2)^1/2 is diag(sqrt(v1 v2)) when both are diagonal.
        const double cross = std::sqrt(v1[d] * v2[d]);
        trace_term += std::max(0.0, v1[d] + v2[d] - 2.0 * cross);
    }
    return std::sqrt(mean_term + trace_term);
}

Tensor w2_approx(const GaussianStats& a, const GaussianStats& b) {
    require_same_dim(a, b, "w2_approx");
    Tensor mean_term = sum(square(sub(a.mu, b.mu)));
    Tensor cov_term = sum(square(sub(sqrt(a.var), sqrt(b.var))));
    return sqrt(add(mean_term, cov_term));
}

Tensor align_loss(const Tensor& rho_av, const Tensor& rho_t_matched) {
    if (rho_av.shape() != rho_t_matched.shape() || rho_av.rank() != 2) {
        throw ShapeError("align_loss: shapes " + shape_str(rho_av.shape()) + " and " +
                         shape_str(rho_t_matched.shape()) + " must be equal [B x D]");
    }
    if (rho_av.dim(0) < 2) {
        throw DomainError("align_loss: degenerate batch of " + std::to_string(rho_av.dim(0)) +
                          " sample(s); need at least 2");
    }
    return w2_approx(estimate_gaussian(rho_av), estimate_gaussian(rho_t_matched));
}

MarginMatrix MarginMatrix::zeros(std::size_t classes) {
    MarginMatrix mm;
    mm.classes = classes;
    mm.m.assign(classes * classes, 0.0);
    mm.alpha = 0.0;
    mm.beta = 0.0;
    return mm;
}

Tensor MarginMatrix::rows_for(std::span<const std::size_t> labels) const {
    std::vector<double> out;
    out.reserve(labels.size() * classes);
    for (auto y : labels) {
        if (y >= classes) {
            throw IndexError("margin row " + std::to_string(y) + " out of range for " +
                             std::to_string(classes) + " classes");
        }
        out.insert(out.end(), m.begin() + static_cast<std::ptrdiff_t>(y * classes),
                   m.begin() + static_cast<std::ptrdiff_t>((y + 1) * classes));
    }
    return Tensor::from({labels.size(), classes}, std::move(out));
}

MarginMatrix compute_margins(std::span<const Tensor> class_knowledge_embedded, double alpha,
                             double beta) {
    if (class_knowledge_embedded.empty()) throw DomainError("compute_margins: empty class list");
    if (!(alpha >= 0.0)) throw DomainError("compute_margins: alpha must be >= 0");
    std::vector<GaussianStats> stats;
    stats.reserve(class_knowledge_embedded.size());
    for (std::size_t c = 0; c < class_knowledge_embedded.size(); ++c) {
        const auto& t = class_knowledge_embedded[c];
        if (t.rank() != 2 || t.dim(0) == 0) {
            throw DomainError("compute_margins: class " + std::to_string(c) +
                              " has no description embeddings");
        }
        stats.push_back(estimate_gaussian(t.detach()));
    }
    MarginMatrix mm;
    mm.classes = stats.size();
    mm.alpha = alpha;
    mm.beta = beta;
    mm.m.assign(mm.classes * mm.classes, beta);
    for (std::size_t i = 0; i < mm.classes; ++i) {
        for (std::size_t j = i + 1; j < mm.classes; ++j) {
            const double v = alpha * w2_approx(stats[i], stats[j]).item() + beta;
            mm.m[i * mm.classes + j] = v;
            mm.m[j * mm.classes + i] = v;
        }
    }
    return mm;
}

Tensor kaml_loss(const Tensor& logits, std::span<const std::size_t> labels,
                 const MarginMatrix& margins) {
    if (logits.rank() != 2 || logits.dim(1) != margins.classes) {
        throw ShapeError("kaml_loss: logits " + shape_str(logits.shape()) + " do not match " +
                         std::to_string(margins.classes) + " margin classes");
    }
    for (auto y : labels) {
        if (y >= margins.classes) {
            throw IndexError("kaml_loss: label " + std::to_string(y) + " out of range for " +
                             std::to_string(margins.classes) + " classes");
        }
    }
    Tensor rows = margins.rows_for(labels);
    return softmax_cross_entropy(logits, labels, &rows);
}

LossBreakdown kda_objective(const ForwardOutput& forward, std::span<const std::size_t> labels,
                            const MarginMatrix& margins, double lambda) {
    if (!(lambda >= 0.0)) throw DomainError("kda_objective: lambda must be >= 0");
    LossBreakdown out;
    out.lambda = lambda;
    out.kaml = kaml_loss(class_logits(forward.rho_av, forward.rho_t), labels, margins);
    if (lambda == 0.0) {
        out.align = align_loss(forward.rho_av.detach(), gather_rows(forward.rho_t.detach(), labels));
        out.total = out.kaml;
    } else {
        out.align = align_loss(forward.rho_av, gather_rows(forward.rho_t, labels));
        out.total = add(out.kaml, scale(out.align, lambda));
    }
    return out;
}

}  // namespace kda
