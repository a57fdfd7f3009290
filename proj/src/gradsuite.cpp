#include "kda/gradsuite.hpp"

#include <algorithm>
#include <cstdio>
#include <functional>
#include <map>
#include <random>

#include "kda/errors.hpp"
#include "kda/losses.hpp"
#include "kda/model.hpp"

namespace kda {

namespace {

struct Probe {
    std::function<Tensor()> f;
    std::vector<NamedTensor> params;
};

using Factory = std::function<Probe(std::mt19937_64&)>;

std::vector<double> uniform(std::size_t n, std::mt19937_64& rng, double lo, double hi) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(n);
    for (auto& x : v) x = u(rng);
    return v;
}

Tensor param(Shape shape, std::mt19937_64& rng, double lo = -2.0, double hi = 2.0) {
    const auto n = shape_numel(shape);
    return Tensor::parameter(std::move(shape), uniform(n, rng, lo, hi));
}

// Contracts a [3x4] output against fixed random weights so every entry
// contributes a distinct coefficient.
Probe unary(std::mt19937_64& rng, std::function<Tensor(const Tensor&)> op, double lo = -2.0,
            double hi = 2.0) {
    auto a = param({3, 4}, rng, lo, hi);
    auto w = Tensor::from({3, 4}, uniform(12, rng, -2, 2));
    return {[=] { return sum(mul(op(a), w)); }, {{"x", a}}};
}

Probe binary(std::mt19937_64& rng, std::function<Tensor(const Tensor&, const Tensor&)> op,
             double lo_b = -2.0) {
    auto a = param({3, 4}, rng);
    auto b = param({3, 4}, rng, lo_b, 2.0);
    auto w = Tensor::from({3, 4}, uniform(12, rng, -2, 2));
    return {[=] { return sum(mul(op(a, b), w)); }, {{"a", a}, {"b", b}}};
}

ModelConfig tiny_model_config() {
    ModelConfig c;
    c.audio_dim = 4;
    c.visual_dim = 5;
    c.text_dim = 3;
    c.hidden_dim = 6;
    c.common_dim = 4;
    c.dropout_enc = 0.2;
    c.dropout_proj = 0.2;
    c.dropout_dec = 0.2;
    return c;
}

Probe full_objective(std::mt19937_64& rng) {
    const auto c = tiny_model_config();
    auto model = std::make_shared<KdaModel>(init_model(c, static_cast<std::uint32_t>(rng())));
    auto audio = Tensor::from({4, c.audio_dim}, uniform(4 * c.audio_dim, rng, -2, 2));
    auto visual = Tensor::from({4, c.visual_dim}, uniform(4 * c.visual_dim, rng, -2, 2));
    KnowledgeInput knowledge{Tensor::from({6, c.text_dim}, uniform(6 * c.text_dim, rng, -2, 2)), {2, 2, 2}};
    const std::vector<std::size_t> labels = {0, 2, 1, 2};
    const auto embedded = model->embed_knowledge(knowledge.text).detach();
    std::vector<Tensor> per_class;
    for (std::size_t k = 0; k < 3; ++k) {
        const std::size_t rows[] = {2 * k, 2 * k + 1};
        per_class.push_back(gather_rows(embedded, rows));
    }
    const auto margins = compute_margins(per_class, 1.0, 0.2);
    const std::uint64_t mask_seed = rng();
    // The dropout stream is replayed on every evaluation so masks stay fixed.
    auto f = [=] {
        std::mt19937_64 mask_rng(mask_seed);
        auto fwd = model->forward(audio, visual, knowledge, &mask_rng);
        return kda_objective(fwd, labels, margins, 1.0).total;
    };
    return {f, model->parameters()};
}

std::vector<std::pair<std::string, Factory>> suite() {
    std::vector<std::pair<std::string, Factory>> s;
    s.emplace_back("matmul", [](std::mt19937_64& rng) {
        auto a = param({3, 4}, rng);
        auto b = param({4, 2}, rng);
        auto w = Tensor::from({3, 2}, uniform(6, rng, -2, 2));
        return Probe{[=] { return sum(mul(matmul(a, b), w)); }, {{"a", a}, {"b", b}}};
    });
    s.emplace_back("transpose", [](std::mt19937_64& rng) {
        auto a = param({3, 4}, rng);
        auto w = Tensor::from({4, 3}, uniform(12, rng, -2, 2));
        return Probe{[=] { return sum(mul(transpose(a), w)); }, {{"x", a}}};
    });
    s.emplace_back("add", [](std::mt19937_64& rng) { return binary(rng, [](auto& a, auto& b) { return add(a, b); }); });
    s.emplace_back("sub", [](std::mt19937_64& rng) { return binary(rng, [](auto& a, auto& b) { return sub(a, b); }); });
    s.emplace_back("mul", [](std::mt19937_64& rng) { return binary(rng, [](auto& a, auto& b) { return mul(a, b); }); });
    s.emplace_back("relu", [](std::mt19937_64& rng) { return unary(rng, [](auto& a) { return relu(a); }); });
    s.emplace_back("sqrt", [](std::mt19937_64& rng) { return unary(rng, [](auto& a) { return sqrt(a); }, 0.1, 2.0); });
    s.emplace_back("square", [](std::mt19937_64& rng) { return unary(rng, [](auto& a) { return square(a); }); });
    s.emplace_back("scale", [](std::mt19937_64& rng) { return unary(rng, [](auto& a) { return scale(a, -1.7); }); });
    s.emplace_back("sum", [](std::mt19937_64& rng) {
        auto a = param({3, 4}, rng);
        return Probe{[=] { return sum(square(a)); }, {{"x", a}}};
    });
    s.emplace_back("mean", [](std::mt19937_64& rng) {
        auto a = param({3, 4}, rng);
        return Probe{[=] { return mean(square(a)); }, {{"x", a}}};
    });
    s.emplace_back("add_bias", [](std::mt19937_64& rng) {
        auto bias = param({4}, rng);
        auto p = unary(rng, [bias](auto& a) { return add_bias(a, bias); });
        p.params.emplace_back("bias", bias);
        return p;
    });
    s.emplace_back("row_sum", [](std::mt19937_64& rng) {
        auto a = param({3, 4}, rng);
        auto w = Tensor::from({3, 1}, uniform(3, rng, -2, 2));
        return Probe{[=] { return sum(mul(row_sum(square(a)), w)); }, {{"x", a}}};
    });
    s.emplace_back("scale_rows", [](std::mt19937_64& rng) {
        auto r = param({3, 1}, rng);
        auto p = unary(rng, [r](auto& a) { return scale_rows(a, r); });
        p.params.emplace_back("row_weights", r);
        return p;
    });
    s.emplace_back("softmax_rows", [](std::mt19937_64& rng) { return unary(rng, [](auto& a) { return softmax_rows(a); }); });
    s.emplace_back("column", [](std::mt19937_64& rng) {
        auto a = param({3, 4}, rng);
        auto w = Tensor::from({3, 1}, uniform(3, rng, -2, 2));
        return Probe{[=] { return sum(mul(column(a, 2), w)); }, {{"x", a}}};
    });
    s.emplace_back("concat_cols", [](std::mt19937_64& rng) {
        auto a = param({3, 2}, rng);
        auto b = param({3, 2}, rng);
        auto w = Tensor::from({3, 4}, uniform(12, rng, -2, 2));
        return Probe{[=] { return sum(mul(concat_cols(a, b), w)); }, {{"a", a}, {"b", b}}};
    });
    s.emplace_back("gather_rows", [](std::mt19937_64& rng) {
        return unary(rng, [](auto& a) {
            const std::size_t rows[] = {2, 0, 2};
            return gather_rows(a, rows);
        });
    });
    s.emplace_back("segment_mean_rows", [](std::mt19937_64& rng) {
        auto a = param({3, 4}, rng);
        auto w = Tensor::from({2, 4}, uniform(8, rng, -2, 2));
        return Probe{[=] {
                         const std::size_t counts[] = {1, 2};
                         return sum(mul(segment_mean_rows(a, counts), w));
                     },
                     {{"x", a}}};
    });
    s.emplace_back("dropout", [](std::mt19937_64& rng) {
        const std::uint64_t mask_seed = rng();
        return unary(rng, [mask_seed](auto& a) {
            std::mt19937_64 mask_rng(mask_seed);
            return dropout(a, 0.3, mask_rng);
        });
    });
    s.emplace_back("softmax_cross_entropy", [](std::mt19937_64& rng) {
        auto a = param({3, 4}, rng);
        auto margins = Tensor::from({3, 4}, uniform(12, rng, 0.0, 2.0));
        return Probe{[=] {
                         const std::size_t labels[] = {0, 3, 1};
                         return softmax_cross_entropy(a, labels, &margins);
                     },
                     {{"logits", a}}};
    });
    s.emplace_back("reduce_stats", [](std::mt19937_64& rng) {
        auto a = param({3, 4}, rng);
        auto w = Tensor::from({4}, uniform(4, rng, -2, 2));
        return Probe{[=] {
                         auto st = reduce_stats(a);
                         return add(sum(mul(st.mean, w)), sum(mul(st.var, w)));
                     },
                     {{"x", a}}};
    });
    s.emplace_back("align_loss", [](std::mt19937_64& rng) {
        auto av = param({4, 3}, rng);
        auto t = param({4, 3}, rng);
        return Probe{[=] { return align_loss(av, t); }, {{"rho_av", av}, {"rho_t", t}}};
    });
    s.emplace_back("kaml_loss", [](std::mt19937_64& rng) {
        auto logits = param({4, 3}, rng);
        std::vector<Tensor> cls;
        for (int c = 0; c < 3; ++c) cls.push_back(Tensor::from({2, 2}, uniform(4, rng, -2, 2)));
        const auto margins = compute_margins(cls, 1.0, 0.2);
        return Probe{[=] {
                         const std::size_t labels[] = {0, 1, 2, 1};
                         return kaml_loss(logits, labels, margins);
                     },
                     {{"logits", logits}}};
    });
    s.emplace_back("kda_objective", full_objective);
    return s;
}

}  // namespace

GradSuiteResult run_gradient_suite(std::uint64_t first_seed, std::size_t seeds, const GradCheckOptions& options) {
    constexpr std::size_t kMaxDraws = 100;
    GradSuiteResult result;
    const auto cases = suite();
    for (std::uint64_t seed = first_seed; seed < first_seed + seeds; ++seed) {
        for (const auto& [name, factory] : cases) {
            std::mt19937_64 rng(seed);
            GradSuiteCase c{name, seed, 0, {}};
            Probe probe = factory(rng);
            while (min_relu_margin(probe.f()) < kKinkMargin) {
                if (++c.redraws == kMaxDraws) throw TrainingError(name + ": no kink-free draw for seed " + std::to_string(seed));
                probe = factory(rng);
            }
            c.report = finite_difference_check(probe.f, probe.params, options);
            result.pass = result.pass && c.report.pass;
            result.cases.push_back(std::move(c));
        }
    }
    return result;
}

std::string format_grad_suite(const GradSuiteResult& result) {
    struct Worst {
        double rel = 0.0, abs = 0.0;
        std::size_t seeds = 0, redraws = 0, failures = 0;
        std::string first_failure;
    };
    std::vector<std::string> order;
    std::map<std::string, Worst> worst;
    for (const auto& c : result.cases) {
        if (!worst.contains(c.name)) order.push_back(c.name);
        auto& w = worst[c.name];
        ++w.seeds;
        w.redraws += c.redraws;
        for (const auto& p : c.report.params) {
            w.rel = std::max(w.rel, p.max_rel_err);
            w.abs = std::max(w.abs, p.max_abs_err);
        }
        if (!c.report.pass) {
            if (w.failures++ == 0) w.first_failure = "seed " + std::to_string(c.seed) + ": " + c.report.failure;
        }
    }
    std::string out;
    char buf[256];
    for (const auto& name : order) {
        const auto& w = worst[name];
        std::snprintf(buf, sizeof buf, "%-22s seeds=%zu redraws=%zu max_rel=%.3e max_abs=%.3e %s\n", name.c_str(),
                      w.seeds, w.redraws, w.rel, w.abs, w.failures == 0 ? "ok" : "FAIL");
        out += buf;
        if (w.failures != 0) out += "  " + w.first_failure + "\n";
    }
    out += result.pass ? "PASS\n" : "FAIL\n";
    return out;
}

}  // namespace kda
