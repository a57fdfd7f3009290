#include "kda/trainer.hpp"

#include <chrono>
#include <concepts>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <random>
#include <unordered_map>

namespace kda {

void TrainConfig::validate() const {
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be > 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("beta1 must lie in [0, 1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("beta2 must lie in [0, 1)");
    if (!(eps >= 0.0)) throw ConfigError("eps must be >= 0");
    if (batch_size < 2) throw ConfigError("batch_size must be >= 2");
    if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
    if (!(plateau_factor > 0.0 && plateau_factor < 1.0)) throw ConfigError("plateau_factor must lie in (0, 1)");
    if (plateau_patience < 1) throw ConfigError("plateau_patience must be >= 1");
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("lambda must be finite and >= 0");
    if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ConfigError("alpha must be finite and >= 0");
    if (!std::isfinite(beta)) throw ConfigError("beta must be finite");
    if (!(min_lr >= 0.0)) throw ConfigError("min_lr must be >= 0");
}

// ---- key = value files ----

namespace {

std::string trim(std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

class ConfigReader {
public:
    ConfigReader(std::map<std::string, ConfigValue> values, std::string name)
        : values_(std::move(values)), name_(std::move(name)) {}

    void read(const char* key, double& out) {
        if (auto* v = take(key)) {
            std::size_t used = 0;
            try {
                out = std::stod(v->text, &used);
            } catch (const std::exception&) {
                used = 0;
            }
            if (used == 0 || used != v->text.size()) fail(*v, std::string(key) + " expects a number");
        }
    }

    template <std::unsigned_integral T>
    void read(const char* key, T& out) {
        if (auto* v = take(key)) out = static_cast<T>(unsigned_value(*v, key));
    }

    template <typename Fn>
    void read_with(const char* key, Fn&& convert) {
        if (auto* v = take(key)) {
            try {
                convert(v->text);
            } catch (const ConfigError& e) {
                fail(*v, e.what());
            }
        }
    }

    // Rejects whatever no read() consumed.
    void finish() const {
        if (!values_.empty()) {
            const auto& [key, v] = *values_.begin();
            fail(v, "unknown key '" + key + "'");
        }
    }

private:
    ConfigValue* take(const char* key) {
        auto it = values_.find(key);
        if (it == values_.end()) return nullptr;
        taken_ = it->second;
        values_.erase(it);
        return &taken_;
    }

    std::uint64_t unsigned_value(const ConfigValue& v, const char* key) const {
        std::size_t used = 0;
        unsigned long long x = 0;
        try {
            if (!v.text.empty() && v.text[0] != '-') x = std::stoull(v.text, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used == 0 || used != v.text.size()) fail(v, std::string(key) + " expects a non-negative integer");
        return x;
    }

    [[noreturn]] void fail(const ConfigValue& v, const std::string& what) const {
        throw ParseError(name_ + ":" + std::to_string(v.line) + ": " + what);
    }

    std::map<std::string, ConfigValue> values_;
    std::string name_;
    ConfigValue taken_;
};

std::ifstream open_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    return in;
}

}  // namespace

std::map<std::string, ConfigValue> parse_key_values(std::istream& in, const std::string& name) {
    std::map<std::string, ConfigValue> out;
    std::string line;
    std::size_t number = 0;
    while (std::getline(in, line)) {
        ++number;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        const auto where = name + ":" + std::to_string(number) + ": ";
        if (eq == std::string::npos) throw ParseError(where + "expected 'key = value'");
        auto key = trim(line.substr(0, eq));
        auto value = trim(line.substr(eq + 1));
        if (key.empty() || value.empty()) throw ParseError(where + "expected 'key = value'");
        if (out.contains(key)) throw ParseError(where + "duplicate key '" + key + "'");
        out.emplace(std::move(key), ConfigValue{std::move(value), number});
    }
    return out;
}

RunConfig parse_run_config(std::istream& in, const std::string& name) {
    RunConfig rc;
    ConfigReader r(parse_key_values(in, name), name);
    auto& t = rc.train;
    r.read("lr", t.lr);
    r.read("beta1", t.beta1);
    r.read("beta2", t.beta2);
    r.read("eps", t.eps);
    r.read("batch_size", t.batch_size);
    r.read("max_epochs", t.max_epochs);
    r.read("plateau_factor", t.plateau_factor);
    r.read("plateau_patience", t.plateau_patience);
    r.read_with("plateau_metric", [&](const std::string& s) {
        if (s == "hm") t.plateau_metric = PlateauMetric::hm;
        else if (s == "zsl") t.plateau_metric = PlateauMetric::zsl;
        else if (s == "loss") t.plateau_metric = PlateauMetric::loss;
        else throw ConfigError("plateau_metric must be hm, zsl or loss");
    });
    r.read("lambda", t.lambda);
    r.read("alpha", t.alpha);
    r.read("beta", t.beta);
    r.read("seed", t.seed);
    r.read_with("margin_refresh", [&](const std::string& s) {
        if (s == "epoch") t.margin_refresh = MarginRefresh::per_epoch;
        else if (s == "step") t.margin_refresh = MarginRefresh::per_step;
        else throw ConfigError("margin_refresh must be epoch or step");
    });
    r.read("min_lr", t.min_lr);
    auto& m = rc.model;
    r.read("hidden_dim", m.hidden_dim);
    r.read("common_dim", m.common_dim);
    r.read("dropout_enc", m.dropout_enc);
    r.read("dropout_proj", m.dropout_proj);
    r.read("dropout_dec", m.dropout_dec);
    r.read_with("modality", [&](const std::string& s) { m.modality = parse_modality(s); });
    r.finish();
    t.validate();
    return rc;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    auto in = open_config(path);
    return parse_run_config(in, path.string());
}

SynthConfig parse_synth_config(std::istream& in, const std::string& name) {
    SynthConfig c;
    ConfigReader r(parse_key_values(in, name), name);
    r.read("seen_classes", c.seen_classes);
    r.read("unseen_classes", c.unseen_classes);
    r.read("samples_per_class", c.samples_per_class);
    r.read("audio_dim", c.audio_dim);
    r.read("visual_dim", c.visual_dim);
    r.read("text_dim", c.text_dim);
    r.read("latent_dim", c.latent_dim);
    r.read("descriptions_per_class", c.descriptions_per_class);
    r.read("cluster_spread", c.cluster_spread);
    r.read("modality_noise", c.modality_noise);
    r.read("test_fraction", c.test_fraction);
    r.read("seed", c.seed);
    r.finish();
    c.validate();
    return c;
}

SynthConfig load_synth_config(const std::filesystem::path& path) {
    auto in = open_config(path);
    return parse_synth_config(in, path.string());
}

// ---- optimisation ----

void adam_step(std::span<Tensor> params, AdamState& state, const AdamHyper& hyper) {
    if (state.step == 0 && state.m.empty()) {
        for (const auto& p : params) {
            state.m.emplace_back(p.numel(), 0.0);
            state.v.emplace_back(p.numel(), 0.0);
        }
    }
    if (state.m.size() != params.size() || state.v.size() != params.size()) {
        throw ContractError("adam_step: state tracks " + std::to_string(state.m.size()) + " tensors, got " +
                            std::to_string(params.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (state.m[i].size() != params[i].numel() || state.v[i].size() != params[i].numel()) {
            throw ContractError("adam_step: moment buffers of tensor " + std::to_string(i) +
                                " do not match shape " + shape_str(params[i].shape()));
        }
        if (params[i].has_grad() && params[i].grad().size() != params[i].numel()) {
            throw ContractError("adam_step: gradient of tensor " + std::to_string(i) + " has the wrong size");
        }
    }

    state.step += 1;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(hyper.beta1, t);
    const double c2 = 1.0 - std::pow(hyper.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!params[i].has_grad()) continue;
        auto p = params[i].mutable_data();
        auto g = params[i].grad();
        auto& m = state.m[i];
        auto& v = state.v[i];
        for (std::size_t j = 0; j < p.size(); ++j) {
            m[j] = hyper.beta1 * m[j] + (1.0 - hyper.beta1) * g[j];
            v[j] = hyper.beta2 * v[j] + (1.0 - hyper.beta2) * g[j] * g[j];
            const double m_hat = m[j] / c1;
            const double v_hat = v[j] / c2;
            p[j] -= hyper.lr * m_hat / (std::sqrt(v_hat) + hyper.eps);
        }
    }
}

PlateauScheduler::PlateauScheduler(double lr, double factor, std::size_t patience, bool higher_is_better)
    : lr_(lr), factor_(factor), patience_(patience), higher_is_better_(higher_is_better) {}

double PlateauScheduler::step(double metric) {
    const bool improved = !std::isnan(metric) &&
                          (!has_best_ || (higher_is_better_ ? metric > best_ : metric < best_));
    if (improved) {
        best_ = metric;
        has_best_ = true;
        bad_epochs_ = 0;
    } else if (++bad_epochs_ >= patience_) {
        lr_ *= factor_;
        bad_epochs_ = 0;
    }
    return lr_;
}

std::vector<double> plateau_replay(std::span<const double> history, double initial_lr, double factor,
                                   std::size_t patience, bool higher_is_better) {
    PlateauScheduler s(initial_lr, factor, patience, higher_is_better);
    std::vector<double> out{initial_lr};
    for (double h : history) out.push_back(s.step(h));
    return out;
}

double plateau_schedule(std::span<const double> history, std::size_t patience, double factor, double initial_lr,
                        bool higher_is_better) {
    return plateau_replay(history, initial_lr, factor, patience, higher_is_better).back();
}

bool higher_is_better(PlateauMetric m) { return m != PlateauMetric::loss; }

// ---- training loop ----

namespace {

struct SeenTask {
    KnowledgeInput knowledge;
    std::unordered_map<ClassId, std::size_t> local;  // class id -> row of rho_t
};

SeenTask seen_task(const Dataset& ds) {
    SeenTask t;
    t.knowledge = gather_knowledge(ds, ds.split.seen);
    for (std::size_t i = 0; i < ds.split.seen.size(); ++i) t.local.emplace(ds.split.seen[i], i);
    return t;
}

MarginMatrix refresh_margins(const KdaModel& model, const Dataset& ds, const TrainConfig& config) {
    std::vector<Tensor> per_class;
    for (auto c : ds.split.seen) {
        const ClassId one[] = {c};
        per_class.push_back(model.embed_knowledge(gather_knowledge(ds, one).text).detach());
    }
    return compute_margins(per_class, config.alpha, config.beta);
}

std::vector<std::size_t> local_labels(const SeenTask& task, const SampleTensors& s) {
    std::vector<std::size_t> out;
    out.reserve(s.classes.size());
    for (auto c : s.classes) out.push_back(task.local.at(c));
    return out;
}

void require_finite(const LossBreakdown& loss, std::size_t epoch, std::size_t batch) {
    const double kaml = loss.kaml.item(), align = loss.align.item(), total = loss.total.item();
    const char* bad = !std::isfinite(kaml) ? "kaml" : !std::isfinite(align) ? "align" : !std::isfinite(total) ? "total" : nullptr;
    if (bad) {
        char buf[256];
        std::snprintf(buf, sizeof buf, "non-finite %s loss at epoch %zu batch %zu (kaml=%g align=%g total=%g)", bad,
                      epoch, batch, kaml, align, total);
        throw TrainingError(buf);
    }
}

double monitored_value(PlateauMetric m, const EvalResult& e, double train_total) {
    switch (m) {
        case PlateauMetric::hm: return e.HM;
        case PlateauMetric::zsl: return e.ZSL;
        case PlateauMetric::loss: return train_total;
    }
    return e.HM;
}

}  // namespace

LossBreakdown train_objective(const KdaModel& model, const Dataset& ds, const TrainConfig& config) {
    const auto task = seen_task(ds);
    const auto samples = gather_samples(ds, ds.partition(Partition::train));
    const auto labels = local_labels(task, samples);
    const auto margins = refresh_margins(model, ds, config);
    const auto fwd = model.forward(samples.audio, samples.visual, task.knowledge);
    return kda_objective(fwd, labels, margins, config.lambda);
}

TrainReport fit(KdaModel& model, const Dataset& ds, const TrainConfig& config, const FitOptions& options) {
    config.validate();
    const auto started = std::chrono::steady_clock::now();
    TrainReport report;

    const auto task = seen_task(ds);
    const auto train_idx = ds.partition(Partition::train);
    if (train_idx.size() < 2) throw TrainingError("training partition needs at least 2 samples");

    std::vector<Tensor> params;
    for (auto& [name, t] : model.trainable_parameters()) params.push_back(t);
    AdamState adam;
    AdamHyper hyper{config.lr, config.beta1, config.beta2, config.eps};
    PlateauScheduler scheduler(config.lr, config.plateau_factor, config.plateau_patience,
                               higher_is_better(config.plateau_metric));

    std::mt19937_64 master(config.seed);
    std::mt19937_64 dropout_rng(master());

    report.initial_train_loss = train_objective(model, ds, config).total.item();

    KdaModel best = model.clone();
    bool have_best = false;
    report.stop_reason = "max_epochs";

    for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
        EpochLog log;
        log.epoch = epoch;
        log.lr = scheduler.lr();
        hyper.lr = log.lr;
        report.lr_trace.push_back(log.lr);

        MarginMatrix margins = refresh_margins(model, ds, config);
        const auto batches = make_batches(train_idx, config.batch_size, master(), true);
        for (std::size_t b = 0; b < batches.size(); ++b) {
            if (config.margin_refresh == MarginRefresh::per_step && b > 0) {
                margins = refresh_margins(model, ds, config);
            }
            const auto samples = gather_samples(ds, batches[b]);
            const auto labels = local_labels(task, samples);
            const auto fwd = model.forward(samples.audio, samples.visual, task.knowledge, &dropout_rng);
            const auto loss = kda_objective(fwd, labels, margins, config.lambda);
            require_finite(loss, epoch, b + 1);
            for (auto& p : params) p.zero_grad();
            backward(loss.total);
            adam_step(params, adam, hyper);
            log.kaml += loss.kaml.item();
            log.align += loss.align.item();
            log.total += loss.total.item();
        }
        const double n = static_cast<double>(batches.size());
        log.kaml /= n;
        log.align /= n;
        log.total /= n;
        for (auto& p : params) p.zero_grad();

        log.eval = evaluate(model, ds, EvalMode::both);
        log.test_align = test_align_loss(model, ds);
        log.monitored = monitored_value(config.plateau_metric, log.eval, log.total);
        report.metric_history.push_back(log.monitored);

        if (!have_best || log.eval.HM > report.best_hm) {
            have_best = true;
            report.best_hm = log.eval.HM;
            report.best_epoch = epoch;
            best.copy_parameters_from(model);
            if (!options.checkpoint_path.empty()) {
                save_checkpoint(model, options.checkpoint_path);
                report.best_checkpoint = options.checkpoint_path;
            }
        }

        if (options.log) {
            char buf[256];
            std::snprintf(buf, sizeof buf,
                          "epoch %zu lr=%.3g kaml=%.6f align=%.6f total=%.6f %s test_align=%.6f\n", epoch, log.lr,
                          log.kaml, log.align, log.total, format_metrics(log.eval).c_str(), log.test_align);
            *options.log << buf << std::flush;
        }
        report.epochs.push_back(log);

        const double next_lr = scheduler.step(log.monitored);
        if (next_lr < config.min_lr) {
            report.stop_reason = "lr_floor";
            break;
        }
    }
    report.lr_trace.push_back(scheduler.lr());

    model.copy_parameters_from(best);
    report.final_train_loss = train_objective(model, ds, config).total.item();
    report.final_eval = evaluate(model, ds, EvalMode::both);
    report.final_test_align = test_align_loss(model, ds);
    report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    return report;
}

void write_metrics(const TrainReport& report, std::ostream& out) {
    out << "epoch,kaml,align,total,S,U,HM,ZSL,lr\n";
    char buf[512];
    for (const auto& e : report.epochs) {
        std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", e.epoch, e.kaml,
                      e.align, e.total, e.eval.S, e.eval.U, e.eval.HM, e.eval.ZSL, e.lr);
        out << buf;
    }
}

}  // namespace kda
