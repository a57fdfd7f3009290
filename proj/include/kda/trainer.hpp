#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "kda/datahub.hpp"
#include "kda/eval.hpp"
#include "kda/losses.hpp"
#include "kda/model.hpp"

namespace kda {

enum class PlateauMetric { hm, zsl, loss };
enum class MarginRefresh { per_epoch, per_step };

struct TrainConfig {
    double lr = 1e-3;
    double beta1 = 0.5;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::size_t batch_size = 64;
    std::size_t max_epochs = 200;
    double plateau_factor = 0.1;
    std::size_t plateau_patience = 3;
    PlateauMetric plateau_metric = PlateauMetric::hm;
    double lambda = 1.0;
    double alpha = 1.0;
    double beta = 0.2;
    // Drives model init, dropout masks and batch order.
    std::uint64_t seed = 0;
    MarginRefresh margin_refresh = MarginRefresh::per_epoch;
    // Training stops once the scheduled rate falls below this.
    double min_lr = 1e-7;

    // Throws ConfigError naming the offending field.
    void validate() const;
};

// Model and optimisation settings read from one key = value file. Feature
// widths are taken from the dataset, not the file.
struct RunConfig {
    ModelConfig model;
    TrainConfig train;
};

// `#` starts a comment; blank lines are ignored. ParseError carries
// "<name>:<line>: ..." for malformed lines and duplicate keys.
struct ConfigValue {
    std::string text;
    std::size_t line = 0;
};
std::map<std::string, ConfigValue> parse_key_values(std::istream& in, const std::string& name);
RunConfig parse_run_config(std::istream& in, const std::string& name = "config");
RunConfig load_run_config(const std::filesystem::path& path);
SynthConfig parse_synth_config(std::istream& in, const std::string& name = "config");
SynthConfig load_synth_config(const std::filesystem::path& path);

struct AdamHyper {
    double lr = 1e-3;
    double beta1 = 0.5;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
    std::uint64_t step = 0;
};

// One Adam update of every tensor from its gradient buffer. Buffers are
// created on the first call and must keep mirroring the parameter shapes.
void adam_step(std::span<Tensor> params, AdamState& state, const AdamHyper& hyper);

// Multiplies the rate by `factor` once `patience` consecutive epochs pass
// without strict improvement on the best value so far, then restarts the
// count. NaN never counts as an improvement.
class PlateauScheduler {
public:
    PlateauScheduler(double lr, double factor, std::size_t patience, bool higher_is_better);

    // Feeds one epoch's metric and returns the rate for the next epoch.
    double step(double metric);
    double lr() const { return lr_; }

private:
    double lr_;
    double factor_;
    std::size_t patience_;
    bool higher_is_better_;
    bool has_best_ = false;
    double best_ = 0.0;
    std::size_t bad_epochs_ = 0;
};

// Rate in effect at each epoch when `history[e]` is observed after epoch e:
// element 0 is `initial_lr`, element e + 1 follows history[0..e].
std::vector<double> plateau_replay(std::span<const double> history, double initial_lr, double factor,
                                   std::size_t patience, bool higher_is_better);
// Rate after the whole history.
double plateau_schedule(std::span<const double> history, std::size_t patience, double factor, double initial_lr,
                        bool higher_is_better = true);
bool higher_is_better(PlateauMetric m);

struct EpochLog {
    std::size_t epoch = 0;  // 1-based
    // Means over the epoch's training batches.
    double kaml = 0.0;
    double align = 0.0;
    double total = 0.0;
    EvalResult eval;
    double test_align = 0.0;
    // Rate used for this epoch's updates.
    double lr = 0.0;
    double monitored = 0.0;
};

struct TrainReport {
    std::vector<EpochLog> epochs;
    // lr_trace[e] is the rate used during epoch e + 1; the last entry is the
    // rate after the final schedule step.
    std::vector<double> lr_trace;
    std::vector<double> metric_history;
    std::size_t best_epoch = 0;
    double best_hm = 0.0;
    std::filesystem::path best_checkpoint;
    // Eval-mode objective over the whole training partition before the first
    // and after the final update (best parameters restored).
    double initial_train_loss = 0.0;
    double final_train_loss = 0.0;
    EvalResult final_eval;
    double final_test_align = 0.0;
    std::string stop_reason;
    double wall_seconds = 0.0;
};

struct FitOptions {
    // Written whenever a new best HM is reached; empty disables it.
    std::filesystem::path checkpoint_path;
    // Receives one human-readable line per epoch when set.
    std::ostream* log = nullptr;
};

// Trains `model` in place and leaves it holding the best-HM parameters.
// Throws TrainingError on a non-finite loss.
TrainReport fit(KdaModel& model, const Dataset& ds, const TrainConfig& config, const FitOptions& options = {});

// Eval-mode objective over the whole training partition with margins from
// the current E_t.
LossBreakdown train_objective(const KdaModel& model, const Dataset& ds, const TrainConfig& config);

// "epoch,kaml,align,total,S,U,HM,ZSL,lr" header then one line per epoch.
void write_metrics(const TrainReport& report, std::ostream& out);

}  // namespace kda
