#include "kda/cli.hpp"

#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "kda/datahub.hpp"
#include "kda/errors.hpp"
#include "kda/eval.hpp"
#include "kda/gradsuite.hpp"
#include "kda/model.hpp"
#include "kda/trainer.hpp"

namespace kda {

namespace {

namespace fs = std::filesystem;

struct DataFlags {
    std::string features, knowledge, split;

    void attach(CLI::App& cmd) {
        cmd.add_option("--features", features, "features JSONL file")->required();
        cmd.add_option("--knowledge", knowledge, "knowledge JSONL file")->required();
        cmd.add_option("--split", split, "split JSON file")->required();
    }
    Dataset load() const { return load_dataset({features, knowledge, split}); }
};

void require_compatible(const KdaModel& model, const Dataset& ds) {
    const auto& c = model.config();
    if (c.audio_dim != ds.audio_dim || c.visual_dim != ds.visual_dim || c.text_dim != ds.text_dim) {
        throw ValidationError("dims: checkpoint expects audio/visual/text " + std::to_string(c.audio_dim) + "/" +
                              std::to_string(c.visual_dim) + "/" + std::to_string(c.text_dim) +
                              ", dataset has " + std::to_string(ds.audio_dim) + "/" +
                              std::to_string(ds.visual_dim) + "/" + std::to_string(ds.text_dim));
    }
}

void write_text(const fs::path& path, const std::string& text) {
    ensure_parent_directory(path);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + path.string());
    f << text;
    if (!f) throw IoError("write failed for " + path.string());
}

std::string report_json(const TrainReport& r) {
    nlohmann::ordered_json j;
    j["epochs"] = r.epochs.size();
    j["best_epoch"] = r.best_epoch;
    j["best_hm"] = r.best_hm;
    j["stop_reason"] = r.stop_reason;
    j["initial_train_loss"] = r.initial_train_loss;
    j["final_train_loss"] = r.final_train_loss;
    j["final_test_align"] = r.final_test_align;
    j["final"] = {{"S", r.final_eval.S}, {"U", r.final_eval.U}, {"HM", r.final_eval.HM}, {"ZSL", r.final_eval.ZSL}};
    j["lr_trace"] = r.lr_trace;
    j["metric_history"] = r.metric_history;
    j["wall_seconds"] = r.wall_seconds;
    return j.dump(2) + "\n";
}

int cmd_gen_synth(const std::string& config, const std::string& out_dir, std::optional<std::uint64_t> seed,
                  std::ostream& out) {
    SynthConfig c = config.empty() ? SynthConfig{} : load_synth_config(config);
    if (seed) c.seed = *seed;
    const auto ds = generate_synthetic(c);
    save_dataset(ds, DatasetPaths::in_directory(out_dir));
    out << "wrote " << ds.records.size() << " records, " << ds.split.seen.size() << " seen + "
        << ds.split.unseen.size() << " unseen classes to " << out_dir << "\n";
    return kExitOk;
}

int cmd_train(const DataFlags& data, const std::string& config, const std::string& out_dir,
              const std::string& checkpoint, std::optional<std::uint64_t> seed, std::ostream& out) {
    RunConfig run = config.empty() ? RunConfig{} : load_run_config(config);
    if (seed) run.train.seed = *seed;
    const auto ds = data.load();
    run.model.audio_dim = ds.audio_dim;
    run.model.visual_dim = ds.visual_dim;
    run.model.text_dim = ds.text_dim;
    auto model = init_model(run.model, static_cast<std::uint32_t>(run.train.seed));
    const fs::path dir(out_dir);
    FitOptions opts;
    opts.checkpoint_path = checkpoint.empty() ? dir / "model.kda" : fs::path(checkpoint);
    opts.log = &out;
    const auto report = fit(model, ds, run.train, opts);
    // The restored best parameters, whether or not an epoch ever improved.
    save_checkpoint(model, opts.checkpoint_path);
    std::ostringstream csv;
    write_metrics(report, csv);
    write_text(dir / "metrics.csv", csv.str());
    write_text(dir / "report.json", report_json(report));
    out << "best epoch " << report.best_epoch << " (" << report.stop_reason << "): "
        << format_metrics(report.final_eval) << "\n";
    return kExitOk;
}

int cmd_eval(const DataFlags& data, const std::string& checkpoint, const std::string& mode, std::ostream& out) {
    const auto m = parse_eval_mode(mode);
    const auto ds = data.load();
    const auto model = load_checkpoint(checkpoint);
    require_compatible(model, ds);
    out << format_metrics(evaluate(model, ds, m), m) << "\n";
    return kExitOk;
}

int cmd_export(const DataFlags& data, const std::string& checkpoint, const std::string& path, std::ostream& out) {
    const auto ds = data.load();
    const auto model = load_checkpoint(checkpoint);
    require_compatible(model, ds);
    export_embeddings(model, ds, path);
    out << "wrote " << ds.records.size() + ds.knowledge.size() << " rows to " << path << "\n";
    return kExitOk;
}

int cmd_check_grad(std::uint64_t seed, std::size_t seeds, std::ostream& out) {
    const auto result = run_gradient_suite(seed, seeds);
    out << format_grad_suite(result);
    return result.pass ? kExitOk : kExitRuntime;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Knowledge-aware distribution adaptation for audio-visual zero-shot learning", "kda"};
    app.require_subcommand(1);

    DataFlags data;
    std::string config, out_path, checkpoint, mode = "both";
    std::optional<std::uint64_t> seed;
    std::size_t grad_seeds = 20;

    auto* gen = app.add_subcommand("gen-synth", "write a synthetic dataset");
    gen->add_option("--config", config, "synthetic generator config");
    gen->add_option("--out", out_path, "output directory")->required();
    gen->add_option("--seed", seed, "overrides the config seed");

    auto* train = app.add_subcommand("train", "fit a model and write checkpoint and report");
    data.attach(*train);
    train->add_option("--config", config, "run config (model and training keys)");
    train->add_option("--out", out_path, "output directory for metrics.csv and report.json")->required();
    train->add_option("--checkpoint", checkpoint, "checkpoint path (default <out>/model.kda)");
    train->add_option("--seed", seed, "overrides the config seed");

    auto* ev = app.add_subcommand("eval", "print S/U/HM/ZSL for a checkpoint");
    data.attach(*ev);
    ev->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
    ev->add_option("--mode", mode, "gzsl, zsl or both")->check(CLI::IsMember({"gzsl", "zsl", "both"}));

    auto* grad = app.add_subcommand("check-grad", "finite-difference check of every op and loss");
    grad->add_option("--seed", seed, "first seed (default 0)");
    grad->add_option("--seeds", grad_seeds, "number of seeds")->check(CLI::PositiveNumber);

    auto* exp = app.add_subcommand("export-embeddings", "dump common-space embeddings as JSONL");
    data.attach(*exp);
    exp->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
    exp->add_option("--out", out_path, "output JSONL file")->required();

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n\n";
        const auto chosen = app.get_subcommands();
        err << (chosen.empty() ? app.help() : chosen.front()->help());
        return kExitValidation;
    }

    try {
        if (*gen) return cmd_gen_synth(config, out_path, seed, out);
        if (*train) return cmd_train(data, config, out_path, checkpoint, seed, out);
        if (*ev) return cmd_eval(data, checkpoint, mode, out);
        if (*grad) return cmd_check_grad(seed.value_or(0), grad_seeds, out);
        return cmd_export(data, checkpoint, out_path, out);
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const ParseError& e) {
        err << "parse error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const ValidationError& e) {
        err << "validation error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
}

}  // namespace kda
