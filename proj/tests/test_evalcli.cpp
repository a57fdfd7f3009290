#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "kda/cli.hpp"
#include "kda/eval.hpp"
#include "test_support.hpp"

using namespace kda;
using kda::testing::uniform_values;

namespace {

const std::filesystem::path kGolden = std::filesystem::path(KDA_TEST_DATA) / "golden";

PredictionRecord record(ClassId truth, ClassId predicted) {
    PredictionRecord p;
    p.true_class = truth;
    p.predicted_class = predicted;
    return p;
}

SynthConfig small_synth(std::uint64_t seed) {
    SynthConfig c;
    c.seen_classes = 4;
    c.unseen_classes = 4;
    c.samples_per_class = 10;
    c.audio_dim = 6;
    c.visual_dim = 5;
    c.text_dim = 4;
    c.seed = seed;
    return c;
}

KdaModel random_model(const Dataset& ds, std::uint32_t seed) {
    ModelConfig m;
    m.audio_dim = ds.audio_dim;
    m.visual_dim = ds.visual_dim;
    m.text_dim = ds.text_dim;
    m.hidden_dim = 8;
    m.common_dim = 4;
    return KdaModel::init(m, seed);
}

struct CliRun {
    int code;
    std::string out, err;
};

CliRun cli(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = run_cli(args, out, err);
    return {code, out.str(), err.str()};
}

std::vector<std::string> golden_data_flags() {
    return {"--features", (kGolden / "features.jsonl").string(), "--knowledge",
            (kGolden / "knowledge.jsonl").string(), "--split", (kGolden / "split.json").string()};
}

std::string read_file(const std::filesystem::path& p) {
    std::ifstream f(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(f), {}};
}

}  // namespace

TEST_CASE("predict examples") {
    const ClassId ids[] = {0, 1, 2};
    auto reps = Tensor::from({3, 2}, {0.0, 0.0, 1.0, 0.0, 0.5, 2.0});
    auto preds = predict(Tensor::from({1, 2}, {0.5, 2.0}), reps, ids);
    CHECK(preds[0].predicted_class == 2);
    CHECK(preds[0].distances[2] == 0.0);
    CHECK(preds[0].distances.size() == 3);

    // Midpoint of candidates 7 and 3: the lower id wins whatever the order.
    const ClassId swapped[] = {7, 3};
    auto two = Tensor::from({2, 1}, {1.0, -1.0});
    CHECK(predict(Tensor::from({1, 1}, {0.0}), two, swapped)[0].predicted_class == 3);

    const ClassId bin[] = {0, 1};
    auto p = predict(Tensor::from({1, 1}, {0.4}), Tensor::from({2, 1}, {0.0, 1.0}), bin);
    CHECK(p[0].predicted_class == 0);
    CHECK(p[0].distances[0] == doctest::Approx(0.4).epsilon(1e-15));
    CHECK(p[0].distances[1] == doctest::Approx(0.6).epsilon(1e-15));

    CHECK_THROWS_AS(predict(Tensor::from({1, 1}, {0.0}), Tensor::zeros({0, 1}), {}), DomainError);
    CHECK_THROWS_AS(predict(Tensor::from({1, 2}, {0.0, 0.0}), Tensor::zeros({2, 1}), bin), ShapeError);
}

TEST_CASE("predicted class attains the minimum distance") {
    std::mt19937_64 rng(3);
    const ClassId ids[] = {4, 9, 1, 6, 2};
    for (int trial = 0; trial < 50; ++trial) {
        auto x = Tensor::from({8, 3}, uniform_values(24, rng));
        auto reps = Tensor::from({5, 3}, uniform_values(15, rng));
        for (const auto& p : predict(x, reps, ids)) {
            const auto best = *std::min_element(p.distances.begin(), p.distances.end());
            std::size_t at = std::find(std::begin(ids), std::end(ids), p.predicted_class) - std::begin(ids);
            CHECK(p.distances[at] == best);
        }
    }
}

TEST_CASE("predict is invariant to a common positive rescaling") {
    std::mt19937_64 rng(4);
    const ClassId ids[] = {0, 1, 2, 3};
    for (double k : {1e-3, 0.5, 7.0, 1e4}) {
        auto x = uniform_values(30, rng);
        auto r = uniform_values(12, rng);
        auto base = predict(Tensor::from({10, 3}, x), Tensor::from({4, 3}, r), ids);
        for (auto& v : x) v *= k;
        for (auto& v : r) v *= k;
        auto scaled = predict(Tensor::from({10, 3}, x), Tensor::from({4, 3}, r), ids);
        for (std::size_t b = 0; b < base.size(); ++b) {
            CHECK(scaled[b].predicted_class == base[b].predicted_class);
            for (std::size_t c = 0; c < 4; ++c) {
                CHECK(scaled[b].distances[c] == doctest::Approx(k * base[b].distances[c]).epsilon(1e-12));
            }
        }
    }
}

TEST_CASE("mean class accuracy is unweighted over classes") {
    std::vector<PredictionRecord> preds;
    for (int i = 0; i < 10; ++i) preds.push_back(record(0, 0));
    preds.push_back(record(1, 0));
    const ClassId both[] = {0, 1};
    CHECK(mean_class_accuracy(preds, both) == 0.5);
    CHECK(mean_class_accuracy(preds, both) != doctest::Approx(10.0 / 11.0));

    const ClassId only_a[] = {0};
    CHECK(mean_class_accuracy(preds, only_a) == 1.0);
    std::vector<PredictionRecord> wrong = {record(0, 1), record(1, 0)};
    CHECK(mean_class_accuracy(wrong, both) == 0.0);

    const ClassId missing[] = {0, 5};
    CHECK_THROWS_WITH_AS(mean_class_accuracy(preds, missing), doctest::Contains("class 5"), DomainError);
}

TEST_CASE("harmonic mean") {
    CHECK(std::abs(harmonic_mean(83.98, 27.21) - 41.10) <= 0.01);
    CHECK(harmonic_mean(0.37, 0.37) == doctest::Approx(0.37).epsilon(1e-15));
    CHECK(harmonic_mean(0.8, 0.0) == 0.0);
    CHECK(harmonic_mean(0.0, 0.0) == 0.0);
    CHECK_THROWS_AS(harmonic_mean(-0.1, 0.5), DomainError);
    CHECK_THROWS_AS(harmonic_mean(0.5, -1e-9), DomainError);

    std::mt19937_64 rng(5);
    for (int i = 0; i < 1000; ++i) {
        const auto v = uniform_values(2, rng, 0.0, 1.0);
        const double hm = harmonic_mean(v[0], v[1]);
        CHECK(hm >= std::min(v[0], v[1]) - 1e-15);
        CHECK(hm <= std::max(v[0], v[1]) + 1e-15);
        // Reciprocal form as an independent route.
        CHECK(hm == doctest::Approx(1.0 / ((1.0 / v[0] + 1.0 / v[1]) / 2.0)).epsilon(1e-12));
    }
}

TEST_CASE("perfect embeddings on noise-free data score one everywhere") {
    auto c = small_synth(8);
    c.cluster_spread = 0.0;
    c.modality_noise = 0.0;
    const auto ds = generate_synthetic(c);
    std::vector<ClassId> all(ds.split.seen);
    all.insert(all.end(), ds.split.unseen.begin(), ds.split.unseen.end());

    // Identity E_t: representatives are the mean raw knowledge vectors, and
    // every sample is embedded exactly onto its own class representative.
    auto reps_for = [&](std::span<const ClassId> classes) {
        std::vector<double> v;
        for (auto cls : classes) {
            const auto& k = ds.knowledge_for(cls);
            for (std::size_t d = 0; d < ds.text_dim; ++d) {
                double s = 0.0;
                for (const auto& e : k.embeddings) s += e[d];
                v.push_back(s / static_cast<double>(k.embeddings.size()));
            }
        }
        return Tensor::from({classes.size(), ds.text_dim}, std::move(v));
    };
    auto oracle = [&](Partition part, std::span<const ClassId> candidates) {
        std::vector<ClassId> labels;
        for (auto i : ds.partition(part)) labels.push_back(ds.records[i].class_id);
        auto preds = predict(reps_for(labels), reps_for(candidates), candidates);
        for (std::size_t b = 0; b < preds.size(); ++b) preds[b].true_class = labels[b];
        return preds;
    };
    const double S = mean_class_accuracy(oracle(Partition::test_seen, all), ds.split.seen);
    const double U = mean_class_accuracy(oracle(Partition::test_unseen, all), ds.split.unseen);
    const double Z = mean_class_accuracy(oracle(Partition::test_unseen, ds.split.unseen), ds.split.unseen);
    CHECK(S == 1.0);
    CHECK(U == 1.0);
    CHECK(Z == 1.0);
    CHECK(harmonic_mean(S, U) == 1.0);
}

TEST_CASE("ZSL accuracy is never below GZSL unseen accuracy") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const auto ds = generate_synthetic(small_synth(seed));
        const auto r = evaluate(random_model(ds, static_cast<std::uint32_t>(seed)), ds);
        CAPTURE(seed);
        CHECK(r.ZSL >= r.U);
        CHECK(r.HM == harmonic_mean(r.S, r.U));
        for (double v : {r.S, r.U, r.ZSL}) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
    }
}

TEST_CASE("random weights score near chance") {
    // Mean class accuracy of an uninformed classifier averages 1/C over
    // models; 40 draws put the Monte-Carlo mean within 0.1 of it.
    double zsl = 0.0, u = 0.0, s = 0.0;
    constexpr int kDraws = 40;
    for (int i = 0; i < kDraws; ++i) {
        const auto ds = generate_synthetic(small_synth(100 + i));
        const auto r = evaluate(random_model(ds, static_cast<std::uint32_t>(i)), ds);
        zsl += r.ZSL / kDraws;
        u += r.U / kDraws;
        s += r.S / kDraws;
    }
    CHECK(std::abs(zsl - 1.0 / 4.0) < 0.1);
    CHECK(std::abs(u - 1.0 / 8.0) < 0.1);
    CHECK(std::abs(s - 1.0 / 8.0) < 0.1);
}

TEST_CASE("evaluate respects the mode and is deterministic") {
    const auto ds = generate_synthetic(small_synth(2));
    const auto model = random_model(ds, 9);
    const auto both = evaluate(model, ds, EvalMode::both);
    CHECK(evaluate(model, ds, EvalMode::both) == both);
    const auto reloaded = load_checkpoint_bytes(checkpoint_bytes(model));
    CHECK(evaluate(reloaded, ds, EvalMode::both) == both);

    const auto g = evaluate(model, ds, EvalMode::gzsl);
    CHECK(g.S == both.S);
    CHECK(g.U == both.U);
    CHECK(g.ZSL == 0.0);
    const auto z = evaluate(model, ds, EvalMode::zsl);
    CHECK(z.ZSL == both.ZSL);
    CHECK(z.S == 0.0);

    CHECK(parse_eval_mode("zsl") == EvalMode::zsl);
    CHECK_THROWS_AS(parse_eval_mode("GZSL"), ConfigError);
}

TEST_CASE("metrics format") {
    EvalResult r{0.8398, 0.2721, harmonic_mean(0.8398, 0.2721), 1.0};
    CHECK(format_metrics(r) == "S=83.98 U=27.21 HM=41.10 ZSL=100.00");
    CHECK(format_metrics(r, EvalMode::gzsl) == "S=83.98 U=27.21 HM=41.10");
    CHECK(format_metrics(r, EvalMode::zsl) == "ZSL=100.00");
}

TEST_CASE("embedding export reloads bit for bit") {
    const auto ds = generate_synthetic(small_synth(6));
    const auto model = random_model(ds, 2);
    const auto path = std::filesystem::temp_directory_path() / "kda_evalcli_export" / "emb.jsonl";
    export_embeddings(model, ds, path);
    const auto rows = load_embeddings(path);
    const auto expected = compute_embeddings(model, ds);
    REQUIRE(rows.size() == ds.records.size() + ds.knowledge.size());
    REQUIRE(rows.size() == expected.size());
    std::size_t knowledge_rows = 0;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        CHECK(rows[i].id == expected[i].id);
        CHECK(rows[i].class_id == expected[i].class_id);
        CHECK(rows[i].knowledge == expected[i].knowledge);
        CHECK(rows[i].embedding == expected[i].embedding);
        knowledge_rows += rows[i].knowledge;
    }
    CHECK(knowledge_rows == ds.knowledge.size());

    // Sample rows equal the eval-mode embedding computed directly.
    const std::size_t first[] = {0};
    const auto sample = gather_samples(ds, first);
    const auto direct = model.embed_audio_visual(sample.audio, sample.visual);
    CHECK(std::vector<double>(direct.data().begin(), direct.data().end()) == rows[0].embedding);

    std::ofstream(path, std::ios::app) << "{\"id\":\"x\",\"class\":0,\"knowledge\":false,\"embedding\":[1]}\n";
    const auto where = ":" + std::to_string(rows.size() + 2) + ":";
    CHECK_THROWS_WITH_AS(load_embeddings(path), doctest::Contains(where.c_str()), ParseError);
    CHECK_THROWS_AS(export_embeddings(model, ds, "/proc/kda/nope.jsonl"), Error);
}

TEST_CASE("cli eval on the golden fixture prints the golden metrics") {
    auto args = golden_data_flags();
    args.insert(args.begin(), "eval");
    args.insert(args.end(), {"--checkpoint", (kGolden / "model.kda").string()});
    const auto run = cli(args);
    CHECK(run.code == kExitOk);
    CHECK(run.out == read_file(kGolden / "expected_eval.txt"));
}

TEST_CASE("cli check-grad passes on the default tiny config") {
    const auto run = cli({"check-grad"});
    CHECK(run.code == kExitOk);
    CHECK(run.out.ends_with("PASS\n"));
    CHECK(run.out.find("kda_objective") != std::string::npos);
}

TEST_CASE("cli usage errors exit 1 with usage text") {
    auto missing = cli({"eval", "--features", "f.jsonl"});
    CHECK(missing.code == kExitValidation);
    CHECK(missing.err.find("Usage:") != std::string::npos);
    CHECK(missing.err.find("--checkpoint") != std::string::npos);

    auto unknown = cli({"check-grad", "--frobnicate"});
    CHECK(unknown.code == kExitValidation);
    CHECK(unknown.err.find("Usage:") != std::string::npos);

    CHECK(cli({}).code == kExitValidation);
    CHECK(cli({"fly"}).code == kExitValidation);

    auto bad_mode = golden_data_flags();
    bad_mode.insert(bad_mode.begin(), "eval");
    bad_mode.insert(bad_mode.end(), {"--checkpoint", "x", "--mode", "all"});
    CHECK(cli(bad_mode).code == kExitValidation);

    CHECK(cli({"--help"}).code == kExitOk);
}

TEST_CASE("cli validation and runtime errors") {
    const auto dir = std::filesystem::temp_directory_path() / "kda_evalcli_errors";
    std::filesystem::create_directories(dir);
    std::ofstream(dir / "bad.cfg") << "seen_classes = many\n";
    auto bad_cfg = cli({"gen-synth", "--config", (dir / "bad.cfg").string(), "--out", dir.string()});
    CHECK(bad_cfg.code == kExitValidation);
    CHECK(bad_cfg.err.find("bad.cfg:1:") != std::string::npos);

    auto args = golden_data_flags();
    args.insert(args.begin(), "eval");
    args.insert(args.end(), {"--checkpoint", (dir / "absent.kda").string()});
    auto absent = cli(args);
    CHECK(absent.code == kExitRuntime);
    CHECK(absent.err.find("absent.kda") != std::string::npos);

    // A dataset whose dims do not fit the golden checkpoint.
    auto other = cli({"gen-synth", "--out", (dir / "other").string()});
    REQUIRE(other.code == kExitOk);
    auto mismatch = cli({"eval", "--features", (dir / "other" / "features.jsonl").string(), "--knowledge",
                         (dir / "other" / "knowledge.jsonl").string(), "--split",
                         (dir / "other" / "split.json").string(), "--checkpoint", (kGolden / "model.kda").string()});
    CHECK(mismatch.code == kExitValidation);
    CHECK(mismatch.err.find("dims") != std::string::npos);

    std::ofstream(dir / "other" / "split.json") << "{\"seen\": [0], \"unseen\": []}";
    auto invalid = cli({"eval", "--features", (dir / "other" / "features.jsonl").string(), "--knowledge",
                        (dir / "other" / "knowledge.jsonl").string(), "--split",
                        (dir / "other" / "split.json").string(), "--checkpoint", (kGolden / "model.kda").string()});
    CHECK(invalid.code == kExitValidation);
}

TEST_CASE("cli pipeline: gen-synth, train, eval, export") {
    const auto dir = std::filesystem::temp_directory_path() / "kda_evalcli_pipeline";
    std::filesystem::remove_all(dir);
    const auto data = dir / "data";
    REQUIRE(cli({"gen-synth", "--config", (kGolden / "synth.cfg").string(), "--out", data.string(), "--seed", "4"})
                .code == kExitOk);
    const std::vector<std::string> flags = {"--features", (data / "features.jsonl").string(), "--knowledge",
                                            (data / "knowledge.jsonl").string(), "--split",
                                            (data / "split.json").string()};
    auto with = [&](std::string cmd, std::vector<std::string> extra) {
        std::vector<std::string> a{std::move(cmd)};
        a.insert(a.end(), flags.begin(), flags.end());
        a.insert(a.end(), extra.begin(), extra.end());
        return a;
    };
    const auto train = cli(with("train", {"--config", (kGolden / "train.cfg").string(), "--out", (dir / "run").string()}));
    REQUIRE(train.code == kExitOk);
    CHECK(train.out.find("epoch 15 ") != std::string::npos);
    for (const char* f : {"model.kda", "metrics.csv", "report.json"}) CHECK(std::filesystem::exists(dir / "run" / f));

    const auto eval = cli(with("eval", {"--checkpoint", (dir / "run" / "model.kda").string()}));
    REQUIRE(eval.code == kExitOk);
    // The final line of train reports the metrics of the saved checkpoint.
    const auto last = train.out.substr(train.out.rfind(": S=") + 2);
    CHECK(last == eval.out);

    const auto zsl = cli(with("eval", {"--checkpoint", (dir / "run" / "model.kda").string(), "--mode", "zsl"}));
    CHECK(zsl.out.starts_with("ZSL="));

    const auto exported =
        cli(with("export-embeddings", {"--checkpoint", (dir / "run" / "model.kda").string(), "--out",
                                       (dir / "emb.jsonl").string()}));
    REQUIRE(exported.code == kExitOk);
    CHECK(load_embeddings(dir / "emb.jsonl").size() == 60 + 5);
}
