#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <functional>
#include <set>
#include <sstream>

#include "kda/datahub.hpp"

using namespace kda;

namespace {

SynthConfig small_synth(std::uint64_t seed = 3) {
    SynthConfig c;
    c.seen_classes = 3;
    c.unseen_classes = 2;
    c.samples_per_class = 10;
    c.audio_dim = 5;
    c.visual_dim = 4;
    c.text_dim = 3;
    c.seed = seed;
    return c;
}

struct Files {
    std::string features, knowledge, split;
};

Files serialize(const Dataset& ds) {
    std::ostringstream f, k, s;
    write_features(ds, f);
    write_knowledge(ds, k);
    write_split(ds, s);
    return {f.str(), k.str(), s.str()};
}

Dataset parse(const Files& files) {
    std::istringstream f(files.features), k(files.knowledge), s(files.split);
    return read_dataset(f, k, s);
}

std::string error_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.what();
    }
    return "";
}

bool same(const Dataset& a, const Dataset& b) {
    if (a.audio_dim != b.audio_dim || a.visual_dim != b.visual_dim || a.text_dim != b.text_dim) return false;
    if (a.records.size() != b.records.size() || a.knowledge.size() != b.knowledge.size()) return false;
    for (std::size_t i = 0; i < a.records.size(); ++i) {
        const auto &x = a.records[i], &y = b.records[i];
        if (x.id != y.id || x.class_id != y.class_id || x.audio != y.audio || x.visual != y.visual) return false;
    }
    for (std::size_t i = 0; i < a.knowledge.size(); ++i) {
        const auto &x = a.knowledge[i], &y = b.knowledge[i];
        if (x.class_id != y.class_id || x.name != y.name || x.embeddings != y.embeddings) return false;
    }
    return a.split.seen == b.split.seen && a.split.unseen == b.split.unseen && a.split.train == b.split.train &&
           a.split.test_seen == b.split.test_seen && a.split.test_unseen == b.split.test_unseen;
}

double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s;
}

}  // namespace

TEST_CASE("save then load is structurally identical") {
    const auto ds = generate_synthetic(small_synth());
    const auto files = serialize(ds);
    const auto back = parse(files);
    CHECK(same(ds, back));
    CHECK(serialize(back).features == files.features);
    CHECK(serialize(back).knowledge == files.knowledge);
    CHECK(serialize(back).split == files.split);
}

TEST_CASE("round trip preserves awkward doubles exactly") {
    auto ds = generate_synthetic(small_synth());
    ds.records[0].audio = {-0.0, 5e-324, 1.0 / 3.0, 1e300, -2.5};
    const auto back = parse(serialize(ds));
    CHECK(back.records[0].audio == ds.records[0].audio);
    CHECK(std::signbit(back.records[0].audio[0]));
}

TEST_CASE("filesystem round trip") {
    const auto dir = std::filesystem::temp_directory_path() / "kda_datahub_roundtrip";
    std::filesystem::remove_all(dir);
    const auto paths = DatasetPaths::in_directory(dir);
    const auto ds = generate_synthetic(small_synth());
    save_dataset(ds, paths);
    CHECK(same(ds, load_dataset(paths)));
    CHECK_THROWS_AS(load_dataset(DatasetPaths::in_directory(dir / "missing")), IoError);
    std::filesystem::remove_all(dir);
}

TEST_CASE("malformed lines report the line number") {
    auto files = serialize(generate_synthetic(small_synth()));
    SUBCASE("broken json") {
        auto lines = files.features;
        const auto second = lines.find('\n', lines.find('\n') + 1);
        lines.insert(second + 1, "{\"id\": \n");
        files.features = lines;
        auto msg = error_of([&] { parse(files); });
        CHECK(msg.find("features:3:") != std::string::npos);
    }
    SUBCASE("fractional class id") {
        files.knowledge += "{\"class\": 1.5, \"name\": \"x\", \"embeddings\": [[0,0,0]]}\n";
        CHECK_THROWS_AS(parse(files), ParseError);
    }
    SUBCASE("integral float class id is accepted as exact") {
        files.knowledge += "{\"class\": 99.0, \"name\": \"x\", \"embeddings\": [[0,0,0]]}\n";
        CHECK_NOTHROW(parse(files));
    }
    SUBCASE("non-numeric feature") {
        files.features += "{\"id\": \"z\", \"class\": 0, \"audio\": [1,2,\"3\",4,5], \"visual\": [1,2,3,4]}\n";
        CHECK_THROWS_AS(parse(files), ParseError);
    }
    SUBCASE("missing key") {
        files.features += "{\"id\": \"z\", \"audio\": [1,2,3,4,5], \"visual\": [1,2,3,4]}\n";
        auto msg = error_of([&] { parse(files); });
        CHECK(msg.find("missing key 'class'") != std::string::npos);
    }
    SUBCASE("missing header") {
        files.knowledge = "";
        CHECK_THROWS_AS(parse(files), ParseError);
    }
}

TEST_CASE("loader rejects every invariant violation") {
    const auto base = generate_synthetic(small_synth());
    struct Mutation {
        const char* rule;
        std::function<void(Dataset&)> apply;
    };
    const std::vector<Mutation> mutations = {
        {"knowledge coverage", [](Dataset& d) { d.knowledge.erase(d.knowledge.begin()); }},
        {"unseen classes", [](Dataset& d) {
             d.split.unseen.clear();
             d.split.test_unseen.clear();
         }},
        {"seen/unseen disjoint", [](Dataset& d) { d.split.unseen.push_back(d.split.seen[0]); }},
        {"partition classes", [](Dataset& d) {
             auto r = d.records[d.record_index(d.split.test_unseen[0])];
             r.id = "extra";
             d.records.push_back(r);
             d.split.train.push_back("extra");
         }},
        {"partition classes", [](Dataset& d) {
             auto r = d.records[d.record_index(d.split.test_seen[0])];
             r.id = "extra";
             d.records.push_back(r);
             d.split.test_unseen.push_back("extra");
         }},
        {"disjoint partitions", [](Dataset& d) { d.split.test_seen.push_back(d.split.train[0]); }},
        {"disjoint partitions", [](Dataset& d) { d.split.train.push_back(d.split.train[0]); }},
        {"partition ids", [](Dataset& d) { d.split.train.push_back("nope"); }},
        {"unique ids", [](Dataset& d) { d.records.push_back(d.records[0]); }},
        {"unique knowledge", [](Dataset& d) { d.knowledge.push_back(d.knowledge[0]); }},
        {"K >= 1", [](Dataset& d) { d.knowledge[1].embeddings.clear(); }},
        {"text dim", [](Dataset& d) { d.knowledge[2].embeddings[1].push_back(0.0); }},
        {"audio dim", [](Dataset& d) { d.records[4].audio.pop_back(); }},
        {"visual dim", [](Dataset& d) { d.records[7].visual.push_back(1.0); }},
        {"knowledge coverage", [](Dataset& d) { d.split.unseen.push_back(77); }},
        {"seen classes", [](Dataset& d) { d.split.seen.push_back(d.split.seen[0]); }},
    };
    for (const auto& m : mutations) {
        const std::string rule = m.rule;
        CAPTURE(rule);
        auto d = base;
        m.apply(d);
        const auto files = serialize(d);
        auto msg = error_of([&] { parse(files); });
        CAPTURE(msg);
        CHECK(msg.rfind(rule, 0) == 0);
        CHECK_THROWS_AS(parse(files), ValidationError);
    }
}

TEST_CASE("synthetic generation is a pure function of the config") {
    CHECK(serialize(generate_synthetic(small_synth(9))).features ==
          serialize(generate_synthetic(small_synth(9))).features);
    CHECK(serialize(generate_synthetic(small_synth(9))).knowledge ==
          serialize(generate_synthetic(small_synth(9))).knowledge);
    CHECK(serialize(generate_synthetic(small_synth(9))).split ==
          serialize(generate_synthetic(small_synth(9))).split);
    CHECK(serialize(generate_synthetic(small_synth(9))).features !=
          serialize(generate_synthetic(small_synth(10))).features);
}

TEST_CASE("synthetic split layout") {
    auto cfg = small_synth();
    const auto ds = generate_synthetic(cfg);
    CHECK(ds.records.size() == 50);
    CHECK(ds.split.seen == std::vector<ClassId>{0, 1, 2});
    CHECK(ds.split.unseen == std::vector<ClassId>{3, 4});
    CHECK(ds.split.test_seen.size() == 6);  // 20% of 3 x 10
    CHECK(ds.split.train.size() == 24);
    CHECK(ds.split.test_unseen.size() == 20);
    for (const auto& k : ds.knowledge) CHECK(k.embeddings.size() == 3);
    for (auto c : ds.split.seen) {
        std::size_t held = 0;
        for (auto i : ds.partition(Partition::test_seen)) held += ds.records[i].class_id == c;
        CHECK(held == 2);
    }
    cfg.seen_classes = 0;
    CHECK_THROWS_AS(generate_synthetic(cfg), ConfigError);
    cfg = small_synth();
    cfg.modality_noise = -1;
    CHECK_THROWS_AS(generate_synthetic(cfg), ConfigError);
}

TEST_CASE("zero noise and spread collapse each class to one point") {
    auto cfg = small_synth();
    cfg.modality_noise = 0.0;
    cfg.cluster_spread = 0.0;
    const auto ds = generate_synthetic(cfg);
    for (const auto& r : ds.records) {
        const auto& first = ds.records[static_cast<std::size_t>(r.class_id) * cfg.samples_per_class];
        CHECK(r.audio == first.audio);
        CHECK(r.visual == first.visual);
    }
    for (const auto& k : ds.knowledge) {
        for (const auto& e : k.embeddings) CHECK(e == k.embeddings[0]);
    }
}

TEST_CASE("nearest class prototype recovers every label on clean data") {
    for (double noise : {0.0, 0.1}) {
        auto cfg = small_synth(21);
        cfg.samples_per_class = 30;
        cfg.audio_dim = 64;
        cfg.visual_dim = 64;
        cfg.modality_noise = noise;
        const auto ds = generate_synthetic(cfg);
        // Brute force: per-class centroids of the concatenated features.
        const std::size_t classes = cfg.seen_classes + cfg.unseen_classes;
        std::vector<std::vector<double>> centroid(classes, std::vector<double>(128, 0.0));
        for (const auto& r : ds.records) {
            for (std::size_t j = 0; j < 64; ++j) {
                centroid[r.class_id][j] += r.audio[j] / 30.0;
                centroid[r.class_id][64 + j] += r.visual[j] / 30.0;
            }
        }
        for (std::size_t a = 0; a < classes; ++a)
            for (std::size_t b = a + 1; b < classes; ++b) CHECK(sq_dist(centroid[a], centroid[b]) > 0.0);
        std::size_t correct = 0;
        for (const auto& r : ds.records) {
            std::vector<double> x(r.audio);
            x.insert(x.end(), r.visual.begin(), r.visual.end());
            std::size_t best = 0;
            for (std::size_t c = 1; c < classes; ++c)
                if (sq_dist(x, centroid[c]) < sq_dist(x, centroid[best])) best = c;
            correct += static_cast<ClassId>(best) == r.class_id;
        }
        CHECK(correct == ds.records.size());
    }
}

TEST_CASE("batches") {
    std::vector<std::size_t> items(10);
    for (std::size_t i = 0; i < 10; ++i) items[i] = 100 + i;

    auto eval = make_batches(items, 4, 1, false);
    REQUIRE(eval.size() == 3);
    CHECK(eval[0].size() == 4);
    CHECK(eval[1].size() == 4);
    CHECK(eval[2].size() == 2);
    CHECK(make_batches(items, 4, 1, false) == eval);

    auto train = make_batches(items, 3, 1, true);
    CHECK(train.size() == 3);  // the trailing singleton is dropped
    CHECK_THROWS_AS(make_batches(items, 1, 1, true), DomainError);
    CHECK_THROWS_AS(make_batches({}, 4, 1, false), DomainError);
    CHECK(make_batches(items, 1, 1, false).size() == 10);

    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        for (std::size_t bs : {2, 3, 4, 7, 10, 16}) {
            auto bs_out = make_batches(items, bs, seed, false);
            std::multiset<std::size_t> seen;
            for (const auto& b : bs_out) seen.insert(b.begin(), b.end());
            CHECK(seen == std::multiset<std::size_t>(items.begin(), items.end()));
        }
    }
}
