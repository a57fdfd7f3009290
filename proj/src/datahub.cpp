#include "kda/datahub.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>
#include <unordered_set>

#include <json.hpp>

namespace kda {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

DatasetPaths DatasetPaths::in_directory(const std::filesystem::path& dir) {
    return {dir / "features.jsonl", dir / "knowledge.jsonl", dir / "split.json"};
}

namespace {

[[noreturn]] void invalid(const std::string& rule, const std::string& detail) {
    throw ValidationError(rule + ": " + detail);
}

std::string id_list_name(Partition p) {
    switch (p) {
        case Partition::train: return "train";
        case Partition::test_seen: return "test_seen";
        case Partition::test_unseen: return "test_unseen";
    }
    return "?";
}

}  // namespace

void Dataset::validate() {
    if (audio_dim == 0 || visual_dim == 0 || text_dim == 0) {
        invalid("dims", "audio_dim, visual_dim and text_dim must be >= 1");
    }

    knowledge_index_.clear();
    for (std::size_t i = 0; i < knowledge.size(); ++i) {
        const auto& k = knowledge[i];
        if (!knowledge_index_.emplace(k.class_id, i).second) {
            invalid("unique knowledge", "class " + std::to_string(k.class_id) + " has more than one entry");
        }
        if (k.embeddings.empty()) {
            invalid("K >= 1", "class " + std::to_string(k.class_id) + " has no description embeddings");
        }
        for (std::size_t j = 0; j < k.embeddings.size(); ++j) {
            if (k.embeddings[j].size() != text_dim) {
                invalid("text dim", "class " + std::to_string(k.class_id) + " embedding " + std::to_string(j) +
                                        " has length " + std::to_string(k.embeddings[j].size()) +
                                        ", expected " + std::to_string(text_dim));
            }
        }
    }

    record_index_.clear();
    for (std::size_t i = 0; i < records.size(); ++i) {
        const auto& r = records[i];
        if (!record_index_.emplace(r.id, i).second) invalid("unique ids", "sample '" + r.id + "' repeated");
        if (r.audio.size() != audio_dim) {
            invalid("audio dim", "sample '" + r.id + "' has audio length " + std::to_string(r.audio.size()) +
                                     ", expected " + std::to_string(audio_dim));
        }
        if (r.visual.size() != visual_dim) {
            invalid("visual dim", "sample '" + r.id + "' has visual length " +
                                      std::to_string(r.visual.size()) + ", expected " +
                                      std::to_string(visual_dim));
        }
        if (!knowledge_index_.contains(r.class_id)) {
            invalid("knowledge coverage", "sample '" + r.id + "' references class " +
                                              std::to_string(r.class_id) + " with no knowledge entry");
        }
    }

    if (split.seen.empty()) invalid("seen classes", "seen set is empty");
    if (split.unseen.empty()) invalid("unseen classes", "unseen set is empty; zero-shot evaluation is undefined");
    std::unordered_set<ClassId> seen_set;
    for (auto c : split.seen) {
        if (!seen_set.insert(c).second) invalid("seen classes", "class " + std::to_string(c) + " listed twice");
    }
    std::unordered_set<ClassId> unseen_set;
    for (auto c : split.unseen) {
        if (seen_set.contains(c)) {
            invalid("seen/unseen disjoint", "class " + std::to_string(c) + " is both seen and unseen");
        }
        if (!unseen_set.insert(c).second) {
            invalid("unseen classes", "class " + std::to_string(c) + " listed twice");
        }
    }
    for (const auto* set : {&split.seen, &split.unseen}) {
        for (auto c : *set) {
            if (!knowledge_index_.contains(c)) {
                invalid("knowledge coverage", "split class " + std::to_string(c) + " has no knowledge entry");
            }
        }
    }

    std::unordered_set<std::string> assigned;
    for (auto p : {Partition::train, Partition::test_seen, Partition::test_unseen}) {
        const auto& ids = p == Partition::train       ? split.train
                          : p == Partition::test_seen ? split.test_seen
                                                      : split.test_unseen;
        const auto& allowed = p == Partition::test_unseen ? unseen_set : seen_set;
        const char* kind = p == Partition::test_unseen ? "unseen" : "seen";
        for (const auto& id : ids) {
            auto it = record_index_.find(id);
            if (it == record_index_.end()) {
                invalid("partition ids", id_list_name(p) + " sample '" + id + "' is not in the features file");
            }
            if (!assigned.insert(id).second) {
                invalid("disjoint partitions", "sample '" + id + "' appears in more than one partition");
            }
            const auto cls = records[it->second].class_id;
            if (!allowed.contains(cls)) {
                invalid("partition classes", id_list_name(p) + " sample '" + id + "' has class " +
                                                 std::to_string(cls) + " which is not " + kind);
            }
        }
    }
}

std::size_t Dataset::record_index(const std::string& id) const {
    auto it = record_index_.find(id);
    if (it == record_index_.end()) throw IndexError("unknown sample id '" + id + "'");
    return it->second;
}

const ClassKnowledge& Dataset::knowledge_for(ClassId id) const {
    auto it = knowledge_index_.find(id);
    if (it == knowledge_index_.end()) throw IndexError("no knowledge for class " + std::to_string(id));
    return knowledge[it->second];
}

std::vector<std::size_t> Dataset::partition(Partition p) const {
    const auto& ids = p == Partition::train       ? split.train
                      : p == Partition::test_seen ? split.test_seen
                                                  : split.test_unseen;
    std::vector<std::size_t> out;
    out.reserve(ids.size());
    for (const auto& id : ids) out.push_back(record_index(id));
    return out;
}

bool Dataset::is_seen(ClassId id) const {
    return std::find(split.seen.begin(), split.seen.end(), id) != split.seen.end();
}

namespace {

class LineContext {
public:
    LineContext(std::string file, std::size_t line) : file_(std::move(file)), line_(line) {}

    [[noreturn]] void fail(const std::string& what) const {
        throw ParseError(file_ + ":" + std::to_string(line_) + ": " + what);
    }

    const json& field(const json& obj, const char* key) const {
        auto it = obj.find(key);
        if (it == obj.end()) fail(std::string("missing key '") + key + "'");
        return *it;
    }

    double number(const json& v, const std::string& what) const {
        if (!v.is_number()) fail(what + " must be a number");
        return v.get<double>();
    }

    std::int64_t integer(const json& v, const std::string& what) const {
        if (v.is_number_integer()) return v.get<std::int64_t>();
        if (v.is_number_float()) {
            const double d = v.get<double>();
            // Exactly representable integers only.
            if (std::isfinite(d) && d == std::trunc(d) && std::fabs(d) <= 9007199254740992.0) {
                return static_cast<std::int64_t>(d);
            }
        }
        fail(what + " must be an exact integer");
    }

    std::size_t dim(const json& obj, const char* key) const {
        const auto v = integer(field(obj, key), key);
        if (v < 1) fail(std::string(key) + " must be >= 1");
        return static_cast<std::size_t>(v);
    }

    std::vector<double> vector(const json& v, const std::string& what) const {
        if (!v.is_array()) fail(what + " must be an array of numbers");
        std::vector<double> out;
        out.reserve(v.size());
        for (std::size_t i = 0; i < v.size(); ++i) out.push_back(number(v[i], what + "[" + std::to_string(i) + "]"));
        return out;
    }

    std::string string(const json& v, const std::string& what) const {
        if (!v.is_string()) fail(what + " must be a string");
        return v.get<std::string>();
    }

private:
    std::string file_;
    std::size_t line_;
};

// Calls fn(line_number, object) for every non-blank line.
template <typename Fn>
void for_each_json_line(std::istream& in, const std::string& name, Fn&& fn) {
    std::string line;
    std::size_t number = 0;
    while (std::getline(in, line)) {
        ++number;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        LineContext ctx(name, number);
        json obj = json::parse(line, nullptr, false);
        if (obj.is_discarded()) ctx.fail("malformed JSON");
        if (!obj.is_object()) ctx.fail("expected a JSON object");
        fn(ctx, obj);
    }
}

}  // namespace

Dataset read_dataset(std::istream& features, std::istream& knowledge, std::istream& split,
                     const std::string& features_name, const std::string& knowledge_name,
                     const std::string& split_name) {
    Dataset ds;

    bool header = false;
    for_each_json_line(features, features_name, [&](const LineContext& ctx, const json& obj) {
        if (!header) {
            ds.audio_dim = ctx.dim(obj, "audio_dim");
            ds.visual_dim = ctx.dim(obj, "visual_dim");
            header = true;
            return;
        }
        FeatureRecord r;
        r.id = ctx.string(ctx.field(obj, "id"), "id");
        r.class_id = ctx.integer(ctx.field(obj, "class"), "class");
        r.audio = ctx.vector(ctx.field(obj, "audio"), "audio");
        r.visual = ctx.vector(ctx.field(obj, "visual"), "visual");
        ds.records.push_back(std::move(r));
    });
    if (!header) throw ParseError(features_name + ":1: missing header line");

    header = false;
    for_each_json_line(knowledge, knowledge_name, [&](const LineContext& ctx, const json& obj) {
        if (!header) {
            ds.text_dim = ctx.dim(obj, "text_dim");
            header = true;
            return;
        }
        ClassKnowledge k;
        k.class_id = ctx.integer(ctx.field(obj, "class"), "class");
        k.name = ctx.string(ctx.field(obj, "name"), "name");
        const auto& emb = ctx.field(obj, "embeddings");
        if (!emb.is_array()) ctx.fail("embeddings must be an array of arrays");
        for (std::size_t i = 0; i < emb.size(); ++i) {
            k.embeddings.push_back(ctx.vector(emb[i], "embeddings[" + std::to_string(i) + "]"));
        }
        ds.knowledge.push_back(std::move(k));
    });
    if (!header) throw ParseError(knowledge_name + ":1: missing header line");

    std::stringstream buffer;
    buffer << split.rdbuf();
    json s = json::parse(buffer.str(), nullptr, false);
    LineContext sctx(split_name, 1);
    if (s.is_discarded()) sctx.fail("malformed JSON");
    if (!s.is_object()) sctx.fail("expected a JSON object");
    auto class_list = [&](const char* key) {
        const auto& v = sctx.field(s, key);
        if (!v.is_array()) sctx.fail(std::string(key) + " must be an array");
        std::vector<ClassId> out;
        for (const auto& c : v) out.push_back(sctx.integer(c, key));
        return out;
    };
    auto id_list = [&](const char* key) {
        const auto& v = sctx.field(s, key);
        if (!v.is_array()) sctx.fail(std::string(key) + " must be an array");
        std::vector<std::string> out;
        for (const auto& c : v) out.push_back(sctx.string(c, key));
        return out;
    };
    ds.split.seen = class_list("seen");
    ds.split.unseen = class_list("unseen");
    ds.split.train = id_list("train");
    ds.split.test_seen = id_list("test_seen");
    ds.split.test_unseen = id_list("test_unseen");

    ds.validate();
    return ds;
}

Dataset load_dataset(const DatasetPaths& paths) {
    auto open = [](const std::filesystem::path& p) {
        std::ifstream in(p, std::ios::binary);
        if (!in) throw IoError("cannot open " + p.string());
        return in;
    };
    auto f = open(paths.features);
    auto k = open(paths.knowledge);
    auto s = open(paths.split);
    return read_dataset(f, k, s, paths.features.string(), paths.knowledge.string(), paths.split.string());
}

void write_features(const Dataset& ds, std::ostream& out) {
    ordered_json header;
    header["audio_dim"] = ds.audio_dim;
    header["visual_dim"] = ds.visual_dim;
    out << header.dump() << '\n';
    for (const auto& r : ds.records) {
        ordered_json line;
        line["id"] = r.id;
        line["class"] = r.class_id;
        line["audio"] = r.audio;
        line["visual"] = r.visual;
        out << line.dump() << '\n';
    }
}

void write_knowledge(const Dataset& ds, std::ostream& out) {
    ordered_json header;
    header["text_dim"] = ds.text_dim;
    out << header.dump() << '\n';
    for (const auto& k : ds.knowledge) {
        ordered_json line;
        line["class"] = k.class_id;
        line["name"] = k.name;
        line["embeddings"] = k.embeddings;
        out << line.dump() << '\n';
    }
}

void write_split(const Dataset& ds, std::ostream& out) {
    ordered_json s;
    s["seen"] = ds.split.seen;
    s["unseen"] = ds.split.unseen;
    s["train"] = ds.split.train;
    s["test_seen"] = ds.split.test_seen;
    s["test_unseen"] = ds.split.test_unseen;
    out << s.dump() << '\n';
}

void save_dataset(const Dataset& ds, const DatasetPaths& paths) {
    auto write = [](const std::filesystem::path& p, auto&& writer) {
        ensure_parent_directory(p);
        std::ofstream out(p, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + p.string());
        writer(out);
        if (!out) throw IoError("write failed for " + p.string());
    };
    write(paths.features, [&](std::ostream& o) { write_features(ds, o); });
    write(paths.knowledge, [&](std::ostream& o) { write_knowledge(ds, o); });
    write(paths.split, [&](std::ostream& o) { write_split(ds, o); });
}

void SynthConfig::validate() const {
    if (seen_classes < 1 || unseen_classes < 1) throw ConfigError("synth: class counts must be >= 1");
    if (samples_per_class < 1) throw ConfigError("synth: samples_per_class must be >= 1");
    if (audio_dim < 1 || visual_dim < 1 || text_dim < 1 || latent_dim < 1) {
        throw ConfigError("synth: dims must be >= 1");
    }
    if (descriptions_per_class < 1) throw ConfigError("synth: descriptions_per_class must be >= 1");
    if (!(cluster_spread >= 0.0) || !std::isfinite(cluster_spread)) {
        throw ConfigError("synth: cluster_spread must be finite and >= 0");
    }
    if (!(modality_noise >= 0.0) || !std::isfinite(modality_noise)) {
        throw ConfigError("synth: modality_noise must be finite and >= 0");
    }
    if (!(min_separation >= 0.0) || !std::isfinite(min_separation)) {
        throw ConfigError("synth: min_separation must be finite and >= 0");
    }
    if (!(test_fraction >= 0.0 && test_fraction < 1.0)) {
        throw ConfigError("synth: test_fraction must lie in [0, 1)");
    }
}

namespace {

// Row-major [rows x cols] with N(0, 1/rows) entries.
std::vector<double> random_map(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, 1.0 / std::sqrt(static_cast<double>(rows)));
    std::vector<double> m(rows * cols);
    for (auto& x : m) x = n(rng);
    return m;
}

std::vector<double> project(const std::vector<double>& z, const std::vector<double>& map, std::size_t cols,
                            double noise, std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    std::vector<double> out(cols, 0.0);
    for (std::size_t i = 0; i < z.size(); ++i) {
        for (std::size_t j = 0; j < cols; ++j) out[j] += z[i] * map[i * cols + j];
    }
    // Draw even at zero noise so the stream does not depend on the noise level.
    for (auto& x : out) x += noise * n(rng);
    return out;
}

// Standard normal prototypes, redrawn until every pair is at least
// `min_separation` apart.
std::vector<std::vector<double>> draw_prototypes(std::size_t classes, std::size_t dim, double min_separation,
                                                 std::mt19937_64& rng) {
    std::normal_distribution<double> unit(0.0, 1.0);
    std::vector<std::vector<double>> out;
    for (std::size_t attempts = 0; out.size() < classes; ++attempts) {
        if (attempts > 100000) {
            throw ConfigError("synth: cannot place " + std::to_string(classes) + " prototypes " +
                              std::to_string(min_separation) + " apart in " + std::to_string(dim) + " dims");
        }
        std::vector<double> z(dim);
        for (auto& x : z) x = unit(rng);
        bool far = true;
        for (const auto& q : out) {
            double d = 0.0;
            for (std::size_t i = 0; i < dim; ++i) d += (z[i] - q[i]) * (z[i] - q[i]);
            far = far && std::sqrt(d) >= min_separation;
        }
        if (far) out.push_back(std::move(z));
    }
    return out;
}

}  // namespace

Dataset generate_synthetic(const SynthConfig& config) {
    config.validate();
    std::mt19937_64 rng(config.seed);
    const std::size_t L = config.latent_dim;
    const auto audio_map = random_map(L, config.audio_dim, rng);
    const auto visual_map = random_map(L, config.visual_dim, rng);
    const auto text_map = random_map(L, config.text_dim, rng);

    Dataset ds;
    ds.audio_dim = config.audio_dim;
    ds.visual_dim = config.visual_dim;
    ds.text_dim = config.text_dim;

    const std::size_t classes = config.seen_classes + config.unseen_classes;
    const auto prototypes = draw_prototypes(classes, L, config.min_separation, rng);
    for (std::size_t c = 0; c < classes; ++c) {
        const auto cls = static_cast<ClassId>(c);
        const auto& z = prototypes[c];

        ClassKnowledge k;
        k.class_id = cls;
        k.name = "class_" + std::to_string(c);
        for (std::size_t d = 0; d < config.descriptions_per_class; ++d) {
            k.embeddings.push_back(project(z, text_map, config.text_dim, config.cluster_spread, rng));
        }
        ds.knowledge.push_back(std::move(k));

        std::vector<std::string> ids;
        for (std::size_t s = 0; s < config.samples_per_class; ++s) {
            FeatureRecord r;
            r.id = "c" + std::to_string(c) + "_s" + std::to_string(s);
            r.class_id = cls;
            r.audio = project(z, audio_map, config.audio_dim, config.modality_noise, rng);
            r.visual = project(z, visual_map, config.visual_dim, config.modality_noise, rng);
            ids.push_back(r.id);
            ds.records.push_back(std::move(r));
        }

        if (c < config.seen_classes) {
            ds.split.seen.push_back(cls);
            std::shuffle(ids.begin(), ids.end(), rng);
            const auto held = static_cast<std::size_t>(
                std::llround(config.test_fraction * static_cast<double>(ids.size())));
            for (std::size_t i = 0; i < ids.size(); ++i) {
                (i < held ? ds.split.test_seen : ds.split.train).push_back(ids[i]);
            }
        } else {
            ds.split.unseen.push_back(cls);
            for (auto& id : ids) ds.split.test_unseen.push_back(std::move(id));
        }
    }
    ds.validate();
    return ds;
}

std::vector<std::vector<std::size_t>> make_batches(std::span<const std::size_t> items, std::size_t batch_size,
                                                   std::uint64_t shuffle_seed, bool training) {
    if (items.empty()) throw DomainError("make_batches: empty partition");
    if (batch_size < 1 || (training && batch_size < 2)) {
        throw DomainError("make_batches: batch size " + std::to_string(batch_size) + " too small" +
                          (training ? " for training (need >= 2)" : ""));
    }
    std::vector<std::size_t> order(items.begin(), items.end());
    std::mt19937_64 rng(shuffle_seed);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
        const auto end = std::min(order.size(), start + batch_size);
        if (training && end - start < 2) break;
        out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return out;
}

}  // namespace kda
