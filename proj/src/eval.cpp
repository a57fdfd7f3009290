#include "kda/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <unordered_map>

#include <json.hpp>

#include "kda/losses.hpp"

namespace kda {

EvalMode parse_eval_mode(std::string_view s) {
    if (s == "gzsl") return EvalMode::gzsl;
    if (s == "zsl") return EvalMode::zsl;
    if (s == "both") return EvalMode::both;
    throw ConfigError("unknown eval mode '" + std::string(s) + "' (expected gzsl, zsl or both)");
}

std::vector<PredictionRecord> predict(const Tensor& rho_av, const Tensor& class_reps,
                                      std::span<const ClassId> candidates) {
    if (candidates.empty()) throw DomainError("predict: empty candidate set");
    if (rho_av.rank() != 2 || class_reps.rank() != 2 || class_reps.dim(0) != candidates.size() ||
        class_reps.dim(1) != rho_av.dim(1)) {
        throw ShapeError("predict: embeddings " + shape_str(rho_av.shape()) + " vs class reps " +
                         shape_str(class_reps.shape()) + " for " + std::to_string(candidates.size()) +
                         " candidates");
    }
    const std::size_t B = rho_av.dim(0), C = candidates.size(), D = rho_av.dim(1);
    auto x = rho_av.data();
    auto r = class_reps.data();
    std::vector<PredictionRecord> out(B);
    for (std::size_t b = 0; b < B; ++b) {
        auto& rec = out[b];
        rec.distances.resize(C);
        std::size_t best = 0;
        for (std::size_t c = 0; c < C; ++c) {
            double s = 0.0;
            for (std::size_t d = 0; d < D; ++d) {
                const double diff = x[b * D + d] - r[c * D + d];
                s += diff * diff;
            }
            rec.distances[c] = std::sqrt(s);
            if (c == 0) continue;
            const double bd = rec.distances[best];
            if (rec.distances[c] < bd || (rec.distances[c] == bd && candidates[c] < candidates[best])) best = c;
        }
        rec.predicted_class = candidates[best];
    }
    return out;
}

double mean_class_accuracy(std::span<const PredictionRecord> preds, std::span<const ClassId> classes) {
    if (classes.empty()) throw DomainError("mean_class_accuracy: empty class set");
    std::map<ClassId, std::pair<std::size_t, std::size_t>> tally;  // correct, total
    for (auto c : classes) tally.emplace(c, std::pair<std::size_t, std::size_t>{0, 0});
    for (const auto& p : preds) {
        auto it = tally.find(p.true_class);
        if (it == tally.end()) continue;
        it->second.second += 1;
        it->second.first += p.predicted_class == p.true_class;
    }
    double acc = 0.0;
    for (const auto& [c, t] : tally) {
        if (t.second == 0) throw DomainError("mean_class_accuracy: class " + std::to_string(c) + " has no samples");
        acc += static_cast<double>(t.first) / static_cast<double>(t.second);
    }
    return acc / static_cast<double>(tally.size());
}

double harmonic_mean(double S, double U) {
    if (!(S >= 0.0) || !(U >= 0.0)) throw DomainError("harmonic_mean: accuracies must be >= 0");
    if (S + U == 0.0) return 0.0;
    return 2.0 * U * S / (U + S);
}

SampleTensors gather_samples(const Dataset& ds, std::span<const std::size_t> record_indices) {
    const std::size_t B = record_indices.size();
    std::vector<double> audio, visual;
    audio.reserve(B * ds.audio_dim);
    visual.reserve(B * ds.visual_dim);
    SampleTensors out;
    for (auto i : record_indices) {
        const auto& r = ds.records.at(i);
        audio.insert(audio.end(), r.audio.begin(), r.audio.end());
        visual.insert(visual.end(), r.visual.begin(), r.visual.end());
        out.classes.push_back(r.class_id);
        out.ids.push_back(r.id);
    }
    out.audio = Tensor::from({B, ds.audio_dim}, std::move(audio));
    out.visual = Tensor::from({B, ds.visual_dim}, std::move(visual));
    return out;
}

KnowledgeInput gather_knowledge(const Dataset& ds, std::span<const ClassId> classes) {
    std::vector<double> text;
    KnowledgeInput out;
    std::size_t rows = 0;
    for (auto c : classes) {
        const auto& k = ds.knowledge_for(c);
        for (const auto& e : k.embeddings) text.insert(text.end(), e.begin(), e.end());
        out.counts.push_back(k.embeddings.size());
        rows += k.embeddings.size();
    }
    out.text = Tensor::from({rows, ds.text_dim}, std::move(text));
    return out;
}

Tensor class_representatives(const KdaModel& model, const Dataset& ds, std::span<const ClassId> classes) {
    auto k = gather_knowledge(ds, classes);
    return segment_mean_rows(model.embed_knowledge(k.text), k.counts).detach();
}

std::vector<PredictionRecord> predict_partition(const KdaModel& model, const Dataset& ds, Partition part,
                                                std::span<const ClassId> candidates) {
    const auto indices = ds.partition(part);
    if (indices.empty()) throw DomainError("evaluate: empty test partition");
    const auto samples = gather_samples(ds, indices);
    const auto rho_av = model.embed_audio_visual(samples.audio, samples.visual);
    auto preds = predict(rho_av, class_representatives(model, ds, candidates), candidates);
    for (std::size_t b = 0; b < preds.size(); ++b) {
        preds[b].sample_id = samples.ids[b];
        preds[b].true_class = samples.classes[b];
    }
    return preds;
}

namespace {

// Distinct classes of a partition in first-appearance order.
std::vector<ClassId> partition_classes(const Dataset& ds, Partition part) {
    std::vector<ClassId> out;
    for (auto i : ds.partition(part)) {
        const auto c = ds.records[i].class_id;
        if (std::find(out.begin(), out.end(), c) == out.end()) out.push_back(c);
    }
    return out;
}

std::vector<ClassId> all_classes(const Dataset& ds) {
    std::vector<ClassId> out(ds.split.seen);
    out.insert(out.end(), ds.split.unseen.begin(), ds.split.unseen.end());
    return out;
}

}  // namespace

EvalResult evaluate(const KdaModel& model, const Dataset& ds, EvalMode mode) {
    EvalResult r;
    if (mode != EvalMode::zsl) {
        const auto candidates = all_classes(ds);
        const auto seen_preds = predict_partition(model, ds, Partition::test_seen, candidates);
        const auto unseen_preds = predict_partition(model, ds, Partition::test_unseen, candidates);
        r.S = mean_class_accuracy(seen_preds, partition_classes(ds, Partition::test_seen));
        r.U = mean_class_accuracy(unseen_preds, partition_classes(ds, Partition::test_unseen));
        r.HM = harmonic_mean(r.S, r.U);
    }
    if (mode != EvalMode::gzsl) {
        const auto preds = predict_partition(model, ds, Partition::test_unseen, ds.split.unseen);
        r.ZSL = mean_class_accuracy(preds, partition_classes(ds, Partition::test_unseen));
    }
    return r;
}

double test_align_loss(const KdaModel& model, const Dataset& ds) {
    auto indices = ds.partition(Partition::test_seen);
    const auto unseen = ds.partition(Partition::test_unseen);
    indices.insert(indices.end(), unseen.begin(), unseen.end());
    const auto samples = gather_samples(ds, indices);
    const auto classes = all_classes(ds);
    std::unordered_map<ClassId, std::size_t> row;
    for (std::size_t i = 0; i < classes.size(); ++i) row.emplace(classes[i], i);
    std::vector<std::size_t> labels;
    for (auto c : samples.classes) labels.push_back(row.at(c));
    const auto reps = class_representatives(model, ds, classes);
    const auto rho_av = model.embed_audio_visual(samples.audio, samples.visual);
    return align_loss(rho_av.detach(), gather_rows(reps, labels)).item();
}

std::string format_metrics(const EvalResult& r) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "S=%.2f U=%.2f HM=%.2f ZSL=%.2f", 100.0 * r.S, 100.0 * r.U, 100.0 * r.HM,
                  100.0 * r.ZSL);
    return buf;
}

std::string format_metrics(const EvalResult& r, EvalMode mode) {
    char buf[128];
    switch (mode) {
        case EvalMode::gzsl:
            std::snprintf(buf, sizeof buf, "S=%.2f U=%.2f HM=%.2f", 100.0 * r.S, 100.0 * r.U, 100.0 * r.HM);
            return buf;
        case EvalMode::zsl:
            std::snprintf(buf, sizeof buf, "ZSL=%.2f", 100.0 * r.ZSL);
            return buf;
        case EvalMode::both:
            break;
    }
    return format_metrics(r);
}

std::vector<EmbeddingRow> compute_embeddings(const KdaModel& model, const Dataset& ds) {
    std::vector<std::size_t> all(ds.records.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    std::vector<EmbeddingRow> rows;
    const std::size_t D = model.config().common_dim;
    if (!all.empty()) {
        const auto samples = gather_samples(ds, all);
        const auto rho_av = model.embed_audio_visual(samples.audio, samples.visual);
        auto x = rho_av.data();
        for (std::size_t b = 0; b < all.size(); ++b) {
            rows.push_back({samples.ids[b], samples.classes[b], false,
                            std::vector<double>(x.begin() + static_cast<std::ptrdiff_t>(b * D),
                                                x.begin() + static_cast<std::ptrdiff_t>((b + 1) * D))});
        }
    }
    std::vector<ClassId> classes;
    for (const auto& k : ds.knowledge) classes.push_back(k.class_id);
    const auto reps = class_representatives(model, ds, classes);
    auto r = reps.data();
    for (std::size_t c = 0; c < classes.size(); ++c) {
        rows.push_back({ds.knowledge[c].name, classes[c], true,
                        std::vector<double>(r.begin() + static_cast<std::ptrdiff_t>(c * D),
                                            r.begin() + static_cast<std::ptrdiff_t>((c + 1) * D))});
    }
    return rows;
}

void export_embeddings(const KdaModel& model, const Dataset& ds, const std::filesystem::path& out) {
    const auto rows = compute_embeddings(model, ds);
    ensure_parent_directory(out);
    std::ofstream f(out, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + out.string());
    nlohmann::ordered_json header;
    header["embedding_dim"] = model.config().common_dim;
    f << header.dump() << '\n';
    for (const auto& row : rows) {
        nlohmann::ordered_json line;
        line["id"] = row.id;
        line["class"] = row.class_id;
        line["knowledge"] = row.knowledge;
        line["embedding"] = row.embedding;
        f << line.dump() << '\n';
    }
    if (!f) throw IoError("write failed for " + out.string());
}

std::vector<EmbeddingRow> load_embeddings(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path.string());
    std::vector<EmbeddingRow> rows;
    std::string line;
    std::size_t number = 0;
    std::size_t dim = 0;
    while (std::getline(f, line)) {
        ++number;
        if (line.empty()) continue;
        const auto where = path.string() + ":" + std::to_string(number) + ": ";
        try {
            const auto j = nlohmann::json::parse(line);
            if (dim == 0) {
                dim = j.at("embedding_dim").get<std::size_t>();
                continue;
            }
            EmbeddingRow row;
            row.id = j.at("id").get<std::string>();
            row.class_id = j.at("class").get<ClassId>();
            row.knowledge = j.at("knowledge").get<bool>();
            row.embedding = j.at("embedding").get<std::vector<double>>();
            if (row.embedding.size() != dim) throw ParseError(where + "embedding length does not match header");
            rows.push_back(std::move(row));
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(where + e.what());
        }
    }
    if (dim == 0) throw ParseError(path.string() + ":1: missing header line");
    return rows;
}

}  // namespace kda
