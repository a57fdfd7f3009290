#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "kda/datahub.hpp"
#include "kda/model.hpp"

namespace kda {

// All accuracies are fractions in [0, 1].
struct EvalResult {
    double S = 0.0;
    double U = 0.0;
    double HM = 0.0;
    double ZSL = 0.0;
    bool operator==(const EvalResult&) const = default;
};

enum class EvalMode { gzsl, zsl, both };
EvalMode parse_eval_mode(std::string_view s);

struct PredictionRecord {
    std::string sample_id;
    ClassId true_class = 0;
    ClassId predicted_class = 0;
    // Euclidean distance to each candidate, in candidate order.
    std::vector<double> distances;
};

// Nearest class representative for each row of rho_av[B x D]; class_reps
// row c belongs to candidates[c]. Ties go to the lowest class id. The caller
// fills sample_id and true_class.
std::vector<PredictionRecord> predict(const Tensor& rho_av, const Tensor& class_reps,
                                      std::span<const ClassId> candidates);

// Unweighted mean over `classes` of per-class accuracy. Predictions of other
// classes are ignored.
double mean_class_accuracy(std::span<const PredictionRecord> preds, std::span<const ClassId> classes);

// 2SU / (S + U); zero when both are zero.
double harmonic_mean(double S, double U);

struct SampleTensors {
    Tensor audio;   // [B x audio_dim]
    Tensor visual;  // [B x visual_dim]
    std::vector<ClassId> classes;
    std::vector<std::string> ids;
};
SampleTensors gather_samples(const Dataset& ds, std::span<const std::size_t> record_indices);

// Description embeddings of `classes`, stacked in the given order.
KnowledgeInput gather_knowledge(const Dataset& ds, std::span<const ClassId> classes);

// Per-class mean of E_t over each class's descriptions (eval mode): [C x common].
Tensor class_representatives(const KdaModel& model, const Dataset& ds, std::span<const ClassId> classes);

// Eval-mode predictions for a partition against the given candidates.
std::vector<PredictionRecord> predict_partition(const KdaModel& model, const Dataset& ds, Partition part,
                                                std::span<const ClassId> candidates);

// Fields of modes that were not requested stay zero.
EvalResult evaluate(const KdaModel& model, const Dataset& ds, EvalMode mode = EvalMode::both);

// align_loss between eval-mode rho_av of every test sample and the class
// representatives of their labels.
double test_align_loss(const KdaModel& model, const Dataset& ds);

// "S=xx.xx U=xx.xx HM=xx.xx ZSL=xx.xx" in percent.
std::string format_metrics(const EvalResult& r);
// Only the fields computed under `mode`, in the same fixed format.
std::string format_metrics(const EvalResult& r, EvalMode mode);

struct EmbeddingRow {
    std::string id;
    ClassId class_id = 0;
    bool knowledge = false;
    std::vector<double> embedding;
};

// Header {"embedding_dim": D}, one row per sample (rho_av) then one per class
// (mean embedded knowledge) flagged with "knowledge": true.
std::vector<EmbeddingRow> compute_embeddings(const KdaModel& model, const Dataset& ds);
void export_embeddings(const KdaModel& model, const Dataset& ds, const std::filesystem::path& out);
std::vector<EmbeddingRow> load_embeddings(const std::filesystem::path& path);

}  // namespace kda
