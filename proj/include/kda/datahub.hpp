#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "kda/errors.hpp"

namespace kda {

using ClassId = std::int64_t;

struct FeatureRecord {
    std::string id;
    ClassId class_id = 0;
    std::vector<double> audio;
    std::vector<double> visual;
};

struct ClassKnowledge {
    ClassId class_id = 0;
    std::string name;
    // K description embeddings, each of width text_dim.
    std::vector<std::vector<double>> embeddings;
};

struct GzslSplit {
    std::vector<ClassId> seen;
    std::vector<ClassId> unseen;
    std::vector<std::string> train;
    std::vector<std::string> test_seen;
    std::vector<std::string> test_unseen;
};

enum class Partition { train, test_seen, test_unseen };

struct DatasetPaths {
    std::filesystem::path features;
    std::filesystem::path knowledge;
    std::filesystem::path split;

    // features.jsonl / knowledge.jsonl / split.json inside `dir`.
    static DatasetPaths in_directory(const std::filesystem::path& dir);
};

class Dataset {
public:
    std::size_t audio_dim = 0;
    std::size_t visual_dim = 0;
    std::size_t text_dim = 0;
    std::vector<FeatureRecord> records;
    std::vector<ClassKnowledge> knowledge;
    GzslSplit split;

    // Enforces every dataset invariant and rebuilds the lookup tables.
    // Throws ValidationError naming the violated rule.
    void validate();

    std::size_t record_index(const std::string& id) const;
    const ClassKnowledge& knowledge_for(ClassId id) const;
    // Record indices of a split partition, in split-file order.
    std::vector<std::size_t> partition(Partition p) const;
    bool is_seen(ClassId id) const;

private:
    std::unordered_map<std::string, std::size_t> record_index_;
    std::unordered_map<ClassId, std::size_t> knowledge_index_;
};

// Parses and validates. ParseError carries "<file>:<line>: ..." locations.
Dataset load_dataset(const DatasetPaths& paths);
Dataset read_dataset(std::istream& features, std::istream& knowledge, std::istream& split,
                     const std::string& features_name = "features",
                     const std::string& knowledge_name = "knowledge",
                     const std::string& split_name = "split");

void write_features(const Dataset& ds, std::ostream& out);
void write_knowledge(const Dataset& ds, std::ostream& out);
void write_split(const Dataset& ds, std::ostream& out);
void save_dataset(const Dataset& ds, const DatasetPaths& paths);

struct SynthConfig {
    std::size_t seen_classes = 5;
    std::size_t unseen_classes = 3;
    std::size_t samples_per_class = 100;
    std::size_t audio_dim = 64;
    std::size_t visual_dim = 64;
    std::size_t text_dim = 32;
    // Width of the shared class prototype every modality is an image of.
    std::size_t latent_dim = 3;
    std::size_t descriptions_per_class = 3;
    // Lower bound on the distance between any two latent prototypes.
    double min_separation = 0.0;
    // Noise on the K description embeddings of a class.
    double cluster_spread = 0.1;
    // Noise on each sample's audio and visual features.
    double modality_noise = 0.1;
    // Fraction of each seen class held out as test-seen.
    double test_fraction = 0.2;
    std::uint64_t seed = 0;

    void validate() const;
};

// Classes 0..seen-1 are seen, the rest unseen. Each class gets a latent
// prototype; audio, visual and text features are fixed random linear images
// of it plus noise. Pure function of the config.
Dataset generate_synthetic(const SynthConfig& config);

// Seeded shuffle of `items` cut into consecutive batches. Training drops a
// trailing batch smaller than 2; evaluation keeps it.
std::vector<std::vector<std::size_t>> make_batches(std::span<const std::size_t> items,
                                                   std::size_t batch_size, std::uint64_t shuffle_seed,
                                                   bool training);

}  // namespace kda
