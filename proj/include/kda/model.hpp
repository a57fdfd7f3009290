#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "kda/gradcore.hpp"

namespace kda {

enum class Modality : std::int32_t { both = 0, audio_only = 1, visual_only = 2 };

std::string_view to_string(Modality m);
Modality parse_modality(std::string_view s);

struct ModelConfig {
    std::size_t audio_dim = 64;
    std::size_t visual_dim = 64;
    std::size_t text_dim = 32;
    std::size_t hidden_dim = 64;
    std::size_t common_dim = 32;
    double dropout_enc = 0.2;
    double dropout_proj = 0.3;
    // Used by both embedding layers (E_av and E_t).
    double dropout_dec = 0.5;
    Modality modality = Modality::both;

    // Throws ConfigError naming the offending field.
    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

using NamedTensor = std::pair<std::string, Tensor>;

// Linear -> ReLU -> Dropout -> Linear, weights stored [in x out].
struct MlpBlock {
    Tensor w1, b1, w2, b2;
    double dropout = 0.0;

    Tensor forward(const Tensor& x, std::mt19937_64* dropout_rng) const;
};

struct AttentionOutput {
    Tensor theta_a;
    Tensor theta_v;
    // [B x 2] softmax weights over (audio token, visual token) for each query.
    Tensor weights_a;
    Tensor weights_v;
};

struct ForwardOutput {
    Tensor theta_a;   // [B x hidden]
    Tensor theta_v;   // [B x hidden]
    Tensor theta_av;  // [B x 2*hidden]
    Tensor rho_av;    // [B x common]
    Tensor rho_t;     // [C x common]
};

// Per-class description embeddings stacked row-wise; class c owns
// `counts[c]` consecutive rows. rho_t is the per-class mean of their
// embeddings.
struct KnowledgeInput {
    Tensor text;
    std::vector<std::size_t> counts;

    // One row per class.
    static KnowledgeInput per_class(Tensor text);
};

class KdaModel {
public:
    // Scaled-uniform weights with bound sqrt(6 / (fan_in + fan_out)), zero
    // biases, drawn in a fixed parameter order from the seed.
    static KdaModel init(const ModelConfig& config, std::uint32_t seed);

    const ModelConfig& config() const { return config_; }
    std::uint32_t seed() const { return seed_; }

    // Every parameter, in checkpoint order.
    std::vector<NamedTensor> parameters() const;
    // Parameters the optimizer may touch; in unimodal modes the absent
    // branch and the cross-attention block are frozen.
    std::vector<NamedTensor> trainable_parameters() const;
    Tensor parameter(std::string_view name) const;

    // Single-head scaled dot-product attention over the two modality tokens
    // of each sample, with a residual connection.
    AttentionOutput cross_attention(const Tensor& theta_a0, const Tensor& theta_v0) const;

    // `dropout_rng` null means eval mode (deterministic). In unimodal modes
    // the absent modality tensor is never read and may be undefined.
    ForwardOutput forward(const Tensor& audio, const Tensor& visual, const KnowledgeInput& knowledge,
                          std::mt19937_64* dropout_rng = nullptr) const;

    Tensor embed_audio_visual(const Tensor& audio, const Tensor& visual,
                              std::mt19937_64* dropout_rng = nullptr) const;
    // E_t applied row-wise: [N x text] -> [N x common].
    Tensor embed_knowledge(const Tensor& text, std::mt19937_64* dropout_rng = nullptr) const;

    // Independent copy of all parameter values.
    KdaModel clone() const;
    // Overwrites parameter values (same config) from another model.
    void copy_parameters_from(const KdaModel& other);

private:
    KdaModel() = default;

    ModelConfig config_;
    std::uint32_t seed_ = 0;
    MlpBlock a_enc_, v_enc_, a_proj_, v_proj_, e_av_, e_t_;
    Tensor attn_q_, attn_k_, attn_v_;
};

inline KdaModel init_model(const ModelConfig& config, std::uint32_t seed) {
    return KdaModel::init(config, seed);
}

// s[b][k] = dot(rho_t[k], rho_av[b]).
Tensor class_logits(const Tensor& rho_av, const Tensor& rho_t);

// Checkpoint: "KDA1", config as little-endian i32/f64 fields, the seed, then
// every parameter as name length, name, rank, dims and raw f64 values.
std::string checkpoint_bytes(const KdaModel& model);
KdaModel load_checkpoint_bytes(std::string_view bytes);
void save_checkpoint(const KdaModel& model, const std::filesystem::path& path);
KdaModel load_checkpoint(const std::filesystem::path& path);

}  // namespace kda
