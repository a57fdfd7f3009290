#include "kda/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace kda {

std::string_view to_string(Modality m) {
    switch (m) {
        case Modality::both: return "both";
        case Modality::audio_only: return "audio";
        case Modality::visual_only: return "visual";
    }
    return "?";
}

Modality parse_modality(std::string_view s) {
    if (s == "both") return Modality::both;
    if (s == "audio" || s == "audio-only") return Modality::audio_only;
    if (s == "visual" || s == "visual-only") return Modality::visual_only;
    throw ConfigError("unknown modality '" + std::string(s) + "' (expected both|audio|visual)");
}

void ModelConfig::validate() const {
    auto dim = [](std::size_t v, const char* name) {
        if (v < 1) throw ConfigError(std::string(name) + " must be >= 1");
    };
    dim(audio_dim, "audio_dim");
    dim(visual_dim, "visual_dim");
    dim(text_dim, "text_dim");
    dim(hidden_dim, "hidden_dim");
    dim(common_dim, "common_dim");
    auto prob = [](double p, const char* name) {
        if (!(p >= 0.0 && p < 1.0)) throw ConfigError(std::string(name) + " must be in [0, 1)");
    };
    prob(dropout_enc, "dropout_enc");
    prob(dropout_proj, "dropout_proj");
    prob(dropout_dec, "dropout_dec");
    if (modality != Modality::both && modality != Modality::audio_only &&
        modality != Modality::visual_only) {
        throw ConfigError("modality out of range");
    }
}

KnowledgeInput KnowledgeInput::per_class(Tensor text) {
    KnowledgeInput k;
    k.counts.assign(text.rank() == 2 ? text.dim(0) : 0, 1);
    k.text = std::move(text);
    return k;
}

Tensor MlpBlock::forward(const Tensor& x, std::mt19937_64* dropout_rng) const {
    Tensor h = relu(add_bias(matmul(x, w1), b1));
    if (dropout_rng) h = kda::dropout(h, dropout, *dropout_rng);
    return add_bias(matmul(h, w2), b2);
}

namespace {

Tensor xavier(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> u(-bound, bound);
    std::vector<double> w(fan_in * fan_out);
    for (auto& v : w) v = u(rng);
    return Tensor::parameter({fan_in, fan_out}, std::move(w));
}

MlpBlock make_block(std::size_t in, std::size_t hidden, std::size_t out, double p,
                    std::mt19937_64& rng) {
    MlpBlock b;
    b.w1 = xavier(in, hidden, rng);
    b.b1 = Tensor::parameter({hidden}, std::vector<double>(hidden, 0.0));
    b.w2 = xavier(hidden, out, rng);
    b.b2 = Tensor::parameter({out}, std::vector<double>(out, 0.0));
    b.dropout = p;
    return b;
}

void push_block(std::vector<NamedTensor>& out, const std::string& prefix, const MlpBlock& b) {
    out.emplace_back(prefix + ".w1", b.w1);
    out.emplace_back(prefix + ".b1", b.b1);
    out.emplace_back(prefix + ".w2", b.w2);
    out.emplace_back(prefix + ".b2", b.b2);
}

void require_width(const Tensor& t, std::size_t width, const char* what) {
    if (!t.defined() || t.rank() != 2 || t.dim(1) != width) {
        throw ShapeError(std::string(what) + ": expected [B x " + std::to_string(width) + "], got " +
                         (t.defined() ? shape_str(t.shape()) : std::string("<undefined>")));
    }
}

}  // namespace

KdaModel KdaModel::init(const ModelConfig& config, std::uint32_t seed) {
    config.validate();
    KdaModel m;
    m.config_ = config;
    m.seed_ = seed;
    std::mt19937_64 rng(seed);
    const auto H = config.hidden_dim;
    m.a_enc_ = make_block(config.audio_dim, H, H, config.dropout_enc, rng);
    m.v_enc_ = make_block(config.visual_dim, H, H, config.dropout_enc, rng);
    m.attn_q_ = xavier(H, H, rng);
    m.attn_k_ = xavier(H, H, rng);
    m.attn_v_ = xavier(H, H, rng);
    m.a_proj_ = make_block(H, H, H, config.dropout_proj, rng);
    m.v_proj_ = make_block(H, H, H, config.dropout_proj, rng);
    m.e_av_ = make_block(2 * H, H, config.common_dim, config.dropout_dec, rng);
    m.e_t_ = make_block(config.text_dim, H, config.common_dim, config.dropout_dec, rng);
    return m;
}

std::vector<NamedTensor> KdaModel::parameters() const {
    std::vector<NamedTensor> out;
    push_block(out, "a_enc", a_enc_);
    push_block(out, "v_enc", v_enc_);
    out.emplace_back("attn.q", attn_q_);
    out.emplace_back("attn.k", attn_k_);
    out.emplace_back("attn.v", attn_v_);
    push_block(out, "a_proj", a_proj_);
    push_block(out, "v_proj", v_proj_);
    push_block(out, "e_av", e_av_);
    push_block(out, "e_t", e_t_);
    return out;
}

std::vector<NamedTensor> KdaModel::trainable_parameters() const {
    auto all = parameters();
    if (config_.modality == Modality::both) return all;
    const bool audio = config_.modality == Modality::audio_only;
    std::vector<NamedTensor> out;
    for (auto& p : all) {
        const auto& name = p.first;
        if (name.starts_with("attn.")) continue;
        if (audio && (name.starts_with("v_enc.") || name.starts_with("v_proj."))) continue;
        if (!audio && (name.starts_with("a_enc.") || name.starts_with("a_proj."))) continue;
        out.push_back(std::move(p));
    }
    return out;
}

Tensor KdaModel::parameter(std::string_view name) const {
    for (auto& [n, t] : parameters())
        if (n == name) return t;
    throw IndexError("no parameter named '" + std::string(name) + "'");
}

AttentionOutput KdaModel::cross_attention(const Tensor& theta_a0, const Tensor& theta_v0) const {
    const auto H = config_.hidden_dim;
    require_width(theta_a0, H, "cross_attention audio token");
    require_width(theta_v0, H, "cross_attention visual token");
    if (theta_a0.dim(0) != theta_v0.dim(0)) {
        throw ShapeError("cross_attention: batch sizes differ " + shape_str(theta_a0.shape()) +
                         " vs " + shape_str(theta_v0.shape()));
    }
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(H));
    Tensor qa = matmul(theta_a0, attn_q_), qv = matmul(theta_v0, attn_q_);
    Tensor ka = matmul(theta_a0, attn_k_), kv = matmul(theta_v0, attn_k_);
    Tensor va = matmul(theta_a0, attn_v_), vv = matmul(theta_v0, attn_v_);
    auto score = [&](const Tensor& q, const Tensor& k) { return scale(row_sum(mul(q, k)), inv_sqrt); };

    AttentionOutput out;
    out.weights_a = softmax_rows(concat_cols(score(qa, ka), score(qa, kv)));
    out.weights_v = softmax_rows(concat_cols(score(qv, ka), score(qv, kv)));
    auto mix = [&](const Tensor& w) {
        return add(scale_rows(va, column(w, 0)), scale_rows(vv, column(w, 1)));
    };
    out.theta_a = add(theta_a0, mix(out.weights_a));
    out.theta_v = add(theta_v0, mix(out.weights_v));
    return out;
}

ForwardOutput KdaModel::forward(const Tensor& audio, const Tensor& visual,
                                const KnowledgeInput& knowledge,
                                std::mt19937_64* dropout_rng) const {
    ForwardOutput out;
    const auto H = config_.hidden_dim;
    switch (config_.modality) {
        case Modality::both: {
            require_width(audio, config_.audio_dim, "audio features");
            require_width(visual, config_.visual_dim, "visual features");
            if (audio.dim(0) != visual.dim(0)) {
                throw ShapeError("audio and visual batch sizes differ: " + shape_str(audio.shape()) +
                                 " vs " + shape_str(visual.shape()));
            }
            auto att = cross_attention(a_enc_.forward(audio, dropout_rng),
                                       v_enc_.forward(visual, dropout_rng));
            out.theta_a = a_proj_.forward(att.theta_a, dropout_rng);
            out.theta_v = v_proj_.forward(att.theta_v, dropout_rng);
            break;
        }
        case Modality::audio_only:
            require_width(audio, config_.audio_dim, "audio features");
            out.theta_a = a_proj_.forward(a_enc_.forward(audio, dropout_rng), dropout_rng);
            out.theta_v = Tensor::zeros({audio.dim(0), H});
            break;
        case Modality::visual_only:
            require_width(visual, config_.visual_dim, "visual features");
            out.theta_v = v_proj_.forward(v_enc_.forward(visual, dropout_rng), dropout_rng);
            out.theta_a = Tensor::zeros({visual.dim(0), H});
            break;
    }
    out.theta_av = concat_cols(out.theta_a, out.theta_v);
    out.rho_av = e_av_.forward(out.theta_av, dropout_rng);
    out.rho_t = segment_mean_rows(embed_knowledge(knowledge.text, dropout_rng), knowledge.counts);
    return out;
}

Tensor KdaModel::embed_audio_visual(const Tensor& audio, const Tensor& visual,
                                    std::mt19937_64* dropout_rng) const {
    // A placeholder knowledge row keeps forward() usable without classes.
    auto none = KnowledgeInput::per_class(Tensor::zeros({1, config_.text_dim}));
    return forward(audio, visual, none, dropout_rng).rho_av;
}

Tensor KdaModel::embed_knowledge(const Tensor& text, std::mt19937_64* dropout_rng) const {
    require_width(text, config_.text_dim, "knowledge embeddings");
    return e_t_.forward(text, dropout_rng);
}

KdaModel KdaModel::clone() const {
    KdaModel m = KdaModel::init(config_, seed_);
    m.copy_parameters_from(*this);
    return m;
}

void KdaModel::copy_parameters_from(const KdaModel& other) {
    if (!(config_ == other.config_)) throw ContractError("copy_parameters_from: config mismatch");
    auto dst = parameters();
    const auto src = other.parameters();
    for (std::size_t i = 0; i < dst.size(); ++i) {
        auto from = src[i].second.data();
        std::copy(from.begin(), from.end(), dst[i].second.mutable_data().begin());
    }
}

Tensor class_logits(const Tensor& rho_av, const Tensor& rho_t) {
    if (rho_av.rank() != 2 || rho_t.rank() != 2 || rho_av.dim(1) != rho_t.dim(1)) {
        throw ShapeError("class_logits: widths differ " + shape_str(rho_av.shape()) + " vs " +
                         shape_str(rho_t.shape()));
    }
    return matmul(rho_av, transpose(rho_t));
}

// ---- checkpoint ----

namespace {

constexpr char kMagic[4] = {'K', 'D', 'A', '1'};

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_i32(std::string& out, std::int64_t v) {
    if (v < INT32_MIN || v > INT32_MAX) throw ContractError("checkpoint field exceeds int32");
    put_u32(out, static_cast<std::uint32_t>(static_cast<std::int32_t>(v)));
}

void put_f64(std::string& out, double v) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

class Reader {
public:
    explicit Reader(std::string_view bytes) : bytes_(bytes) {}

    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        pos_ += 4;
        return v;
    }
    std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
    double f64() {
        need(8);
        std::uint64_t bits = 0;
        for (int i = 0; i < 8; ++i)
            bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        pos_ += 8;
        return std::bit_cast<double>(bits);
    }
    std::string_view take(std::size_t n) {
        need(n);
        auto s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == bytes_.size(); }

private:
    void need(std::size_t n) const {
        if (bytes_.size() - pos_ < n) throw ParseError("checkpoint truncated at byte " + std::to_string(pos_));
    }
    std::string_view bytes_;
    std::size_t pos_ = 0;
};

std::size_t positive_dim(std::int32_t v, const char* field) {
    if (v < 1) throw ParseError(std::string("checkpoint field ") + field + " must be >= 1");
    return static_cast<std::size_t>(v);
}

}  // namespace

std::string checkpoint_bytes(const KdaModel& model) {
    const auto& c = model.config();
    std::string out(kMagic, 4);
    put_i32(out, static_cast<std::int64_t>(c.audio_dim));
    put_i32(out, static_cast<std::int64_t>(c.visual_dim));
    put_i32(out, static_cast<std::int64_t>(c.text_dim));
    put_i32(out, static_cast<std::int64_t>(c.hidden_dim));
    put_i32(out, static_cast<std::int64_t>(c.common_dim));
    put_i32(out, static_cast<std::int32_t>(c.modality));
    put_f64(out, c.dropout_enc);
    put_f64(out, c.dropout_proj);
    put_f64(out, c.dropout_dec);
    put_u32(out, model.seed());
    const auto params = model.parameters();
    put_i32(out, static_cast<std::int64_t>(params.size()));
    for (const auto& [name, t] : params) {
        put_i32(out, static_cast<std::int64_t>(name.size()));
        out += name;
        put_i32(out, static_cast<std::int64_t>(t.rank()));
        for (auto d : t.shape()) put_i32(out, static_cast<std::int64_t>(d));
        for (double v : t.data()) put_f64(out, v);
    }
    return out;
}

KdaModel load_checkpoint_bytes(std::string_view bytes) {
    Reader r(bytes);
    if (r.take(4) != std::string_view(kMagic, 4)) throw ParseError("checkpoint: bad magic (expected KDA1)");
    ModelConfig c;
    c.audio_dim = positive_dim(r.i32(), "audio_dim");
    c.visual_dim = positive_dim(r.i32(), "visual_dim");
    c.text_dim = positive_dim(r.i32(), "text_dim");
    c.hidden_dim = positive_dim(r.i32(), "hidden_dim");
    c.common_dim = positive_dim(r.i32(), "common_dim");
    const auto modality = r.i32();
    if (modality < 0 || modality > 2) throw ParseError("checkpoint: modality out of range");
    c.modality = static_cast<Modality>(modality);
    c.dropout_enc = r.f64();
    c.dropout_proj = r.f64();
    c.dropout_dec = r.f64();
    const std::uint32_t seed = r.u32();
    try {
        c.validate();
    } catch (const ConfigError& e) {
        throw ParseError(std::string("checkpoint: ") + e.what());
    }

    KdaModel m = KdaModel::init(c, seed);
    const auto expected = m.parameters();
    const auto count = r.i32();
    if (count < 0 || static_cast<std::size_t>(count) != expected.size()) {
        throw ParseError("checkpoint: expected " + std::to_string(expected.size()) +
                         " parameters, found " + std::to_string(count));
    }
    for (const auto& [name, t] : expected) {
        const auto len = r.i32();
        if (len < 0) throw ParseError("checkpoint: negative name length");
        const auto got = r.take(static_cast<std::size_t>(len));
        if (got != name) {
            throw ParseError("checkpoint: expected parameter '" + name + "', found '" +
                             std::string(got) + "'");
        }
        const auto rank = r.i32();
        if (rank < 0 || static_cast<std::size_t>(rank) != t.rank()) {
            throw ParseError("checkpoint: rank mismatch for " + name);
        }
        for (auto d : t.shape()) {
            if (r.i32() != static_cast<std::int32_t>(d)) throw ParseError("checkpoint: shape mismatch for " + name);
        }
        Tensor slot = t;
        for (double& v : slot.mutable_data()) v = r.f64();
    }
    if (!r.done()) throw ParseError("checkpoint: trailing bytes");
    return m;
}

void save_checkpoint(const KdaModel& model, const std::filesystem::path& path) {
    ensure_parent_directory(path);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    const auto bytes = checkpoint_bytes(model);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing " + path.string());
}

KdaModel load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return load_checkpoint_bytes(ss.str());
}

}  // namespace kda
