#pragma once

// The measure-dependent transformer (static and time-conditioned variants)
// and the pointwise MLP baseline. Forward passes build autodiff graphs; eval
// callers just read the output value and drop the graph.

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "m2m/autodiff.hpp"
#include "m2m/common.hpp"
#include "m2m/pointcloud.hpp"

namespace m2m {

struct ModelConfig {
    Eigen::Index ambient_dim = 2;
    Eigen::Index hidden_dim = 512;
    Eigen::Index num_layers = 5;
    Eigen::Index num_heads = 4;
    Eigen::Index fourier_frequencies = 128;
    Eigen::Index time_embed_dim = 128;
    double dropout_rate = 0.1;
    bool time_conditioned = false;
    enum class Arch { Transformer, Mlp };
    Arch arch = Arch::Transformer;

    void validate() const {
        if (ambient_dim < 1) throw ConfigError("model.ambient_dim must be >= 1");
        if (hidden_dim < 1 || num_layers < 1 || num_heads < 1 || fourier_frequencies < 1)
            throw ConfigError("model sizes must be >= 1");
        if (hidden_dim % num_heads != 0)
            throw ConfigError("model.hidden_dim must be divisible by model.num_heads");
        if (time_embed_dim % 2 != 0) throw ConfigError("model.time_embed_dim must be even");
        if (dropout_rate < 0.0 || dropout_rate >= 1.0)
            throw ConfigError("model.dropout_rate must be in [0, 1)");
        if (arch == Arch::Mlp && !time_conditioned)
            throw ConfigError("the Mlp architecture is the time-conditioned baseline; "
                              "set model.time_conditioned");
    }
};

inline nlohmann::json to_json(const ModelConfig& c) {
    return {{"ambient_dim", c.ambient_dim},
            {"hidden_dim", c.hidden_dim},
            {"num_layers", c.num_layers},
            {"num_heads", c.num_heads},
            {"fourier_frequencies", c.fourier_frequencies},
            {"time_embed_dim", c.time_embed_dim},
            {"dropout_rate", c.dropout_rate},
            {"time_conditioned", c.time_conditioned},
            {"arch", c.arch == ModelConfig::Arch::Transformer ? "transformer" : "mlp"}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    if (!j.contains("ambient_dim")) throw ConfigError("model.ambient_dim is required");
    c.ambient_dim = j.at("ambient_dim").get<Eigen::Index>();
    c.hidden_dim = j.value("hidden_dim", c.hidden_dim);
    c.num_layers = j.value("num_layers", c.num_layers);
    c.num_heads = j.value("num_heads", c.num_heads);
    c.fourier_frequencies = j.value("fourier_frequencies", c.fourier_frequencies);
    c.time_embed_dim = j.value("time_embed_dim", c.time_embed_dim);
    c.dropout_rate = j.value("dropout_rate", c.dropout_rate);
    c.time_conditioned = j.value("time_conditioned", c.time_conditioned);
    std::string arch = j.value("arch", std::string("transformer"));
    if (arch == "transformer")
        c.arch = ModelConfig::Arch::Transformer;
    else if (arch == "mlp")
        c.arch = ModelConfig::Arch::Mlp;
    else
        throw ConfigError("model.arch must be \"transformer\" or \"mlp\", got \"" + arch + "\"");
    c.validate();
    return c;
}

// All learnable tensors, named and ordered. Gradients live on the leaf nodes.
struct ModelParams {
    ModelConfig config;
    std::vector<std::pair<std::string, ad::Var>> tensors;

    ad::Var& at(const std::string& name) {
        for (auto& [n, v] : tensors)
            if (n == name) return v;
        throw ConfigError("no parameter named " + name);
    }
    const ad::Var& at(const std::string& name) const {
        return const_cast<ModelParams*>(this)->at(name);
    }

    void zero_grads() {
        for (auto& [n, v] : tensors) v->grad = Mat::Zero(v->value.rows(), v->value.cols());
    }

    size_t coordinate_count() const {
        size_t total = 0;
        for (const auto& [n, v] : tensors) total += static_cast<size_t>(v->value.size());
        return total;
    }
};

namespace detail {

constexpr Eigen::Index kMlpExpansion = 4;  // block MLP widening factor

inline Mat linear_init(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
    return rng.normal_matrix(rows, cols) / std::sqrt(static_cast<double>(rows));
}

}  // namespace detail

inline ModelParams init_params(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    ModelParams P;
    P.config = cfg;
    auto push = [&](const std::string& name, Mat m) {
        P.tensors.emplace_back(name, ad::leaf(std::move(m)));
    };
    const Eigen::Index h = cfg.hidden_dim, d = cfg.ambient_dim, F = cfg.fourier_frequencies;

    push("fourier.B", rng.normal_matrix(F, d));

    if (cfg.arch == ModelConfig::Arch::Mlp) {
        const Eigen::Index in = 2 * F + cfg.time_embed_dim;
        push("mlp0.W", detail::linear_init(rng, in, h));
        push("mlp0.b", Mat::Zero(1, h));
        for (Eigen::Index l = 1; l < cfg.num_layers; ++l) {
            push("mlp" + std::to_string(l) + ".W", detail::linear_init(rng, h, h));
            push("mlp" + std::to_string(l) + ".b", Mat::Zero(1, h));
        }
        push("out.W", Mat::Zero(h, d));
        push("out.b", Mat::Zero(1, d));
        return P;
    }

    push("input.W", detail::linear_init(rng, 2 * F, h));
    push("input.b", Mat::Zero(1, h));
    if (cfg.time_conditioned) {
        push("time.W1", detail::linear_init(rng, cfg.time_embed_dim, h));
        push("time.b1", Mat::Zero(1, h));
        push("time.W2", detail::linear_init(rng, h, h));
        push("time.b2", Mat::Zero(1, h));
    } else {
        // Static maps omit time conditioning; a learned constant plays the
        // role of the conditioning vector instead.
        push("static.cond", rng.normal_matrix(1, h));
    }
    for (Eigen::Index l = 0; l < cfg.num_layers; ++l) {
        std::string b = "block" + std::to_string(l) + ".";
        push(b + "attn.Wq", detail::linear_init(rng, h, h));
        push(b + "attn.bq", Mat::Zero(1, h));
        push(b + "attn.Wk", detail::linear_init(rng, h, h));
        push(b + "attn.bk", Mat::Zero(1, h));
        push(b + "attn.Wv", detail::linear_init(rng, h, h));
        push(b + "attn.bv", Mat::Zero(1, h));
        push(b + "attn.Wo", detail::linear_init(rng, h, h));
        push(b + "attn.bo", Mat::Zero(1, h));
        push(b + "mlp.W1", detail::linear_init(rng, h, detail::kMlpExpansion * h));
        push(b + "mlp.b1", Mat::Zero(1, detail::kMlpExpansion * h));
        push(b + "mlp.W2", detail::linear_init(rng, detail::kMlpExpansion * h, h));
        push(b + "mlp.b2", Mat::Zero(1, h));
        // Zero-init modulation: every block starts as the identity map.
        push(b + "mod.W", Mat::Zero(h, 6 * h));
        push(b + "mod.b", Mat::Zero(1, 6 * h));
    }
    // Zero-init output projection: the initial model is the zero field.
    push("out.W", Mat::Zero(h, d));
    push("out.b", Mat::Zero(1, d));
    return P;
}

// Overwrites every tensor (including the normally zero-initialized ones) with
// random values; used by gradient checks so no pathway starts degenerate.
inline void randomize_all(ModelParams& P, Rng& rng, double scale = 0.5) {
    for (auto& [name, v] : P.tensors)
        v->value = rng.normal_matrix(v->value.rows(), v->value.cols()) * scale;
}

// ---- building blocks ----

// concat(sin(2 pi B x), cos(2 pi B x)) per row of x.
inline ad::Var fourier_features(const ad::Var& x, const ad::Var& B) {
    ad::Var proj = ad::scalar_mul(ad::matmul(x, ad::transpose(B)), 2.0 * M_PI);
    return ad::concat_cols({ad::sin(proj), ad::cos(proj)});
}

// Sinusoidal embedding of t in [0,1]: frequencies log-spaced over [1, 1e4],
// sines then cosines. Not learned.
inline Mat time_embedding(double t, Eigen::Index dim) {
    if (dim < 2 || dim % 2 != 0) throw ValueError("time_embedding: dim must be even and >= 2");
    const Eigen::Index half = dim / 2;
    Mat e(1, dim);
    for (Eigen::Index i = 0; i < half; ++i) {
        double omega =
            half == 1 ? 1.0
                      : std::exp(std::log(1e4) * static_cast<double>(i) / static_cast<double>(half - 1));
        e(0, i) = std::sin(t * omega);
        e(0, half + i) = std::cos(t * omega);
    }
    return e;
}

struct AttentionWeights {
    ad::Var Wq, bq, Wk, bk, Wv, bv, Wo, bo;
};

// Multi-head softmax attention over the token set; logits scaled by
// 1/sqrt(head_dim).
inline ad::Var attention_finite(const ad::Var& tokens, const AttentionWeights& w,
                                Eigen::Index num_heads) {
    const Eigen::Index hdim = tokens->value.cols();
    if (hdim % num_heads != 0) throw ShapeError("attention: width not divisible by heads");
    const Eigen::Index head_dim = hdim / num_heads;
    ad::Var Q = ad::add_rowvec(ad::matmul(tokens, w.Wq), w.bq);
    ad::Var K = ad::add_rowvec(ad::matmul(tokens, w.Wk), w.bk);
    ad::Var V = ad::add_rowvec(ad::matmul(tokens, w.Wv), w.bv);
    std::vector<ad::Var> heads;
    heads.reserve(static_cast<size_t>(num_heads));
    const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
    for (Eigen::Index i = 0; i < num_heads; ++i) {
        ad::Var q = ad::slice_cols(Q, i * head_dim, head_dim);
        ad::Var k = ad::slice_cols(K, i * head_dim, head_dim);
        ad::Var v = ad::slice_cols(V, i * head_dim, head_dim);
        ad::Var scores = ad::scalar_mul(ad::matmul(q, ad::transpose(k)), scale);
        heads.push_back(ad::matmul(ad::softmax_rows(scores), v));
    }
    ad::Var joined = num_heads == 1 ? heads[0] : ad::concat_cols(heads);
    return ad::add_rowvec(ad::matmul(joined, w.Wo), w.bo);
}

struct BlockWeights {
    AttentionWeights attn;
    ad::Var mlp_W1, mlp_b1, mlp_W2, mlp_b2;
    ad::Var mod_W, mod_b;
};

// Pre-norm residual block with adaptive layer normalization: (shift, scale,
// gate) for each of the two sublayers are affine in the conditioning vector.
inline ad::Var adaln_block(const ad::Var& tokens, const ad::Var& cond, const BlockWeights& w,
                           Eigen::Index num_heads, double dropout_rate, bool train_mode,
                           Rng* rng) {
    const Eigen::Index h = tokens->value.cols();
    ad::Var mod = ad::add_rowvec(ad::matmul(cond, w.mod_W), w.mod_b);  // 1 x 6h
    ad::Var shift1 = ad::slice_cols(mod, 0, h);
    ad::Var scale1 = ad::slice_cols(mod, h, h);
    ad::Var gate1 = ad::slice_cols(mod, 2 * h, h);
    ad::Var shift2 = ad::slice_cols(mod, 3 * h, h);
    ad::Var scale2 = ad::slice_cols(mod, 4 * h, h);
    ad::Var gate2 = ad::slice_cols(mod, 5 * h, h);

    ad::Var x1 = ad::add_rowvec(
        ad::mul_rowvec(ad::layer_norm_rows(tokens), ad::scalar_add(scale1, 1.0)), shift1);
    ad::Var attn = attention_finite(x1, w.attn, num_heads);
    attn = ad::dropout(attn, dropout_rate, train_mode, rng);
    ad::Var mid = ad::add(tokens, ad::mul_rowvec(attn, gate1));

    ad::Var x2 = ad::add_rowvec(
        ad::mul_rowvec(ad::layer_norm_rows(mid), ad::scalar_add(scale2, 1.0)), shift2);
    ad::Var hidden = ad::gelu(ad::add_rowvec(ad::matmul(x2, w.mlp_W1), w.mlp_b1));
    hidden = ad::dropout(hidden, dropout_rate, train_mode, rng);
    ad::Var mlp_out = ad::add_rowvec(ad::matmul(hidden, w.mlp_W2), w.mlp_b2);
    return ad::add(mid, ad::mul_rowvec(mlp_out, gate2));
}

namespace detail {

inline AttentionWeights attn_weights(ModelParams& P, Eigen::Index layer) {
    std::string b = "block" + std::to_string(layer) + ".attn.";
    return {P.at(b + "Wq"), P.at(b + "bq"), P.at(b + "Wk"), P.at(b + "bk"),
            P.at(b + "Wv"), P.at(b + "bv"), P.at(b + "Wo"), P.at(b + "bo")};
}

inline BlockWeights block_weights(ModelParams& P, Eigen::Index layer) {
    std::string b = "block" + std::to_string(layer) + ".";
    return {attn_weights(P, layer), P.at(b + "mlp.W1"), P.at(b + "mlp.b1"),
            P.at(b + "mlp.W2"),     P.at(b + "mlp.b2"), P.at(b + "mod.W"),
            P.at(b + "mod.b")};
}

}  // namespace detail

// Velocity/map network on one measure: every output row depends on all input
// rows through attention. t must be present iff the model is time-conditioned.
inline ad::Var transformer_forward_graph(ModelParams& P, const Mat& points,
                                         std::optional<double> t, bool train_mode = false,
                                         Rng* rng = nullptr) {
    const ModelConfig& cfg = P.config;
    if (cfg.arch != ModelConfig::Arch::Transformer)
        throw ConfigError("transformer_forward on a non-transformer model");
    if (points.cols() != cfg.ambient_dim) throw ShapeError("transformer_forward: wrong d");
    if (!points.allFinite()) throw ValueError("transformer_forward: non-finite input");
    if (t.has_value() != cfg.time_conditioned)
        throw ConfigError(cfg.time_conditioned ? "time-conditioned model needs t"
                                               : "static model takes no t");

    ad::Var x = ad::constant(points);
    ad::Var tokens = ad::add_rowvec(
        ad::matmul(fourier_features(x, P.at("fourier.B")), P.at("input.W")), P.at("input.b"));
    ad::Var cond;
    if (cfg.time_conditioned) {
        ad::Var temb = ad::constant(time_embedding(*t, cfg.time_embed_dim));
        ad::Var t1 = ad::silu(
            ad::add_rowvec(ad::matmul(temb, P.at("time.W1")), P.at("time.b1")));
        cond = ad::add_rowvec(ad::matmul(t1, P.at("time.W2")), P.at("time.b2"));
    } else {
        cond = P.at("static.cond");
    }
    for (Eigen::Index l = 0; l < cfg.num_layers; ++l)
        tokens = adaln_block(tokens, cond, detail::block_weights(P, l), cfg.num_heads,
                             cfg.dropout_rate, train_mode, rng);
    return ad::add_rowvec(ad::matmul(tokens, P.at("out.W")), P.at("out.b"));
}

// Pointwise baseline: rows pass through the same MLP independently, so there
// is no measure dependence by construction.
inline ad::Var mlp_forward_graph(ModelParams& P, const Mat& points, double t) {
    const ModelConfig& cfg = P.config;
    if (cfg.arch != ModelConfig::Arch::Mlp) throw ConfigError("mlp_forward on a non-mlp model");
    if (points.cols() != cfg.ambient_dim) throw ShapeError("mlp_forward: wrong d");
    if (!points.allFinite()) throw ValueError("mlp_forward: non-finite input");

    ad::Var x = ad::constant(points);
    ad::Var temb = ad::repeat_row(ad::constant(time_embedding(t, cfg.time_embed_dim)),
                                  points.rows());
    ad::Var hid = ad::concat_cols({fourier_features(x, P.at("fourier.B")), temb});
    for (Eigen::Index l = 0; l < cfg.num_layers; ++l) {
        std::string name = "mlp" + std::to_string(l);
        hid = ad::gelu(ad::add_rowvec(ad::matmul(hid, P.at(name + ".W")), P.at(name + ".b")));
    }
    return ad::add_rowvec(ad::matmul(hid, P.at("out.W")), P.at("out.b"));
}

// Dispatch on architecture; returns the full graph.
inline ad::Var model_forward_graph(ModelParams& P, const Mat& points, std::optional<double> t,
                                   bool train_mode = false, Rng* rng = nullptr) {
    if (P.config.arch == ModelConfig::Arch::Mlp) {
        if (!t) throw ConfigError("mlp forward needs t");
        return mlp_forward_graph(P, points, *t);
    }
    return transformer_forward_graph(P, points, t, train_mode, rng);
}

// Eval-mode forward: dropout off, graph discarded.
inline Mat model_forward(ModelParams& P, const Mat& points, std::optional<double> t) {
    return model_forward_graph(P, points, t, false, nullptr)->value;
}

// ---- checkpoints ----
// Layout: magic "M2MCKPT\0" | u32 header length | header JSON | sections.
// The header carries the model config, training step, and a section table;
// each section is one parameter tensor in the `.m2m` binary layout.

namespace detail {
constexpr char kCkptMagic[8] = {'M', '2', 'M', 'C', 'K', 'P', 'T', '\0'};
}

inline void save_checkpoint(const ModelParams& P, long step, const std::filesystem::path& path) {
    std::string payload;
    nlohmann::json sections = nlohmann::json::array();
    for (const auto& [name, v] : P.tensors) {
        std::string sec = encode_pointcloud(PointCloud{v->value});
        sections.push_back({{"name", name},
                            {"rows", v->value.rows()},
                            {"cols", v->value.cols()},
                            {"offset", payload.size()},
                            {"bytes", sec.size()}});
        payload += sec;
    }
    nlohmann::json header{{"format_version", 1},
                          {"model", to_json(P.config)},
                          {"step", step},
                          {"sections", sections}};
    std::string head = header.dump();

    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open for write: " + tmp.string());
        out.write(detail::kCkptMagic, 8);
        uint32_t len = static_cast<uint32_t>(head.size());
        out.write(reinterpret_cast<const char*>(&len), 4);
        out.write(head.data(), static_cast<std::streamsize>(head.size()));
        out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
        if (!out) throw IoError("write failed: " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("rename failed: " + path.string() + ": " + ec.message());
}

inline std::pair<ModelParams, long> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path.string());
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (buf.size() < 12 || std::memcmp(buf.data(), detail::kCkptMagic, 8) != 0)
        throw FormatError(path.string() + ": not an m2m checkpoint (bad magic)");
    uint32_t len;
    std::memcpy(&len, buf.data() + 8, 4);
    if (buf.size() < 12 + static_cast<size_t>(len))
        throw TruncatedError(path.string() + ": header truncated");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(buf.substr(12, len));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": bad checkpoint header: " + e.what());
    }
    ModelConfig cfg = model_config_from_json(header.at("model"));
    long step = header.at("step").get<long>();
    Rng throwaway(0);
    ModelParams P = init_params(cfg, throwaway);
    const size_t base = 12 + static_cast<size_t>(len);
    for (const auto& sec : header.at("sections")) {
        std::string name = sec.at("name").get<std::string>();
        size_t off = sec.at("offset").get<size_t>(), bytes = sec.at("bytes").get<size_t>();
        if (base + off + bytes > buf.size())
            throw TruncatedError(path.string() + ": section " + name + " out of range");
        PointCloud tensor = decode_pointcloud(buf.substr(base + off, bytes), name);
        ad::Var& slot = P.at(name);
        if (tensor.points.rows() != slot->value.rows() ||
            tensor.points.cols() != slot->value.cols())
            throw FormatError(path.string() + ": section " + name + " has wrong shape");
        slot->value = tensor.points;
    }
    return {std::move(P), step};
}

}  // namespace m2m
