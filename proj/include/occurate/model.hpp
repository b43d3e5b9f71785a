#pragma once

// R-Tran and the plain convolutional baseline. Both share a residual conv
// backbone; R-Tran adds per-species target embeddings, per-state embeddings,
// and a transformer encoder over [feature tokens ++ species tokens] with no
// positional encodings, so predictions are equivariant under species
// permutation.

#include <array>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "occurate/autodiff.hpp"
#include "occurate/catalog.hpp"
#include "occurate/checkpoint.hpp"
#include "occurate/error.hpp"
#include "occurate/rng.hpp"
#include "occurate/tensor.hpp"

namespace occurate::model {

// Conditioning states: unknown, absent, and the four quantized positive bins.
constexpr std::array<double, 6> kStateValues = {-1.0, 0.0, 0.25, 0.5, 0.75, 1.0};

// unknown -> -1; known zero -> 0; known positive -> smallest quarter >= rate.
double quantize_state(bool known, double rate);

// Row of kStateValues for a state value; errors on anything else.
int state_row(double state_value);

struct StateVector {
    std::vector<double> states;
};

struct KnownInfo {
    bool is_presence = false;  // true: value is a 0/1 presence flag
    double value = 0.0;        // encounter rate, or the presence flag
};

StateVector states_from_partial(const catalog::SpeciesCatalog& catalog,
                                const std::map<std::string, KnownInfo>& known);

StateVector all_unknown(int n);

struct ModelConfig {
    std::string arch = "rtran";  // "rtran" | "baseline"
    int n_species = 0;
    int in_channels = 30;
    std::vector<int> widths = {16, 32, 64, 128};
    int embed_dim = 64;      // d
    int layers = 2;          // L
    int heads = 4;           // h
    int ff_dim = 128;
    int feature_tokens = 1;  // 1, or 4 pooled spatial quadrants
    int gn_groups = 8;
    uint64_t init_seed = 0;

    int feature_dim() const { return widths.back(); }

    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);
};

template <typename T>
using ParamMap = ckpt::ParamMap<T>;

template <typename T>
struct ParamVars {
    std::map<std::string, ad::Var<T>> vars;

    ad::Var<T> at(const std::string& name) const {
        auto it = vars.find(name);
        if (it == vars.end()) data_error("model parameter missing: " + name);
        return it->second;
    }
};

namespace detail {

inline int gn_groups_for(const ModelConfig& cfg, int channels) {
    int g = cfg.gn_groups;
    while (g > 1 && channels % g != 0) --g;
    return g;
}

} // namespace detail

// ---------------------------------------------------------------------------
// parameter construction

template <typename T>
ParamMap<T> init_params(const ModelConfig& cfg) {
    ParamMap<T> p;
    auto normal_tensor = [&](const std::string& name, Shape shape, double std_dev) {
        Rng rng(derive_seed(cfg.init_seed, fnv1a64(name)));
        Tensor<T> t(shape);
        for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng.normal() * std_dev);
        p.emplace(name, std::move(t));
    };
    auto const_tensor = [&](const std::string& name, Shape shape, double v) {
        p.emplace(name, Tensor<T>(shape, static_cast<T>(v)));
    };

    int c_prev = cfg.in_channels;
    for (size_t i = 0; i < cfg.widths.size(); ++i) {
        int w = cfg.widths[i];
        std::string base = "backbone.s" + std::to_string(i) + ".";
        normal_tensor(base + "conv1.w", {w, c_prev, 3, 3}, std::sqrt(2.0 / (c_prev * 9)));
        const_tensor(base + "gn1.g", {w}, 1.0);
        const_tensor(base + "gn1.b", {w}, 0.0);
        normal_tensor(base + "conv2.w", {w, w, 3, 3}, std::sqrt(2.0 / (w * 9)));
        const_tensor(base + "gn2.g", {w}, 1.0);
        const_tensor(base + "gn2.b", {w}, 0.0);
        int stride = i == 0 ? 1 : 2;
        if (c_prev != w || stride != 1)
            normal_tensor(base + "skip.w", {w, c_prev, 1, 1}, std::sqrt(2.0 / c_prev));
        c_prev = w;
    }
    const int d_f = cfg.feature_dim();

    if (cfg.arch == "baseline") {
        normal_tensor("head.w", {d_f, cfg.n_species}, std::sqrt(2.0 / (d_f + cfg.n_species)));
        const_tensor("head.b", {cfg.n_species}, 0.0);
        return p;
    }

    const int d = cfg.embed_dim;
    normal_tensor("proj.w", {d_f, d}, std::sqrt(2.0 / (d_f + d)));
    const_tensor("proj.b", {d}, 0.0);
    normal_tensor("embed.targets", {cfg.n_species, d}, 0.02);
    normal_tensor("embed.states", {6, d}, 0.02);
    for (int l = 0; l < cfg.layers; ++l) {
        std::string base = "enc.l" + std::to_string(l) + ".";
        const_tensor(base + "ln1.g", {d}, 1.0);
        const_tensor(base + "ln1.b", {d}, 0.0);
        for (const char* nm : {"wq", "wk", "wv", "wo"})
            normal_tensor(base + "attn." + std::string(nm), {d, d}, std::sqrt(1.0 / d));
        for (const char* nm : {"bq", "bk", "bv", "bo"}) const_tensor(base + "attn." + std::string(nm), {d}, 0.0);
        const_tensor(base + "ln2.g", {d}, 1.0);
        const_tensor(base + "ln2.b", {d}, 0.0);
        normal_tensor(base + "ffn.w1", {d, cfg.ff_dim}, std::sqrt(2.0 / (d + cfg.ff_dim)));
        const_tensor(base + "ffn.b1", {cfg.ff_dim}, 0.0);
        normal_tensor(base + "ffn.w2", {cfg.ff_dim, d}, std::sqrt(2.0 / (d + cfg.ff_dim)));
        const_tensor(base + "ffn.b2", {d}, 0.0);
    }
    const_tensor("enc.final.g", {d}, 1.0);
    const_tensor("enc.final.b", {d}, 0.0);
    normal_tensor("head.w", {d, 1}, std::sqrt(2.0 / (d + 1)));
    const_tensor("head.b", {1}, 0.0);
    return p;
}

template <typename T>
ParamVars<T> register_params(ad::Graph<T>& g, const ParamMap<T>& params) {
    ParamVars<T> out;
    for (const auto& [name, t] : params) out.vars.emplace(name, g.leaf(t, name));
    return out;
}

// Same as register_params but as unnamed constants (no gradients tracked by
// name); used at inference and for feedback-prop's frozen model.
template <typename T>
ParamVars<T> register_constants(ad::Graph<T>& g, const ParamMap<T>& params) {
    ParamVars<T> out;
    for (const auto& [name, t] : params) out.vars.emplace(name, g.constant(t));
    return out;
}

// ---------------------------------------------------------------------------
// forward passes

// Residual stages up to the last feature map: [N, C, H, W] -> [N, d_f, h', w'].
template <typename T>
ad::Var<T> backbone_features(ad::Graph<T>& g, const ModelConfig& cfg, const ParamVars<T>& pv,
                             ad::Var<T> x) {
    const Shape& s = g.value(x).shape();
    if (s.size() != 4 || s[1] != cfg.in_channels)
        data_error("backbone: expected input channels " + std::to_string(cfg.in_channels) +
                   ", got shape " + shape_str(s));
    int c_prev = cfg.in_channels;
    for (size_t i = 0; i < cfg.widths.size(); ++i) {
        int w = cfg.widths[i];
        std::string base = "backbone.s" + std::to_string(i) + ".";
        int stride = i == 0 ? 1 : 2;
        int groups = detail::gn_groups_for(cfg, w);
        ad::Var<T> h = ad::conv2d(x, pv.at(base + "conv1.w"), stride, 1);
        h = ad::group_norm(h, pv.at(base + "gn1.g"), pv.at(base + "gn1.b"), groups);
        h = ad::relu(h);
        h = ad::conv2d(h, pv.at(base + "conv2.w"), 1, 1);
        h = ad::group_norm(h, pv.at(base + "gn2.g"), pv.at(base + "gn2.b"), groups);
        ad::Var<T> sk = x;
        if (c_prev != w || stride != 1) sk = ad::conv2d(x, pv.at(base + "skip.w"), stride, 0);
        x = ad::relu(ad::add(h, sk));
        c_prev = w;
    }
    return x;
}

// Pooled backbone feature vector: [N, C, H, W] -> [N, d_f].
template <typename T>
ad::Var<T> backbone_forward(ad::Graph<T>& g, const ModelConfig& cfg, const ParamVars<T>& pv,
                            ad::Var<T> x) {
    return ad::mean_pool(backbone_features(g, cfg, pv, x));
}

// R-Tran forward. state_rows: [N, n_species] rows into the state table.
// Returns predictions [N, n_species] in (0,1).
template <typename T>
ad::Var<T> rtran_forward(ad::Graph<T>& g, const ModelConfig& cfg, const ParamVars<T>& pv,
                         ad::Var<T> patch, const Tensor<int64_t>& state_rows) {
    const int n = cfg.n_species;
    const int d = cfg.embed_dim;
    const int64_t batch = g.value(patch).shape()[0];
    if (state_rows.rank() != 2 || state_rows.shape()[0] != batch || state_rows.shape()[1] != n)
        data_error("rtran_forward: state vector shape " + shape_str(state_rows.shape()) +
                   " does not match batch " + std::to_string(batch) + " x n " + std::to_string(n));

    ad::Var<T> fmap = backbone_features(g, cfg, pv, patch);
    ad::Var<T> ftok;
    if (cfg.feature_tokens == 1) {
        ad::Var<T> f = ad::mean_pool(fmap);  // [N, d_f]
        ad::Var<T> proj = ad::add(ad::matmul(f, pv.at("proj.w")), pv.at("proj.b"));
        ftok = ad::reshape(proj, {batch, 1, d});
    } else if (cfg.feature_tokens == 4) {
        ad::Var<T> q = ad::avg_pool_to(fmap, 2, 2);                      // [N, d_f, 2, 2]
        q = ad::reshape(q, {batch, cfg.feature_dim(), 4});
        q = ad::permute(q, {0, 2, 1});                                   // [N, 4, d_f]
        q = ad::reshape(q, {batch * 4, cfg.feature_dim()});
        ad::Var<T> proj = ad::add(ad::matmul(q, pv.at("proj.w")), pv.at("proj.b"));
        ftok = ad::reshape(proj, {batch, 4, d});
    } else {
        config_error("feature_tokens must be 1 or 4, got " + std::to_string(cfg.feature_tokens));
    }

    Tensor<int64_t> species_idx(Shape{n});
    for (int i = 0; i < n; ++i) species_idx[i] = i;
    ad::Var<T> t_emb = ad::gather_rows(pv.at("embed.targets"), species_idx);  // [n, d]
    ad::Var<T> s_emb = ad::gather_rows(pv.at("embed.states"), state_rows);    // [N, n, d]
    ad::Var<T> species_tokens = ad::add(s_emb, t_emb);                        // broadcast over batch

    ad::Var<T> x = ad::concat<T>({ftok, species_tokens}, 1);  // [N, ft + n, d]
    const int64_t seq = cfg.feature_tokens + n;
    const int dh = d / cfg.heads;
    if (d % cfg.heads != 0) config_error("embed_dim must be divisible by heads");

    for (int l = 0; l < cfg.layers; ++l) {
        std::string base = "enc.l" + std::to_string(l) + ".";
        ad::Var<T> h = ad::layer_norm(x, pv.at(base + "ln1.g"), pv.at(base + "ln1.b"));
        ad::Var<T> flat = ad::reshape(h, {batch * seq, d});
        auto heads_of = [&](const char* w, const char* b) {
            ad::Var<T> y = ad::add(ad::matmul(flat, pv.at(base + "attn." + std::string(w))),
                                   pv.at(base + "attn." + std::string(b)));
            y = ad::reshape(y, {batch, seq, cfg.heads, dh});
            return ad::permute(y, {0, 2, 1, 3});  // [N, heads, S, dh]
        };
        ad::Var<T> att = ad::scaled_dot_product_attention(heads_of("wq", "bq"),
                                                          heads_of("wk", "bk"),
                                                          heads_of("wv", "bv"));
        att = ad::permute(att, {0, 2, 1, 3});
        att = ad::reshape(att, {batch * seq, d});
        att = ad::add(ad::matmul(att, pv.at(base + "attn.wo")), pv.at(base + "attn.bo"));
        x = ad::add(x, ad::reshape(att, {batch, seq, d}));

        ad::Var<T> h2 = ad::layer_norm(x, pv.at(base + "ln2.g"), pv.at(base + "ln2.b"));
        ad::Var<T> f2 = ad::reshape(h2, {batch * seq, d});
        f2 = ad::gelu(ad::add(ad::matmul(f2, pv.at(base + "ffn.w1")), pv.at(base + "ffn.b1")));
        f2 = ad::add(ad::matmul(f2, pv.at(base + "ffn.w2")), pv.at(base + "ffn.b2"));
        x = ad::add(x, ad::reshape(f2, {batch, seq, d}));
    }
    x = ad::layer_norm(x, pv.at("enc.final.g"), pv.at("enc.final.b"));

    ad::Var<T> species_out = ad::slice(x, 1, cfg.feature_tokens, n);  // [N, n, d]
    ad::Var<T> flat_out = ad::reshape(species_out, {batch * n, d});
    ad::Var<T> logits = ad::add(ad::matmul(flat_out, pv.at("head.w")), pv.at("head.b"));
    return ad::sigmoid(ad::reshape(logits, {batch, static_cast<int64_t>(n)}));
}

// Baseline forward: backbone -> linear n-way head -> sigmoid. [N, n] in (0,1).
template <typename T>
ad::Var<T> baseline_forward(ad::Graph<T>& g, const ModelConfig& cfg, const ParamVars<T>& pv,
                            ad::Var<T> patch) {
    ad::Var<T> f = backbone_forward(g, cfg, pv, patch);
    return ad::sigmoid(ad::add(ad::matmul(f, pv.at("head.w")), pv.at("head.b")));
}

// Row tensor into the state-embedding table for a batch of state vectors.
Tensor<int64_t> state_rows_tensor(const std::vector<StateVector>& states);

} // namespace occurate::model
