#include "occurate/train.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "occurate/error.hpp"

namespace occurate::train {

namespace {

constexpr double kAdamBeta1 = 0.9;
constexpr double kAdamBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

class AdamState {
public:
    AdamState(const ckpt::ParamMap<float>& params, double lr, double wd, bool decoupled_wd)
        : lr_(lr), wd_(wd), decoupled_(decoupled_wd) {
        for (const auto& [name, t] : params) {
            m_.emplace(name, Tensor<float>(t.shape()));
            v_.emplace(name, Tensor<float>(t.shape()));
        }
    }

    void step(ckpt::ParamMap<float>& params, const std::map<std::string, Tensor<float>>& grads) {
        ++t_;
        const float bc1 = 1.0f - static_cast<float>(std::pow(kAdamBeta1, t_));
        const float bc2 = 1.0f - static_cast<float>(std::pow(kAdamBeta2, t_));
        for (auto& [name, theta] : params) {
            const Tensor<float>& g = grads.at(name);
            Tensor<float>& m = m_.at(name);
            Tensor<float>& v = v_.at(name);
            for (int64_t i = 0; i < theta.numel(); ++i) {
                m[i] = static_cast<float>(kAdamBeta1) * m[i] +
                       (1.0f - static_cast<float>(kAdamBeta1)) * g[i];
                v[i] = static_cast<float>(kAdamBeta2) * v[i] +
                       (1.0f - static_cast<float>(kAdamBeta2)) * g[i] * g[i];
                float mhat = m[i] / bc1;
                float vhat = v[i] / bc2;
                float update = mhat / (std::sqrt(vhat) + static_cast<float>(kAdamEps));
                if (decoupled_) update += static_cast<float>(wd_) * theta[i];
                theta[i] -= static_cast<float>(lr_) * update;
            }
        }
    }

private:
    double lr_, wd_;
    bool decoupled_;
    int64_t t_ = 0;
    std::map<std::string, Tensor<float>> m_, v_;
};

// Normalized patch block [B, C, H, W] for the given sample indices.
Tensor<float> batch_patches(const data::Dataset& ds, const std::vector<int64_t>& idx) {
    const Tensor<float>& first = ds.patch(idx[0]);
    Shape s = first.shape();
    Tensor<float> out(Shape{static_cast<int64_t>(idx.size()), s[0], s[1], s[2]});
    const int64_t per = first.numel();
    const int64_t hw = s[1] * s[2];
    for (size_t b = 0; b < idx.size(); ++b) {
        const Tensor<float>& p = ds.patch(idx[b]);
        if (p.shape() != s) data_error("inconsistent patch shapes in dataset");
        float* dst = out.data() + static_cast<int64_t>(b) * per;
        for (int64_t c = 0; c < s[0]; ++c) {
            const float m = static_cast<float>(ds.stats.mean[static_cast<size_t>(c)]);
            const float sd = static_cast<float>(std::max(ds.stats.std[static_cast<size_t>(c)], 1e-6));
            const float* src = p.data() + c * hw;
            for (int64_t i = 0; i < hw; ++i) dst[c * hw + i] = (src[i] - m) / sd;
        }
    }
    return out;
}

Tensor<float> batch_targets(const data::Dataset& ds, const std::vector<int64_t>& idx) {
    const int n = ds.n_species();
    Tensor<float> out(Shape{static_cast<int64_t>(idx.size()), n});
    for (size_t b = 0; b < idx.size(); ++b)
        for (int i = 0; i < n; ++i)
            out[static_cast<int64_t>(b) * n + i] =
                static_cast<float>(ds.targets[static_cast<size_t>(idx[b])][static_cast<size_t>(i)]);
    return out;
}

Tensor<float> batch_avail(const data::Dataset& ds, const std::vector<int64_t>& idx) {
    const int n = ds.n_species();
    Tensor<float> out(Shape{static_cast<int64_t>(idx.size()), n});
    for (size_t b = 0; b < idx.size(); ++b)
        for (int i = 0; i < n; ++i)
            out[static_cast<int64_t>(b) * n + i] =
                ds.avail[static_cast<size_t>(idx[b])][static_cast<size_t>(i)] ? 1.0f : 0.0f;
    return out;
}

// Training states: unknown where the label mask hides the species or the
// species is unavailable at the sample; quantized true rate otherwise.
Tensor<int64_t> batch_state_rows(const data::Dataset& ds, const std::vector<int64_t>& idx,
                                 const LabelMask* mask) {
    const int n = ds.n_species();
    Tensor<int64_t> rows(Shape{static_cast<int64_t>(idx.size()), n});
    for (size_t b = 0; b < idx.size(); ++b) {
        const auto& rates = ds.targets[static_cast<size_t>(idx[b])];
        const auto& avail = ds.avail[static_cast<size_t>(idx[b])];
        for (int i = 0; i < n; ++i) {
            double state;
            bool hidden = mask != nullptr && mask->unknown[static_cast<size_t>(i)] != 0;
            if (hidden || !avail[static_cast<size_t>(i)])
                state = -1.0;
            else
                state = model::quantize_state(true, rates[static_cast<size_t>(i)]);
            rows[static_cast<int64_t>(b) * n + i] = model::state_row(state);
        }
    }
    return rows;
}

double masked_val_mse(const data::Dataset& ds, const model::ModelConfig& cfg,
                      const ckpt::ParamMap<float>& params, const std::vector<int64_t>& val_idx) {
    const int n = ds.n_species();
    double acc = 0.0, count = 0.0;
    const int64_t chunk = 64;
    for (size_t start = 0; start < val_idx.size(); start += chunk) {
        std::vector<int64_t> idx(val_idx.begin() + static_cast<int64_t>(start),
                                 val_idx.begin() + std::min(start + chunk, val_idx.size()));
        Tensor<float> x = batch_patches(ds, idx);
        Tensor<float> preds;
        if (cfg.arch == "rtran") {
            Tensor<int64_t> rows(Shape{static_cast<int64_t>(idx.size()), n});
            rows.fill(model::state_row(-1.0));
            preds = rtran_predict(params, cfg, x, rows);
        } else {
            preds = baseline_predict(params, cfg, x);
        }
        for (size_t b = 0; b < idx.size(); ++b)
            for (int i = 0; i < n; ++i)
                if (ds.avail[static_cast<size_t>(idx[b])][static_cast<size_t>(i)]) {
                    double d = preds[static_cast<int64_t>(b) * n + i] -
                               ds.targets[static_cast<size_t>(idx[b])][static_cast<size_t>(i)];
                    acc += d * d;
                    count += 1.0;
                }
    }
    return count > 0 ? acc / count : 0.0;
}

} // namespace

LabelMask sample_label_mask(int n, Rng& rng) {
    if (n < 1) config_error("sample_label_mask: n must be >= 1");
    const int64_t lo = (static_cast<int64_t>(n) + 3) / 4;  // ceil(0.25 n)
    const int64_t u = rng.uniform_int(lo, n);
    LabelMask mask;
    mask.unknown.assign(static_cast<size_t>(n), 0);
    mask.n_unknown = static_cast<int>(u);
    for (int64_t i : rng.sample_without_replacement(n, u)) mask.unknown[static_cast<size_t>(i)] = 1;
    return mask;
}

TrainResult train(const data::Dataset& ds, model::ModelConfig mcfg, const TrainConfig& tcfg) {
    if (tcfg.epochs <= 0) config_error("train: epochs must be positive");
    if (tcfg.batch_size <= 0) config_error("train: batch_size must be positive");
    auto train_idx = ds.split_indices(geo::Split::Train);
    auto val_idx = ds.split_indices(geo::Split::Val);
    if (train_idx.empty()) data_error("train: dataset has no train split");
    if (val_idx.empty()) data_error("train: dataset has no val split");
    if (static_cast<int64_t>(tcfg.batch_size) > static_cast<int64_t>(train_idx.size()))
        config_error("train: batch_size exceeds train split size");

    mcfg.n_species = ds.n_species();
    mcfg.in_channels = static_cast<int>(ds.patch(train_idx[0]).shape()[0]);
    mcfg.init_seed = derive_seed(tcfg.seed, 0x696e6974ULL);

    std::string opt = tcfg.optimizer;
    if (opt.empty()) opt = mcfg.arch == "rtran" ? "adamw" : "adam";
    if (opt != "adam" && opt != "adamw") config_error("train: unknown optimizer " + opt);

    TrainResult result;
    result.model_config = mcfg;
    ckpt::ParamMap<float> params = model::init_params<float>(mcfg);
    AdamState adam(params, tcfg.learning_rate, tcfg.weight_decay, opt == "adamw");

    Rng mask_rng(derive_seed(tcfg.seed, 0x6d61736bULL));
    const bool use_mask = mcfg.arch == "rtran" && tcfg.mask_training;
    const int n = ds.n_species();
    const int64_t n_batches = static_cast<int64_t>(train_idx.size()) / tcfg.batch_size;

    for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
        Rng shuffle_rng(derive_seed(tcfg.seed, 0x65706f63680000ULL + static_cast<uint64_t>(epoch)));
        std::vector<int64_t> perm = train_idx;
        shuffle_rng.shuffle(perm);

        double epoch_loss = 0.0;
        for (int64_t b = 0; b < n_batches; ++b) {
            std::vector<int64_t> idx(perm.begin() + b * tcfg.batch_size,
                                     perm.begin() + (b + 1) * tcfg.batch_size);
            Tensor<float> x = batch_patches(ds, idx);
            Tensor<float> y = batch_targets(ds, idx);
            Tensor<float> m = batch_avail(ds, idx);

            ad::Graph<float> g;
            auto pv = model::register_params(g, params);
            ad::Var<float> xv = g.constant(x);
            ad::Var<float> preds;
            if (mcfg.arch == "rtran") {
                LabelMask lmask;
                if (use_mask) lmask = sample_label_mask(n, mask_rng);
                Tensor<int64_t> rows = batch_state_rows(ds, idx, use_mask ? &lmask : nullptr);
                preds = model::rtran_forward(g, mcfg, pv, xv, rows);
            } else {
                preds = model::baseline_forward(g, mcfg, pv, xv);
            }
            ad::Var<float> loss = masked_ce_loss_graph(g, preds, y, m);
            double lval = static_cast<double>(g.value(loss).item());
            if (!std::isfinite(lval))
                numeric_error("non-finite training loss at epoch " + std::to_string(epoch) +
                              " batch " + std::to_string(b));
            epoch_loss += lval;
            auto grads = g.backward(loss);
            adam.step(params, grads);
        }
        epoch_loss /= static_cast<double>(n_batches);

        double val_mse = masked_val_mse(ds, mcfg, params, val_idx);
        result.history.push_back({epoch, epoch_loss, val_mse});
        if (result.best_epoch < 0 || val_mse < result.best_val_mse) {
            result.best_epoch = epoch;
            result.best_val_mse = val_mse;
            result.best_params = params;
        }
    }
    return result;
}

nlohmann::json TrainConfig::to_json() const {
    nlohmann::json j;
    j["epochs"] = epochs;
    j["batch_size"] = batch_size;
    j["learning_rate"] = learning_rate;
    j["weight_decay"] = weight_decay;
    j["optimizer"] = optimizer;
    j["seed"] = seed;
    j["mask_training"] = mask_training;
    return j;
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    TrainConfig cfg;
    cfg.epochs = j.value("epochs", cfg.epochs);
    cfg.batch_size = j.value("batch_size", cfg.batch_size);
    cfg.learning_rate = j.value("learning_rate", cfg.learning_rate);
    cfg.weight_decay = j.value("weight_decay", cfg.weight_decay);
    cfg.optimizer = j.value("optimizer", cfg.optimizer);
    cfg.seed = j.value("seed", cfg.seed);
    cfg.mask_training = j.value("mask_training", cfg.mask_training);
    return cfg;
}

void save_training_outputs(const std::string& out_dir, const TrainResult& result,
                           const TrainConfig& tcfg, const data::Dataset& ds) {
    std::filesystem::create_directories(out_dir);
    nlohmann::json config;
    config["model"] = result.model_config.to_json();
    config["train"] = tcfg.to_json();
    config["dataset_hash"] = ds.content_hash;
    config["catalog"] = ds.catalog.to_json();
    config["norm_stats"] = {{"mean", ds.stats.mean}, {"std", ds.stats.std}};
    ckpt::save_checkpoint(out_dir + "/checkpoint.bin", result.best_params, config);

    nlohmann::json hist;
    hist["seed"] = tcfg.seed;
    hist["config"] = {{"model", result.model_config.to_json()}, {"train", tcfg.to_json()}};
    hist["dataset_hash"] = ds.content_hash;
    nlohmann::json epochs = nlohmann::json::array();
    for (const auto& e : result.history)
        epochs.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_mse", e.val_mse}});
    hist["epochs"] = epochs;
    hist["best_epoch"] = result.best_epoch;
    hist["best_val_mse"] = result.best_val_mse;
    std::ofstream os(out_dir + "/history.json");
    if (!os) data_error("cannot write history.json in " + out_dir);
    os << hist.dump(2) << "\n";
}

Tensor<float> rtran_predict(const ckpt::ParamMap<float>& params, const model::ModelConfig& cfg,
                            const Tensor<float>& patches, const Tensor<int64_t>& state_rows) {
    ad::Graph<float> g;
    auto pv = model::register_constants(g, params);
    ad::Var<float> out = model::rtran_forward(g, cfg, pv, g.constant(patches), state_rows);
    return g.value(out);
}

Tensor<float> baseline_predict(const ckpt::ParamMap<float>& params, const model::ModelConfig& cfg,
                               const Tensor<float>& patches) {
    ad::Graph<float> g;
    auto pv = model::register_constants(g, params);
    ad::Var<float> out = model::baseline_forward(g, cfg, pv, g.constant(patches));
    return g.value(out);
}

PredictResult predict(const ckpt::Checkpoint& checkpoint, const geo::InputPatch& patch,
                      const std::map<std::string, model::KnownInfo>& known) {
    model::ModelConfig cfg = model::ModelConfig::from_json(checkpoint.config.at("model"));
    if (cfg.arch != "rtran")
        data_error("predict: checkpoint is a '" + cfg.arch + "' model, expected rtran");
    auto catalog = catalog::SpeciesCatalog::from_json(checkpoint.config.at("catalog"));

    geo::InputPatch work = patch;
    if (!work.normalized) {
        geo::NormStats stats;
        stats.mean = checkpoint.config.at("norm_stats").at("mean").get<std::vector<double>>();
        stats.std = checkpoint.config.at("norm_stats").at("std").get<std::vector<double>>();
        geo::apply_norm(work, stats);
    }

    model::StateVector sv = model::states_from_partial(catalog, known);
    Tensor<int64_t> rows = model::state_rows_tensor({sv});
    Shape s = work.data.shape();
    Tensor<float> x = work.data.reshaped({1, s[0], s[1], s[2]});
    Tensor<float> preds = rtran_predict(checkpoint.params, cfg, x, rows);

    PredictResult out;
    out.rates.resize(static_cast<size_t>(cfg.n_species));
    out.echoed.assign(static_cast<size_t>(cfg.n_species), 0);
    for (int i = 0; i < cfg.n_species; ++i) out.rates[static_cast<size_t>(i)] = preds[i];
    for (const auto& [name, info] : known) {
        int id = catalog.index_of(name);
        out.rates[static_cast<size_t>(id)] = info.is_presence ? (info.value != 0.0 ? 1.0 : 0.0)
                                                              : info.value;
        out.echoed[static_cast<size_t>(id)] = 1;
    }
    return out;
}

FeedbackPropResult feedback_prop(const ckpt::ParamMap<float>& params,
                                 const model::ModelConfig& cfg, const Tensor<float>& patch,
                                 const std::map<int, double>& known_rates, int iters,
                                 double rate) {
    if (iters < 0) config_error("feedback_prop: iters must be >= 0");
    if (known_rates.empty()) config_error("feedback_prop: known set is empty");
    if (cfg.arch != "rtran" && cfg.arch != "baseline")
        config_error("feedback_prop: unknown arch " + cfg.arch);
    if (cfg.arch == "rtran")
        data_error("feedback_prop: requires a baseline (plain convolutional) checkpoint");

    const int n = cfg.n_species;
    Tensor<float> target(Shape{1, n});
    Tensor<float> mask(Shape{1, n});
    for (const auto& [id, r] : known_rates) {
        if (id < 0 || id >= n)
            data_error("feedback_prop: species id " + std::to_string(id) + " out of range");
        target[id] = static_cast<float>(r);
        mask[id] = 1.0f;
    }

    Shape s = patch.shape();
    Tensor<float> x = patch.rank() == 3 ? patch.reshaped({1, s[0], s[1], s[2]}) : patch;

    FeedbackPropResult res;
    for (int it = 0; it < iters; ++it) {
        ad::Graph<float> g;
        auto pv = model::register_constants(g, params);
        ad::Var<float> xv = g.leaf(x, "input");
        ad::Var<float> preds = model::baseline_forward(g, cfg, pv, xv);
        ad::Var<float> loss = masked_ce_loss_graph(g, preds, target, mask);
        if (it == 0) res.initial_partial_loss = static_cast<double>(g.value(loss).item());
        auto grads = g.backward(loss);
        const Tensor<float>& gx = grads.at("input");
        for (int64_t i = 0; i < x.numel(); ++i) x[i] -= static_cast<float>(rate) * gx[i];
    }

    ad::Graph<float> g;
    auto pv = model::register_constants(g, params);
    ad::Var<float> preds = model::baseline_forward(g, cfg, pv, g.constant(x));
    ad::Var<float> loss = masked_ce_loss_graph(g, preds, target, mask);
    res.final_partial_loss = static_cast<double>(g.value(loss).item());
    if (iters == 0) res.initial_partial_loss = res.final_partial_loss;
    const Tensor<float>& pv_out = g.value(preds);
    res.predictions.resize(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) res.predictions[static_cast<size_t>(i)] = pv_out[i];
    return res;
}

} // namespace occurate::train
