#include "occurate/model.hpp"

namespace occurate::model {

double quantize_state(bool known, double rate) {
    if (!known) return -1.0;
    if (!(rate >= 0.0 && rate <= 1.0))
        data_error("quantize_state: rate " + std::to_string(rate) + " outside [0,1]");
    if (rate == 0.0) return 0.0;
    if (rate <= 0.25) return 0.25;
    if (rate <= 0.5) return 0.5;
    if (rate <= 0.75) return 0.75;
    return 1.0;
}

int state_row(double state_value) {
    for (size_t i = 0; i < kStateValues.size(); ++i)
        if (state_value == kStateValues[i]) return static_cast<int>(i);
    data_error("invalid state value " + std::to_string(state_value) +
               "; expected one of {-1, 0, 0.25, 0.5, 0.75, 1.0}");
}

StateVector all_unknown(int n) {
    StateVector sv;
    sv.states.assign(static_cast<size_t>(n), -1.0);
    return sv;
}

StateVector states_from_partial(const catalog::SpeciesCatalog& catalog,
                                const std::map<std::string, KnownInfo>& known) {
    StateVector sv = all_unknown(catalog.size());
    for (const auto& [name, info] : known) {
        int id = catalog.index_of(name);  // errors on unknown species
        if (info.is_presence)
            sv.states[static_cast<size_t>(id)] = info.value != 0.0 ? 1.0 : 0.0;
        else
            sv.states[static_cast<size_t>(id)] = quantize_state(true, info.value);
    }
    return sv;
}

Tensor<int64_t> state_rows_tensor(const std::vector<StateVector>& states) {
    if (states.empty()) data_error("state_rows_tensor: empty batch");
    const int64_t n = static_cast<int64_t>(states[0].states.size());
    Tensor<int64_t> rows(Shape{static_cast<int64_t>(states.size()), n});
    for (size_t b = 0; b < states.size(); ++b) {
        if (static_cast<int64_t>(states[b].states.size()) != n)
            data_error("state_rows_tensor: ragged state vectors");
        for (int64_t i = 0; i < n; ++i)
            rows[static_cast<int64_t>(b) * n + i] = state_row(states[b].states[static_cast<size_t>(i)]);
    }
    return rows;
}

nlohmann::json ModelConfig::to_json() const {
    nlohmann::json j;
    j["arch"] = arch;
    j["n_species"] = n_species;
    j["in_channels"] = in_channels;
    j["widths"] = widths;
    j["embed_dim"] = embed_dim;
    j["layers"] = layers;
    j["heads"] = heads;
    j["ff_dim"] = ff_dim;
    j["feature_tokens"] = feature_tokens;
    j["gn_groups"] = gn_groups;
    j["init_seed"] = init_seed;
    return j;
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    cfg.arch = j.value("arch", cfg.arch);
    cfg.n_species = j.at("n_species").get<int>();
    cfg.in_channels = j.value("in_channels", cfg.in_channels);
    cfg.widths = j.value("widths", cfg.widths);
    cfg.embed_dim = j.value("embed_dim", cfg.embed_dim);
    cfg.layers = j.value("layers", cfg.layers);
    cfg.heads = j.value("heads", cfg.heads);
    cfg.ff_dim = j.value("ff_dim", cfg.ff_dim);
    cfg.feature_tokens = j.value("feature_tokens", cfg.feature_tokens);
    cfg.gn_groups = j.value("gn_groups", cfg.gn_groups);
    cfg.init_seed = j.value("init_seed", cfg.init_seed);
    if (cfg.arch != "rtran" && cfg.arch != "baseline")
        config_error("unknown model arch: " + cfg.arch);
    return cfg;
}

} // namespace occurate::model
