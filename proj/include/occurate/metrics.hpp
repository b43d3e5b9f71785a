#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace occurate::metrics {

using Rows = std::vector<std::vector<double>>;  // [samples][species]

// Element-mean absolute / squared error over the group's indices across
// samples. group_mask selects species; errors on an empty group.
double mae(const Rows& preds, const Rows& targets, const std::vector<uint8_t>& group_mask);
double mse(const Rows& preds, const Rows& targets, const std::vector<uint8_t>& group_mask);

// |top-k(pred) ∩ top-k(target)| / k * 100 with ties broken by lower species
// index; k is clipped to the vector length.
double top_k(const std::vector<double>& pred, const std::vector<double>& target, int k);

struct AdaptiveTopK {
    double percentage = 0.0;  // mean over used samples
    int64_t used = 0;
    int64_t skipped = 0;      // samples with all-zero targets
};

// Per-sample k = #{target_i > 0}; all-zero samples are skipped and counted.
AdaptiveTopK adaptive_top_k(const Rows& preds, const Rows& targets);

/**
 * One evaluation row. MAE/MSE carry the tables' x10^-2 scaling; top metrics
 * are percentages. std fields are population deviations across seeds.
 */
struct MetricsReport {
    std::string model;        // "rtran" | "baseline"
    std::string method;       // "direct" | "feedbackprop"
    std::string group;        // evaluated group tag ("all" when unrestricted)
    std::string known_group;  // "none" when no partial information
    std::string dataset_hash;
    int64_t n_samples = 0;
    std::vector<uint64_t> seeds;

    double mae = 0.0, mae_std = 0.0;
    double mse = 0.0, mse_std = 0.0;
    double top10 = 0.0, top10_std = 0.0;
    double top30 = 0.0, top30_std = 0.0;
    double topk = 0.0, topk_std = 0.0;

    nlohmann::json to_json() const;
    static MetricsReport from_json(const nlohmann::json& j);
    void save(const std::string& path) const;
    static MetricsReport load(const std::string& path);
};

// Mean and population std per metric across per-seed reports; reports must
// share the evaluated group and dataset hash.
MetricsReport aggregate_seeds(const std::vector<MetricsReport>& reports);

// Table-1-style markdown with one section per evaluated group.
std::string render_table_md(const std::vector<MetricsReport>& reports);

} // namespace occurate::metrics
