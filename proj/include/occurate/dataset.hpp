#pragma once

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "occurate/catalog.hpp"
#include "occurate/geo.hpp"
#include "occurate/tensor.hpp"

namespace occurate::data {

/**
 * On-disk dataset directory:
 *   manifest.json    sample order, counts, producing config, content hash
 *   catalog.json     [{id, name, group}]
 *   hotspots.csv     id,lat,lon,split
 *   targets.bin      "SBTG" v1: per sample float32 rates[n] + u8 avail[n]
 *   patches/<id>.sbpx
 *   norm_stats.json  per-channel mean/std fitted on the train split
 */
struct Dataset {
    catalog::SpeciesCatalog catalog;
    std::vector<geo::Hotspot> hotspots;       // manifest order
    std::vector<std::vector<double>> targets; // [N][n] rates
    std::vector<std::vector<uint8_t>> avail;  // [N][n]
    geo::NormStats stats;
    std::string dir;
    std::string content_hash;

    int64_t size() const { return static_cast<int64_t>(hotspots.size()); }
    int n_species() const { return catalog.size(); }

    std::vector<int64_t> split_indices(geo::Split s) const;

    // Raw (unnormalized) patch for sample i, cached in memory under a byte cap.
    const Tensor<float>& patch(int64_t i) const;

private:
    mutable std::vector<std::optional<Tensor<float>>> cache_;
    mutable int64_t cache_bytes_ = 0;
    friend Dataset load_dataset(const std::string& dir);
};

struct DatasetWriter {
    std::string dir;
    catalog::SpeciesCatalog catalog;
    std::vector<geo::Hotspot> hotspots;
    std::vector<std::vector<double>> targets;
    std::vector<std::vector<uint8_t>> avail;
    geo::NormStats stats;
    nlohmann::json producing_config;

    void add_sample(const geo::Hotspot& h, const catalog::EncounterVector& vec,
                    const Tensor<float>& patch_data);
    // Writes everything and returns the content hash.
    std::string finalize();
};

Dataset load_dataset(const std::string& dir);

// FNV-1a over catalog JSON, targets blob, and every patch blob in manifest order.
std::string compute_content_hash(const std::string& dir, const std::vector<std::string>& sample_ids);

} // namespace occurate::data
