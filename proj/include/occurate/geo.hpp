#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "occurate/catalog.hpp"
#include "occurate/tensor.hpp"

namespace occurate::geo {

enum class Split : int { Train = 0, Val = 1, Test = 2, Unassigned = 3 };

const char* split_name(Split s);
Split split_from_name(const std::string& name);

struct Hotspot {
    std::string id;
    double lat = 0.0;
    double lon = 0.0;
    Split split = Split::Unassigned;
};

// Great-circle distance in kilometers, Earth radius 6371.0 km.
double haversine_km(double lat1, double lon1, double lat2, double lon2);

// `id,lat,lon` rows; an optional 4th `split` column is honored.
std::vector<Hotspot> read_hotspots_csv(const std::string& path);
void write_hotspots_csv(const std::string& path, const std::vector<Hotspot>& hotspots);

struct ColocateResult {
    // centroid index -> checklists attached to it (nearest-centroid policy,
    // ties broken by smaller centroid index)
    std::vector<std::vector<catalog::ChecklistRecord>> attached;
    int64_t n_matched = 0;
    int64_t n_unmatched = 0;
};

/**
 * Attaches every observation within radius_km of at least one centroid to
 * its nearest centroid. Unmatched observations are only counted.
 */
ColocateResult colocate(const std::vector<Hotspot>& centroids,
                        const std::vector<catalog::ChecklistRecord>& observations,
                        double radius_km = 1.0);

struct SpatialSplitResult {
    std::vector<Split> assignment;   // aligned with input hotspots
    std::vector<int> cluster_id;     // DBSCAN cluster per hotspot (noise points get fresh ids)
    int n_clusters = 0;              // number of assignable units
};

/**
 * DBSCAN over the haversine metric, then whole clusters (noise points
 * individually) are dealt to splits by seeded shuffling, each unit going to
 * the split with the largest remaining deficit. No cluster spans two splits.
 */
SpatialSplitResult spatial_split(const std::vector<Hotspot>& hotspots, double eps_km,
                                 int min_samples, std::array<double, 3> fractions,
                                 uint64_t seed);

/**
 * C x H x W raster with channel names; `normalized` tracks whether training
 * statistics were applied.
 */
struct InputPatch {
    Tensor<float> data;
    std::vector<std::string> channel_names;
    bool normalized = false;

    int64_t channels() const { return data.rank() == 3 ? data.shape()[0] : 0; }
};

struct EnvLayer {
    std::string name;
    Tensor<float> grid;  // [h, w] on its native grid
};

/**
 * Bilinearly resamples each environmental layer onto the RGB grid
 * (corner-aligned, exact on constants), stacks all channels, and
 * center-crops to crop x crop.
 */
InputPatch assemble_patch(const Tensor<float>& rgb, const std::vector<std::string>& rgb_names,
                          const std::vector<EnvLayer>& env_layers, int64_t crop = 64);

struct NormStats {
    std::vector<double> mean;
    std::vector<double> std;
    std::vector<std::string> channel_names;

    void save(const std::string& path) const;
    static NormStats load(const std::string& path);
};

// Per-channel statistics over every pixel of the given patches (train split only).
NormStats fit_norm_stats(const std::vector<const InputPatch*>& train_patches);

// (x - mean) / max(std, 1e-6), applied once.
void apply_norm(InputPatch& patch, const NormStats& stats);
void unapply_norm(InputPatch& patch, const NormStats& stats);

// Flat binary patch file: magic "SBPX", u16 version=1, u16 C,H,W, then
// C*H*W little-endian float32 values row-major.
void save_patch(const std::string& path, const Tensor<float>& data);
Tensor<float> load_patch_file(const std::string& path);

} // namespace occurate::geo
