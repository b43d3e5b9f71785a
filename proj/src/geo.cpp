#include "occurate/geo.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <deque>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "occurate/error.hpp"
#include "occurate/rng.hpp"

namespace occurate::geo {

namespace {
constexpr double kEarthRadiusKm = 6371.0;
constexpr double kDegToRad = M_PI / 180.0;
constexpr double kNormEps = 1e-6;
} // namespace

const char* split_name(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Val: return "val";
        case Split::Test: return "test";
        case Split::Unassigned: return "unassigned";
    }
    return "unassigned";
}

Split split_from_name(const std::string& name) {
    if (name == "train") return Split::Train;
    if (name == "val") return Split::Val;
    if (name == "test") return Split::Test;
    if (name == "unassigned") return Split::Unassigned;
    data_error("unknown split name: " + name);
}

double haversine_km(double lat1, double lon1, double lat2, double lon2) {
    const double p1 = lat1 * kDegToRad, p2 = lat2 * kDegToRad;
    const double dp = (lat2 - lat1) * kDegToRad;
    const double dl = (lon2 - lon1) * kDegToRad;
    const double a = std::sin(dp / 2) * std::sin(dp / 2) +
                     std::cos(p1) * std::cos(p2) * std::sin(dl / 2) * std::sin(dl / 2);
    return 2.0 * kEarthRadiusKm * std::asin(std::min(1.0, std::sqrt(a)));
}

std::vector<Hotspot> read_hotspots_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) data_error("cannot open hotspots file: " + path);
    std::string line;
    if (!std::getline(is, line)) data_error("empty hotspots file: " + path);
    std::vector<Hotspot> out;
    size_t lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty() || line == "\r") continue;
        std::stringstream ss(line);
        std::string id, lat, lon, split;
        std::getline(ss, id, ',');
        std::getline(ss, lat, ',');
        std::getline(ss, lon, ',');
        bool has_split = static_cast<bool>(std::getline(ss, split, ','));
        Hotspot h;
        h.id = id;
        try {
            h.lat = std::stod(lat);
            h.lon = std::stod(lon);
        } catch (const std::exception&) {
            data_error(path + ":" + std::to_string(lineno) + ": invalid coordinates");
        }
        if (h.lat < -90.0 || h.lat > 90.0 || h.lon <= -180.0 || h.lon > 180.0)
            data_error(path + ":" + std::to_string(lineno) + ": coordinates out of range");
        if (has_split) {
            while (!split.empty() && (split.back() == '\r' || split.back() == ' ')) split.pop_back();
            h.split = split_from_name(split);
        }
        out.push_back(std::move(h));
    }
    return out;
}

void write_hotspots_csv(const std::string& path, const std::vector<Hotspot>& hotspots) {
    std::ofstream os(path);
    if (!os) data_error("cannot open hotspots file for writing: " + path);
    os << "id,lat,lon,split\n";
    os.precision(10);
    for (const auto& h : hotspots)
        os << h.id << "," << h.lat << "," << h.lon << "," << split_name(h.split) << "\n";
}

ColocateResult colocate(const std::vector<Hotspot>& centroids,
                        const std::vector<catalog::ChecklistRecord>& observations,
                        double radius_km) {
    if (radius_km <= 0.0) config_error("colocate: radius_km must be positive");
    ColocateResult res;
    res.attached.resize(centroids.size());
    // quick reject box: 1 deg latitude is ~111 km
    const double lat_margin = radius_km / 111.0 * 1.5 + 1e-9;
    for (const auto& obs : observations) {
        int best = -1;
        double best_d = 0.0;
        // in-order scan with strict < keeps the smaller centroid index on ties
        for (size_t c = 0; c < centroids.size(); ++c) {
            if (std::abs(centroids[c].lat - obs.lat) > lat_margin) continue;
            double d = haversine_km(obs.lat, obs.lon, centroids[c].lat, centroids[c].lon);
            if (d <= radius_km && (best < 0 || d < best_d)) {
                best = static_cast<int>(c);
                best_d = d;
            }
        }
        if (best >= 0) {
            res.attached[static_cast<size_t>(best)].push_back(obs);
            res.n_matched++;
        } else {
            res.n_unmatched++;
        }
    }
    return res;
}

SpatialSplitResult spatial_split(const std::vector<Hotspot>& hotspots, double eps_km,
                                 int min_samples, std::array<double, 3> fractions,
                                 uint64_t seed) {
    if (eps_km <= 0.0) config_error("spatial_split: eps_km must be positive");
    double fsum = fractions[0] + fractions[1] + fractions[2];
    if (std::abs(fsum - 1.0) > 1e-9)
        config_error("spatial_split: fractions must sum to 1, got " + std::to_string(fsum));
    const int n = static_cast<int>(hotspots.size());

    // neighbor lists under the haversine metric
    std::vector<std::vector<int>> nbrs(static_cast<size_t>(n));
    const double lat_margin = eps_km / 111.0 * 1.5 + 1e-9;
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) {
            if (std::abs(hotspots[static_cast<size_t>(i)].lat - hotspots[static_cast<size_t>(j)].lat) > lat_margin)
                continue;
            double d = haversine_km(hotspots[static_cast<size_t>(i)].lat, hotspots[static_cast<size_t>(i)].lon,
                                    hotspots[static_cast<size_t>(j)].lat, hotspots[static_cast<size_t>(j)].lon);
            if (d <= eps_km) {
                nbrs[static_cast<size_t>(i)].push_back(j);
                nbrs[static_cast<size_t>(j)].push_back(i);
            }
        }

    // DBSCAN: a point is core when |N_eps(p)| >= min_samples (self included)
    std::vector<int> cluster(static_cast<size_t>(n), -1);
    std::vector<char> is_core(static_cast<size_t>(n), 0);
    for (int i = 0; i < n; ++i)
        is_core[static_cast<size_t>(i)] = static_cast<int>(nbrs[static_cast<size_t>(i)].size()) + 1 >= min_samples;
    int next_cluster = 0;
    for (int i = 0; i < n; ++i) {
        if (cluster[static_cast<size_t>(i)] != -1 || !is_core[static_cast<size_t>(i)]) continue;
        int cid = next_cluster++;
        std::deque<int> frontier{i};
        cluster[static_cast<size_t>(i)] = cid;
        while (!frontier.empty()) {
            int p = frontier.front();
            frontier.pop_front();
            if (!is_core[static_cast<size_t>(p)]) continue;
            for (int q : nbrs[static_cast<size_t>(p)]) {
                if (cluster[static_cast<size_t>(q)] != -1) continue;
                cluster[static_cast<size_t>(q)] = cid;
                frontier.push_back(q);
            }
        }
    }
    // remaining points are DBSCAN noise; each becomes its own unit
    for (int i = 0; i < n; ++i)
        if (cluster[static_cast<size_t>(i)] == -1) cluster[static_cast<size_t>(i)] = next_cluster++;

    std::vector<std::vector<int>> units(static_cast<size_t>(next_cluster));
    for (int i = 0; i < n; ++i) units[static_cast<size_t>(cluster[static_cast<size_t>(i)])].push_back(i);

    if (next_cluster < 3) data_error("insufficient spatial clusters: got " +
                                     std::to_string(next_cluster) + ", need at least 3");

    std::vector<int> unit_order(static_cast<size_t>(next_cluster));
    for (int u = 0; u < next_cluster; ++u) unit_order[static_cast<size_t>(u)] = u;
    Rng rng(derive_seed(seed, 0x73706c6974ULL));
    rng.shuffle(unit_order);

    SpatialSplitResult res;
    res.assignment.assign(static_cast<size_t>(n), Split::Unassigned);
    res.cluster_id = cluster;
    res.n_clusters = next_cluster;

    std::array<double, 3> target = {fractions[0] * n, fractions[1] * n, fractions[2] * n};
    std::array<double, 3> have = {0, 0, 0};
    for (int u : unit_order) {
        // largest remaining deficit wins; ties prefer train, then val
        int best = 0;
        double best_deficit = target[0] - have[0];
        for (int s = 1; s < 3; ++s) {
            double deficit = target[static_cast<size_t>(s)] - have[static_cast<size_t>(s)];
            if (deficit > best_deficit) {
                best = s;
                best_deficit = deficit;
            }
        }
        for (int i : units[static_cast<size_t>(u)])
            res.assignment[static_cast<size_t>(i)] = static_cast<Split>(best);
        have[static_cast<size_t>(best)] += static_cast<double>(units[static_cast<size_t>(u)].size());
    }
    return res;
}

namespace {

// Corner-aligned bilinear sample of a [h, w] grid at fractional (y, x).
float bilinear_at(const Tensor<float>& grid, double y, double x) {
    const int64_t h = grid.shape()[0], w = grid.shape()[1];
    int64_t y0 = static_cast<int64_t>(std::floor(y));
    int64_t x0 = static_cast<int64_t>(std::floor(x));
    y0 = std::clamp<int64_t>(y0, 0, h - 1);
    x0 = std::clamp<int64_t>(x0, 0, w - 1);
    int64_t y1 = std::min<int64_t>(y0 + 1, h - 1);
    int64_t x1 = std::min<int64_t>(x0 + 1, w - 1);
    double fy = y - static_cast<double>(y0);
    double fx = x - static_cast<double>(x0);
    double v00 = grid[y0 * w + x0], v01 = grid[y0 * w + x1];
    double v10 = grid[y1 * w + x0], v11 = grid[y1 * w + x1];
    double top = v00 * (1.0 - fx) + v01 * fx;
    double bot = v10 * (1.0 - fx) + v11 * fx;
    return static_cast<float>(top * (1.0 - fy) + bot * fy);
}

} // namespace

InputPatch assemble_patch(const Tensor<float>& rgb, const std::vector<std::string>& rgb_names,
                          const std::vector<EnvLayer>& env_layers, int64_t crop) {
    if (rgb.rank() != 3) data_error("assemble_patch: rgb raster must be [C,H,W], got " +
                                    shape_str(rgb.shape()));
    const int64_t rc = rgb.shape()[0], rh = rgb.shape()[1], rw = rgb.shape()[2];
    if (static_cast<size_t>(rc) != rgb_names.size())
        data_error("assemble_patch: got " + std::to_string(rgb_names.size()) + " names for " +
                   std::to_string(rc) + " rgb channels");
    if (rh < crop || rw < crop)
        data_error("assemble_patch: rgb grid " + std::to_string(rh) + "x" + std::to_string(rw) +
                   " smaller than crop " + std::to_string(crop));

    const int64_t c_total = rc + static_cast<int64_t>(env_layers.size());
    Tensor<float> stacked(Shape{c_total, rh, rw});
    std::vector<std::string> names = rgb_names;
    std::copy(rgb.data(), rgb.data() + rgb.numel(), stacked.data());

    for (size_t e = 0; e < env_layers.size(); ++e) {
        const EnvLayer& layer = env_layers[e];
        if (layer.grid.rank() != 2)
            data_error("assemble_patch: env layer " + layer.name + " must be 2-D");
        const int64_t sh = layer.grid.shape()[0], sw = layer.grid.shape()[1];
        float* dst = stacked.data() + (rc + static_cast<int64_t>(e)) * rh * rw;
        for (int64_t i = 0; i < rh; ++i) {
            double sy = rh > 1 ? static_cast<double>(i) * (sh - 1) / static_cast<double>(rh - 1) : 0.0;
            for (int64_t j = 0; j < rw; ++j) {
                double sx = rw > 1 ? static_cast<double>(j) * (sw - 1) / static_cast<double>(rw - 1) : 0.0;
                float v = bilinear_at(layer.grid, sy, sx);
                if (!std::isfinite(v))
                    data_error("assemble_patch: non-finite value after resampling channel " +
                               layer.name);
                dst[i * rw + j] = v;
            }
        }
        names.push_back(layer.name);
    }
    for (int64_t i = 0; i < rc * rh * rw; ++i)
        if (!std::isfinite(stacked[i]))
            data_error("assemble_patch: non-finite value in channel " +
                       names[static_cast<size_t>(i / (rh * rw))]);

    // center crop
    const int64_t oy = (rh - crop) / 2, ox = (rw - crop) / 2;
    InputPatch patch;
    patch.data = Tensor<float>(Shape{c_total, crop, crop});
    patch.channel_names = std::move(names);
    for (int64_t c = 0; c < c_total; ++c)
        for (int64_t i = 0; i < crop; ++i)
            std::copy(stacked.data() + (c * rh + oy + i) * rw + ox,
                      stacked.data() + (c * rh + oy + i) * rw + ox + crop,
                      patch.data.data() + (c * crop + i) * crop);
    return patch;
}

NormStats fit_norm_stats(const std::vector<const InputPatch*>& train_patches) {
    if (train_patches.empty()) data_error("fit_norm_stats: no training patches");
    const int64_t c = train_patches[0]->channels();
    NormStats stats;
    stats.mean.assign(static_cast<size_t>(c), 0.0);
    stats.std.assign(static_cast<size_t>(c), 0.0);
    stats.channel_names = train_patches[0]->channel_names;
    std::vector<double> sum(static_cast<size_t>(c), 0.0), sumsq(static_cast<size_t>(c), 0.0);
    int64_t count = 0;
    for (const InputPatch* p : train_patches) {
        if (p->channels() != c) data_error("fit_norm_stats: inconsistent channel counts");
        const int64_t hw = p->data.numel() / c;
        for (int64_t ch = 0; ch < c; ++ch) {
            const float* px = p->data.data() + ch * hw;
            for (int64_t i = 0; i < hw; ++i) {
                sum[static_cast<size_t>(ch)] += px[i];
                sumsq[static_cast<size_t>(ch)] += static_cast<double>(px[i]) * px[i];
            }
        }
        count += p->data.numel() / c;
    }
    for (int64_t ch = 0; ch < c; ++ch) {
        double m = sum[static_cast<size_t>(ch)] / static_cast<double>(count);
        double var = sumsq[static_cast<size_t>(ch)] / static_cast<double>(count) - m * m;
        stats.mean[static_cast<size_t>(ch)] = m;
        stats.std[static_cast<size_t>(ch)] = std::sqrt(std::max(0.0, var));
    }
    return stats;
}

void apply_norm(InputPatch& patch, const NormStats& stats) {
    if (patch.normalized) data_error("apply_norm: patch already normalized");
    const int64_t c = patch.channels();
    if (static_cast<size_t>(c) != stats.mean.size())
        data_error("apply_norm: stats cover " + std::to_string(stats.mean.size()) +
                   " channels, patch has " + std::to_string(c));
    const int64_t hw = patch.data.numel() / c;
    for (int64_t ch = 0; ch < c; ++ch) {
        const float m = static_cast<float>(stats.mean[static_cast<size_t>(ch)]);
        const float s = static_cast<float>(std::max(stats.std[static_cast<size_t>(ch)], kNormEps));
        float* px = patch.data.data() + ch * hw;
        for (int64_t i = 0; i < hw; ++i) px[i] = (px[i] - m) / s;
    }
    patch.normalized = true;
}

void unapply_norm(InputPatch& patch, const NormStats& stats) {
    if (!patch.normalized) data_error("unapply_norm: patch is not normalized");
    const int64_t c = patch.channels();
    const int64_t hw = patch.data.numel() / c;
    for (int64_t ch = 0; ch < c; ++ch) {
        const float m = static_cast<float>(stats.mean[static_cast<size_t>(ch)]);
        const float s = static_cast<float>(std::max(stats.std[static_cast<size_t>(ch)], kNormEps));
        float* px = patch.data.data() + ch * hw;
        for (int64_t i = 0; i < hw; ++i) px[i] = px[i] * s + m;
    }
    patch.normalized = false;
}

void NormStats::save(const std::string& path) const {
    nlohmann::json j;
    j["mean"] = mean;
    j["std"] = std;
    j["channels"] = channel_names;
    std::ofstream os(path);
    if (!os) data_error("cannot write norm stats: " + path);
    os << j.dump(2) << "\n";
}

NormStats NormStats::load(const std::string& path) {
    std::ifstream is(path);
    if (!is) data_error("cannot open norm stats: " + path);
    nlohmann::json j = nlohmann::json::parse(is, nullptr, false);
    if (j.is_discarded()) data_error("invalid JSON in norm stats: " + path);
    NormStats stats;
    stats.mean = j.at("mean").get<std::vector<double>>();
    stats.std = j.at("std").get<std::vector<double>>();
    stats.channel_names = j.value("channels", std::vector<std::string>{});
    return stats;
}

namespace {
void write_u16_le(std::ostream& os, uint16_t v) {
    unsigned char b[2] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>(v >> 8)};
    os.write(reinterpret_cast<const char*>(b), 2);
}
uint16_t read_u16_le(std::istream& is) {
    unsigned char b[2];
    is.read(reinterpret_cast<char*>(b), 2);
    return static_cast<uint16_t>(b[0] | (b[1] << 8));
}
} // namespace

void save_patch(const std::string& path, const Tensor<float>& data) {
    if (data.rank() != 3) data_error("save_patch: data must be [C,H,W]");
    std::ofstream os(path, std::ios::binary);
    if (!os) data_error("cannot open patch file for writing: " + path);
    os.write("SBPX", 4);
    write_u16_le(os, 1);
    for (int d = 0; d < 3; ++d) write_u16_le(os, static_cast<uint16_t>(data.shape()[static_cast<size_t>(d)]));
    os.write(reinterpret_cast<const char*>(data.data()), data.numel() * 4);
    if (!os) data_error("short write while saving patch: " + path);
}

Tensor<float> load_patch_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) data_error("cannot open patch file: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "SBPX", 4) != 0) data_error("not an SBPX patch file: " + path);
    uint16_t version = read_u16_le(is);
    if (version != 1) data_error("unsupported SBPX version " + std::to_string(version) + ": " + path);
    int64_t c = read_u16_le(is), h = read_u16_le(is), w = read_u16_le(is);
    Tensor<float> data(Shape{c, h, w});
    is.read(reinterpret_cast<char*>(data.data()), data.numel() * 4);
    if (!is) data_error("truncated SBPX patch file: " + path);
    return data;
}

} // namespace occurate::geo
