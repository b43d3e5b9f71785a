#include "occurate/dataset.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "occurate/error.hpp"
#include "occurate/rng.hpp"

namespace occurate::data {

namespace fs = std::filesystem;

namespace {

constexpr int64_t kPatchCacheCap = 1'500'000'000;  // bytes

void write_u16_le(std::ostream& os, uint16_t v) {
    unsigned char b[2] = {static_cast<unsigned char>(v & 0xff), static_cast<unsigned char>(v >> 8)};
    os.write(reinterpret_cast<const char*>(b), 2);
}
void write_u32_le(std::ostream& os, uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 4);
}
uint16_t read_u16_le(std::istream& is) {
    unsigned char b[2];
    is.read(reinterpret_cast<char*>(b), 2);
    return static_cast<uint16_t>(b[0] | (b[1] << 8));
}
uint32_t read_u32_le(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
    return v;
}

std::string read_file_bytes(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) data_error("cannot open file: " + path);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

} // namespace

std::vector<int64_t> Dataset::split_indices(geo::Split s) const {
    std::vector<int64_t> out;
    for (int64_t i = 0; i < size(); ++i)
        if (hotspots[static_cast<size_t>(i)].split == s) out.push_back(i);
    return out;
}

const Tensor<float>& Dataset::patch(int64_t i) const {
    auto& slot = cache_[static_cast<size_t>(i)];
    if (!slot.has_value()) {
        Tensor<float> t = geo::load_patch_file(dir + "/patches/" + hotspots[static_cast<size_t>(i)].id + ".sbpx");
        if (cache_bytes_ + t.numel() * 4 > kPatchCacheCap) {
            // over the cap: keep a thread-local scratch slot alive instead of caching
            static thread_local Tensor<float> scratch;
            scratch = std::move(t);
            return scratch;
        }
        cache_bytes_ += t.numel() * 4;
        slot = std::move(t);
    }
    return *slot;
}

void DatasetWriter::add_sample(const geo::Hotspot& h, const catalog::EncounterVector& vec,
                               const Tensor<float>& patch_data) {
    if (static_cast<int>(vec.rates.size()) != catalog.size())
        data_error("add_sample: encounter vector length " + std::to_string(vec.rates.size()) +
                   " does not match catalog of " + std::to_string(catalog.size()));
    if (hotspots.empty()) fs::create_directories(dir + "/patches");
    hotspots.push_back(h);
    targets.push_back(vec.rates);
    avail.push_back(vec.available);
    geo::save_patch(dir + "/patches/" + h.id + ".sbpx", patch_data);
}

std::string DatasetWriter::finalize() {
    if (hotspots.empty()) data_error("dataset has no samples");
    fs::create_directories(dir);
    catalog.save(dir + "/catalog.json");
    geo::write_hotspots_csv(dir + "/hotspots.csv", hotspots);
    stats.save(dir + "/norm_stats.json");

    const int n = catalog.size();
    std::ofstream os(dir + "/targets.bin", std::ios::binary);
    if (!os) data_error("cannot write targets.bin in " + dir);
    os.write("SBTG", 4);
    write_u16_le(os, 1);
    write_u32_le(os, static_cast<uint32_t>(hotspots.size()));
    write_u32_le(os, static_cast<uint32_t>(n));
    for (size_t i = 0; i < hotspots.size(); ++i) {
        std::vector<float> row(static_cast<size_t>(n));
        for (int s = 0; s < n; ++s) row[static_cast<size_t>(s)] = static_cast<float>(targets[i][static_cast<size_t>(s)]);
        os.write(reinterpret_cast<const char*>(row.data()), n * 4);
        os.write(reinterpret_cast<const char*>(avail[i].data()), n);
    }
    os.close();

    std::vector<std::string> ids;
    for (const auto& h : hotspots) ids.push_back(h.id);
    std::string hash = compute_content_hash(dir, ids);

    nlohmann::json manifest;
    manifest["format"] = "occurate-dataset";
    manifest["version"] = 1;
    manifest["samples"] = ids;
    manifest["n_species"] = n;
    manifest["content_hash"] = hash;
    manifest["config"] = producing_config;
    std::ofstream ms(dir + "/manifest.json");
    ms << manifest.dump(2) << "\n";
    return hash;
}

std::string compute_content_hash(const std::string& dir, const std::vector<std::string>& sample_ids) {
    uint64_t h = fnv1a64(read_file_bytes(dir + "/catalog.json"));
    h = fnv1a64(read_file_bytes(dir + "/targets.bin"), h);
    for (const auto& id : sample_ids) {
        std::string bytes = read_file_bytes(dir + "/patches/" + id + ".sbpx");
        h = fnv1a64(bytes.data(), bytes.size(), h);
    }
    std::ostringstream ss;
    ss << std::hex << std::setw(16) << std::setfill('0') << h;
    return ss.str();
}

Dataset load_dataset(const std::string& dir) {
    std::ifstream ms(dir + "/manifest.json");
    if (!ms) data_error("not a dataset directory (missing manifest.json): " + dir);
    nlohmann::json manifest = nlohmann::json::parse(ms, nullptr, false);
    if (manifest.is_discarded() || manifest.value("format", "") != "occurate-dataset")
        data_error("invalid dataset manifest in " + dir);

    Dataset ds;
    ds.dir = dir;
    ds.content_hash = manifest.at("content_hash").get<std::string>();
    ds.catalog = catalog::SpeciesCatalog::load(dir + "/catalog.json");
    ds.stats = geo::NormStats::load(dir + "/norm_stats.json");

    auto ids = manifest.at("samples").get<std::vector<std::string>>();
    auto rows = geo::read_hotspots_csv(dir + "/hotspots.csv");
    std::map<std::string, geo::Hotspot> by_id;
    for (auto& h : rows) by_id[h.id] = h;
    for (const auto& id : ids) {
        auto it = by_id.find(id);
        if (it == by_id.end()) data_error("manifest sample " + id + " missing from hotspots.csv");
        ds.hotspots.push_back(it->second);
    }

    std::ifstream ts(dir + "/targets.bin", std::ios::binary);
    if (!ts) data_error("missing targets.bin in " + dir);
    char magic[4];
    ts.read(magic, 4);
    if (!ts || std::memcmp(magic, "SBTG", 4) != 0) data_error("corrupt targets.bin in " + dir);
    uint16_t version = read_u16_le(ts);
    if (version != 1) data_error("unsupported targets.bin version in " + dir);
    int64_t n_samples = read_u32_le(ts);
    int64_t n = read_u32_le(ts);
    if (n != ds.catalog.size())
        data_error("targets.bin species count " + std::to_string(n) + " != catalog size " +
                   std::to_string(ds.catalog.size()));
    if (n_samples != static_cast<int64_t>(ids.size()))
        data_error("targets.bin sample count does not match manifest in " + dir);
    for (int64_t i = 0; i < n_samples; ++i) {
        std::vector<float> row(static_cast<size_t>(n));
        std::vector<uint8_t> av(static_cast<size_t>(n));
        ts.read(reinterpret_cast<char*>(row.data()), n * 4);
        ts.read(reinterpret_cast<char*>(av.data()), n);
        if (!ts) data_error("truncated targets.bin in " + dir);
        std::vector<double> drow(row.begin(), row.end());
        bool any = false;
        for (uint8_t a : av) any |= a != 0;
        if (!any)
            data_error("sample " + ids[static_cast<size_t>(i)] +
                       " has an all-false availability mask");
        ds.targets.push_back(std::move(drow));
        ds.avail.push_back(std::move(av));
    }
    ds.cache_.resize(static_cast<size_t>(n_samples));
    return ds;
}

} // namespace occurate::data
