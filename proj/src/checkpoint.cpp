#include "occurate/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "occurate/error.hpp"
#include "occurate/rng.hpp"

namespace occurate::ckpt {

namespace {

void write_u64_le(std::ostream& os, uint64_t v) {
    unsigned char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(buf), 8);
}

uint64_t read_u64_le(std::istream& is) {
    unsigned char buf[8];
    is.read(reinterpret_cast<char*>(buf), 8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(buf[i]) << (8 * i);
    return v;
}

void write_f32_le(std::ostream& os, const float* data, int64_t count) {
    static_assert(sizeof(float) == 4);
    // x86 and every target we care about is little-endian; byte-swap would go here.
    os.write(reinterpret_cast<const char*>(data), count * 4);
}

} // namespace

std::string config_hash(const json& config) {
    uint64_t h = fnv1a64(config.dump());
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

void save_checkpoint(const std::string& path, const ParamMap<float>& params, const json& config) {
    json header;
    header["format"] = "occurate-checkpoint";
    header["version"] = 1;
    header["config"] = config;
    header["config_hash"] = config_hash(config);
    json plist = json::array();
    for (const auto& [name, t] : params) {
        json p;
        p["name"] = name;
        p["shape"] = t.shape();
        plist.push_back(p);
    }
    header["params"] = plist;
    std::string htext = header.dump();

    std::ofstream os(path, std::ios::binary);
    if (!os) data_error("cannot open checkpoint file for writing: " + path);
    write_u64_le(os, htext.size());
    os.write(htext.data(), static_cast<std::streamsize>(htext.size()));
    for (const auto& [name, t] : params) write_f32_le(os, t.data(), t.numel());
    if (!os) data_error("short write while saving checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) data_error("cannot open checkpoint file: " + path);
    uint64_t hlen = read_u64_le(is);
    if (!is || hlen == 0 || hlen > (1ULL << 30)) data_error("corrupt checkpoint header: " + path);
    std::string htext(hlen, '\0');
    is.read(htext.data(), static_cast<std::streamsize>(hlen));
    if (!is) data_error("truncated checkpoint header: " + path);
    json header = json::parse(htext, nullptr, false);
    if (header.is_discarded() || header.value("format", "") != "occurate-checkpoint")
        data_error("not an occurate checkpoint: " + path);

    Checkpoint out;
    out.config = header.at("config");
    for (const auto& p : header.at("params")) {
        std::string name = p.at("name").get<std::string>();
        Shape shape = p.at("shape").get<Shape>();
        Tensor<float> t(shape);
        is.read(reinterpret_cast<char*>(t.data()), t.numel() * 4);
        if (!is) data_error("truncated checkpoint blob for parameter " + name + ": " + path);
        out.params.emplace(std::move(name), std::move(t));
    }
    return out;
}

} // namespace occurate::ckpt
