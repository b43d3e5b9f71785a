#pragma once

#include <map>
#include <string>

#include <nlohmann/json.hpp>

#include "occurate/tensor.hpp"

namespace occurate::ckpt {

using json = nlohmann::json;

template <typename T>
using ParamMap = std::map<std::string, Tensor<T>>;

struct Checkpoint {
    json config;
    ParamMap<float> params;
};

// On-disk layout: u64 little-endian header length, UTF-8 header JSON, then
// float32 little-endian parameter blobs concatenated in name order. The
// header records {"params": [{name, shape}...], "config": {...},
// "config_hash": hex}.
void save_checkpoint(const std::string& path, const ParamMap<float>& params, const json& config);

Checkpoint load_checkpoint(const std::string& path);

std::string config_hash(const json& config);

} // namespace occurate::ckpt
