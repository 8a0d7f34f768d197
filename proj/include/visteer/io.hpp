#pragma once

#include <filesystem>
#include <string>

#include "visteer/model.hpp"
#include "visteer/steering.hpp"

namespace visteer {

// 8-bit RGB PNG; pixels are rounded from [0, 1].
void write_png(const std::filesystem::path& path, const Tensor& image);
Tensor read_png(const std::filesystem::path& path);

// Lossless image: 8-byte magic, three little-endian u64 dims (H, W, C), then doubles.
void write_raw_image(const std::filesystem::path& path, const Tensor& image);
Tensor read_raw_image(const std::filesystem::path& path);

// Reads .png or raw by extension; for a .png, a raw sibling with the same stem wins.
Tensor load_image(const std::filesystem::path& path);

// Parameter checkpoint: text header (one "name dims offset" line per tensor,
// offsets in doubles into the payload), a blank line, then the payload.
// Planted circuits are stored as extra entries.
void save_model(const std::filesystem::path& path, const ToyVLM& model);
ToyVLM load_model(const std::filesystem::path& path, const ModelConfig& config);

// `<stem>.json` manifest plus `<stem>.bin` payload with one vector per layer in manifest order.
struct VectorFileInfo {
    std::string model;
    std::string behavior;
    SteeringConfig config;
};
void save_vectors(const std::filesystem::path& manifest, const SteeringVectorSet& vectors, const VectorFileInfo& info);
SteeringVectorSet load_vectors(const std::filesystem::path& manifest, VectorFileInfo* info = nullptr);

}  // namespace visteer
