#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "detox/vocab.hpp"
#include "detox/weights.hpp"
#include "json.hpp"

namespace detox {

struct NamedTensor {
    std::string name;
    std::vector<std::size_t> shape;
    std::vector<float> data;
};

// Directory container: manifest.json (metadata + ordered tensor records
// {name, shape, dtype:"f32", byte_offset}) and weights.bin (little-endian
// f32, row-major, concatenated in manifest order).
struct TensorContainer {
    nlohmann::ordered_json metadata = nlohmann::ordered_json::object();
    std::vector<NamedTensor> tensors;

    void save(const std::filesystem::path& dir) const;
    // Validates offsets, lengths and finiteness. Shape checks against an
    // expected layout are the caller's job.
    static TensorContainer load(const std::filesystem::path& dir);

    const NamedTensor* find(const std::string& name) const;
};

struct ModelCheckpoint {
    Weights<float> weights;
    Vocabulary vocab;

    const ModelConfig& config() const { return weights.config; }
};

nlohmann::ordered_json config_to_json(const ModelConfig& c);
ModelConfig config_from_json(const nlohmann::json& j);

// Writes manifest.json, weights.bin and vocab.json into `dir`.
void save_checkpoint(const ModelCheckpoint& ckpt, const std::filesystem::path& dir);
ModelCheckpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace detox
