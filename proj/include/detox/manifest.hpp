#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

namespace detox {

// Hash of a byte string as git would name the blob: sha1("blob <n>\0" + bytes).
std::string git_blob_hash(std::string_view bytes);
std::string git_blob_hash_file(const std::filesystem::path& path);

// Provenance record written next to every stage's outputs. Paths are stored
// relative to the run root so a moved run directory still verifies.
class RunManifest {
public:
    RunManifest(std::string pipeline, std::filesystem::path root);

    void set_config(nlohmann::ordered_json config) { config_ = std::move(config); }
    void add_seed(const std::string& name, std::uint64_t seed) { seeds_[name] = seed; }
    void add_input(const std::filesystem::path& path);
    void add_output(const std::filesystem::path& path);

    // Hashes every listed artifact and writes the manifest once; a second call
    // throws InvariantError.
    void write(const std::filesystem::path& path);

    nlohmann::ordered_json to_json() const;

private:
    std::string relative(const std::filesystem::path& p) const;

    std::string pipeline_;
    std::filesystem::path root_;
    nlohmann::ordered_json config_ = nlohmann::ordered_json::object();
    std::map<std::string, std::uint64_t> seeds_;
    std::vector<std::filesystem::path> inputs_, outputs_;
    nlohmann::ordered_json frozen_;
    bool written_ = false;
};

inline constexpr const char* run_manifest_name = "run_manifest.json";

// Reads a stage manifest and checks every listed output still hashes the same.
// Throws DataError naming the first missing or modified artifact.
nlohmann::json verify_manifest(const std::filesystem::path& manifest_path, const std::filesystem::path& root);

}  // namespace detox
