#include "detox/manifest.hpp"

#include <openssl/evp.h>

#include <chrono>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "detox/error.hpp"

namespace detox {

std::string git_blob_hash(std::string_view bytes) {
    const std::string header = "blob " + std::to_string(bytes.size()) + '\0';
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) != 1 ||
        EVP_DigestUpdate(ctx, header.data(), header.size()) != 1 ||
        EVP_DigestUpdate(ctx, bytes.data(), bytes.size()) != 1 || EVP_DigestFinal_ex(ctx, digest, &len) != 1) {
        EVP_MD_CTX_free(ctx);
        throw InvariantError("sha1 digest failed");
    }
    EVP_MD_CTX_free(ctx);
    std::ostringstream out;
    for (unsigned int i = 0; i < len; ++i) out << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
    return out.str();
}

std::string git_blob_hash_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("missing artifact " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return git_blob_hash(buf.str());
}

RunManifest::RunManifest(std::string pipeline, std::filesystem::path root)
    : pipeline_(std::move(pipeline)), root_(std::move(root)) {}

void RunManifest::add_input(const std::filesystem::path& path) { inputs_.push_back(path); }
void RunManifest::add_output(const std::filesystem::path& path) { outputs_.push_back(path); }

std::string RunManifest::relative(const std::filesystem::path& p) const {
    const auto rel = std::filesystem::proximate(p, root_);
    return rel.generic_string();
}

nlohmann::ordered_json RunManifest::to_json() const {
    if (written_) return frozen_;
    nlohmann::ordered_json j;
    j["pipeline"] = pipeline_;
    j["config"] = config_;
    j["seeds"] = seeds_;
    auto list = [&](const std::vector<std::filesystem::path>& paths) {
        nlohmann::ordered_json arr = nlohmann::ordered_json::array();
        for (const auto& p : paths) arr.push_back({{"path", relative(p)}, {"sha1", git_blob_hash_file(p)}});
        return arr;
    };
    j["inputs"] = list(inputs_);
    j["outputs"] = list(outputs_);
    return j;
}

void RunManifest::write(const std::filesystem::path& path) {
    if (written_) throw InvariantError("run manifest for '" + pipeline_ + "' already written");
    auto j = to_json();
    const auto now = std::chrono::system_clock::now();
    j["created_unix"] = std::chrono::duration_cast<std::chrono::seconds>(now.time_since_epoch()).count();
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write " + path.string());
    f << j.dump(2) << '\n';
    frozen_ = std::move(j);
    written_ = true;
}

nlohmann::json verify_manifest(const std::filesystem::path& manifest_path, const std::filesystem::path& root) {
    std::ifstream in(manifest_path, std::ios::binary);
    if (!in) throw DataError("missing run manifest " + manifest_path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
        for (const auto& o : j.at("outputs")) {
            const auto rel = o.at("path").get<std::string>();
            const auto p = root / rel;
            if (!std::filesystem::exists(p)) throw DataError("artifact " + rel + " listed in " + manifest_path.string() + " is missing");
            if (git_blob_hash_file(p) != o.at("sha1").get<std::string>())
                throw DataError("artifact " + rel + " no longer matches its manifest hash");
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError(manifest_path.string() + ": " + e.what());
    }
    return j;
}

}  // namespace detox
