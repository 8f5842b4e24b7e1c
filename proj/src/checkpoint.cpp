#include "detox/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "detox/error.hpp"

namespace detox {
namespace {

std::uint32_t to_le(std::uint32_t v) {
    if constexpr (std::endian::native == std::endian::big) return __builtin_bswap32(v);
    return v;
}

std::string shape_str(const std::vector<std::size_t>& s) {
    std::string out = "(";
    for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
    return out + ")";
}

std::size_t numel(const std::vector<std::size_t>& s) {
    std::size_t n = 1;
    for (auto x : s) n *= x;
    return n;
}

}  // namespace

const NamedTensor* TensorContainer::find(const std::string& name) const {
    for (const auto& t : tensors)
        if (t.name == name) return &t;
    return nullptr;
}

void TensorContainer::save(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    nlohmann::ordered_json manifest = metadata;
    auto records = nlohmann::ordered_json::array();
    std::size_t offset = 0;
    std::ofstream blob(dir / "weights.bin", std::ios::binary);
    if (!blob) throw DataError("cannot write " + (dir / "weights.bin").string());
    for (const auto& t : tensors) {
        if (t.data.size() != numel(t.shape))
            throw InvariantError("tensor '" + t.name + "': data length disagrees with shape " + shape_str(t.shape));
        nlohmann::ordered_json rec;
        rec["name"] = t.name;
        rec["shape"] = t.shape;
        rec["dtype"] = "f32";
        rec["byte_offset"] = offset;
        records.push_back(rec);
        std::vector<std::uint32_t> raw(t.data.size());
        for (std::size_t i = 0; i < t.data.size(); ++i) raw[i] = to_le(std::bit_cast<std::uint32_t>(t.data[i]));
        blob.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size() * 4));
        offset += raw.size() * 4;
    }
    manifest["tensors"] = records;
    std::ofstream mf(dir / "manifest.json", std::ios::binary);
    if (!mf) throw DataError("cannot write " + (dir / "manifest.json").string());
    mf << manifest.dump(2) << '\n';
}

TensorContainer TensorContainer::load(const std::filesystem::path& dir) {
    const auto manifest_path = dir / "manifest.json";
    const auto blob_path = dir / "weights.bin";
    std::ifstream mf(manifest_path, std::ios::binary);
    if (!mf) throw DataError("missing " + manifest_path.string());
    nlohmann::ordered_json manifest;
    try {
        manifest = nlohmann::ordered_json::parse(mf);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(manifest_path.string() + ": " + e.what());
    }
    std::ifstream bf(blob_path, std::ios::binary);
    if (!bf) throw DataError("missing " + blob_path.string());
    std::vector<char> blob((std::istreambuf_iterator<char>(bf)), std::istreambuf_iterator<char>());

    if (!manifest.contains("tensors") || !manifest["tensors"].is_array())
        throw DataError(manifest_path.string() + ": missing tensor records");
    TensorContainer out;
    const auto& recs = manifest["tensors"];
    std::size_t expected_offset = 0;
    for (std::size_t r = 0; r < recs.size(); ++r) {
        const auto& rec = recs[r];
        NamedTensor t;
        try {
            t.name = rec.at("name").get<std::string>();
            t.shape = rec.at("shape").get<std::vector<std::size_t>>();
            if (rec.at("dtype").get<std::string>() != "f32")
                throw DataError("tensor '" + t.name + "': unsupported dtype");
            const auto offset = rec.at("byte_offset").get<std::size_t>();
            if (offset != expected_offset)
                throw DataError("tensor '" + t.name + "': byte_offset " + std::to_string(offset) + " expected " +
                                std::to_string(expected_offset));
        } catch (const nlohmann::json::exception& e) {
            throw DataError(manifest_path.string() + ": malformed tensor record " + std::to_string(r) + ": " + e.what());
        }
        const std::size_t next = r + 1 < recs.size() ? recs[r + 1].value("byte_offset", blob.size()) : blob.size();
        const std::size_t avail_bytes = next >= expected_offset ? next - expected_offset : 0;
        const std::size_t want = numel(t.shape);
        if (avail_bytes != want * 4 || expected_offset + want * 4 > blob.size())
            throw DataError("tensor '" + t.name + "': shape mismatch, manifest declares " + shape_str(t.shape) + " (" +
                            std::to_string(want) + " floats) but blob holds " +
                            std::to_string(std::min(avail_bytes, blob.size() - std::min(blob.size(), expected_offset)) / 4) +
                            " floats");
        t.data.resize(want);
        for (std::size_t i = 0; i < want; ++i) {
            std::uint32_t raw;
            std::memcpy(&raw, blob.data() + expected_offset + i * 4, 4);
            const float v = std::bit_cast<float>(to_le(raw));
            if (!std::isfinite(v))
                throw DataError("tensor '" + t.name + "': non-finite value at flat index " + std::to_string(i));
            t.data[i] = v;
        }
        expected_offset += want * 4;
        out.tensors.push_back(std::move(t));
    }
    if (expected_offset != blob.size())
        throw DataError(blob_path.string() + ": manifest covers " + std::to_string(expected_offset) + " bytes but blob has " +
                        std::to_string(blob.size()));
    manifest.erase("tensors");
    out.metadata = std::move(manifest);
    return out;
}

nlohmann::ordered_json config_to_json(const ModelConfig& c) {
    nlohmann::ordered_json j;
    j["n_layers"] = c.n_layers;
    j["d_model"] = c.d_model;
    j["d_mlp"] = c.d_mlp;
    j["n_heads"] = c.n_heads;
    j["vocab_size"] = c.vocab_size;
    j["max_seq_len"] = c.max_seq_len;
    j["activation"] = c.activation;
    return j;
}

ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    try {
        c.n_layers = j.at("n_layers").get<std::size_t>();
        c.d_model = j.at("d_model").get<std::size_t>();
        c.d_mlp = j.at("d_mlp").get<std::size_t>();
        c.n_heads = j.at("n_heads").get<std::size_t>();
        c.vocab_size = j.at("vocab_size").get<std::size_t>();
        c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
        c.activation = j.value("activation", std::string("gelu"));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("model config: ") + e.what());
    }
    c.validate();
    return c;
}

void save_checkpoint(const ModelCheckpoint& ckpt, const std::filesystem::path& dir) {
    if (ckpt.vocab.size() != ckpt.config().vocab_size)
        throw InvariantError("checkpoint vocabulary size disagrees with config");
    TensorContainer c;
    c.metadata["format"] = "detox-checkpoint";
    c.metadata["version"] = 1;
    c.metadata["config"] = config_to_json(ckpt.config());
    ckpt.weights.visit([&](const std::string& name, const std::vector<std::size_t>& shape, const std::vector<float>& data) {
        c.tensors.push_back({name, shape, data});
    });
    c.save(dir);
    ckpt.vocab.save(dir / "vocab.json");
}

ModelCheckpoint load_checkpoint(const std::filesystem::path& dir) {
    auto container = TensorContainer::load(dir);
    if (!container.metadata.contains("config")) throw DataError((dir / "manifest.json").string() + ": missing config");
    const auto config = config_from_json(container.metadata["config"]);
    ModelCheckpoint ckpt{Weights<float>::zeros(config), Vocabulary::load(dir / "vocab.json")};
    std::size_t matched = 0;
    ckpt.weights.visit([&](const std::string& name, const std::vector<std::size_t>& shape, std::vector<float>& data) {
        const auto* t = container.find(name);
        if (!t) throw DataError("checkpoint: missing tensor '" + name + "'");
        if (t->shape != shape)
            throw DataError("tensor '" + name + "': shape mismatch, manifest " + shape_str(t->shape) + " vs config " +
                            shape_str(shape));
        data = t->data;
        ++matched;
    });
    if (matched != container.tensors.size()) throw DataError("checkpoint: unexpected extra tensors in manifest");
    if (ckpt.vocab.size() != config.vocab_size)
        throw DataError("checkpoint: vocab.json has " + std::to_string(ckpt.vocab.size()) + " tokens, config says " +
                        std::to_string(config.vocab_size));
    return ckpt;
}

}  // namespace detox
