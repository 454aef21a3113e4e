#pragma once

// CSEG1 checkpoint file.
//
//   "CSEG"            4 bytes magic
//   u32 version       = 1
//   u32 length, bytes config record (UTF-8 JSON: {"model": UNetConfig, "meta": {...}})
//   u32 tensor count
//   per tensor:       u32 key length, key bytes (UTF-8), u32 rank, u32 dims[rank],
//                     float32 values
//
// All integers and floats are little-endian. Reserved key prefixes:
//   "adam.m.<key>", "adam.v.<key>", "adam.t"   optimizer state
//   "norm.mean"                                 per-channel input means
//   "train.<key>"                               live parameters for resuming

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "crackseg/adam.hpp"
#include "crackseg/error.hpp"
#include "crackseg/json_config.hpp"
#include "crackseg/tensor.hpp"
#include "crackseg/unet.hpp"

namespace crackseg {

inline constexpr std::array<char, 4> kCheckpointMagic{'C', 'S', 'E', 'G'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    UNetConfig model;
    json meta = json::object();
    NamedTensors<float> tensors;

    const Tensor<float>* find(const std::string& key) const {
        for (const auto& t : tensors)
            if (t.key == key) return &t.value;
        return nullptr;
    }

    const Tensor<float>& get(const std::string& key) const {
        if (const auto* t = find(key)) return *t;
        throw CheckpointError("checkpoint has no tensor '" + key + "'");
    }

    void put(std::string key, Tensor<float> value) {
        for (auto& t : tensors)
            if (t.key == key) {
                t.value = std::move(value);
                return;
            }
        tensors.push_back({std::move(key), std::move(value)});
    }
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

class ByteReader {
public:
    ByteReader(const std::string& bytes, std::string file) : bytes_(bytes), file_(std::move(file)) {}

    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        pos_ += 4;
        return v;
    }

    float f32() { return std::bit_cast<float>(u32()); }

    std::string str(std::size_t n) {
        need(n);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    bool done() const { return pos_ == bytes_.size(); }

    [[noreturn]] void fail(const std::string& what) const {
        throw CheckpointError(file_ + ": " + what + " at byte " + std::to_string(pos_));
    }

private:
    void need(std::size_t n) const {
        if (bytes_.size() - pos_ < n) fail("truncated checkpoint");
    }

    const std::string& bytes_;
    std::string file_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& ck) {
    std::string out(kCheckpointMagic.begin(), kCheckpointMagic.end());
    detail::put_u32(out, kCheckpointVersion);
    const std::string record = json{{"model", to_json(ck.model)}, {"meta", ck.meta}}.dump();
    detail::put_u32(out, static_cast<std::uint32_t>(record.size()));
    out += record;
    detail::put_u32(out, static_cast<std::uint32_t>(ck.tensors.size()));
    for (const auto& [key, t] : ck.tensors) {
        detail::put_u32(out, static_cast<std::uint32_t>(key.size()));
        out += key;
        detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
        for (auto d : t.shape()) detail::put_u32(out, static_cast<std::uint32_t>(d));
        for (float v : t.values()) detail::put_f32(out, v);
    }
    return out;
}

inline Checkpoint decode_checkpoint(const std::string& bytes, const std::string& file = "<memory>") {
    detail::ByteReader r(bytes, file);
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic.data(), 4) != 0)
        throw CheckpointError(file + ": not a CSEG checkpoint (bad magic bytes)");
    r.str(4);
    const auto version = r.u32();
    if (version != kCheckpointVersion)
        throw CheckpointError(file + ": unsupported checkpoint version " + std::to_string(version));

    Checkpoint ck;
    const std::string record = r.str(r.u32());
    try {
        const json j = json::parse(record);
        ck.model = unet_config_from_json<CheckpointError>(j.at("model"), "model");
        ck.meta = j.value("meta", json::object());
    } catch (const json::exception& e) {
        r.fail(std::string("malformed config record: ") + e.what());
    } catch (const CheckpointError& e) {
        throw CheckpointError(file + ": " + e.what());
    }

    const auto count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string key = r.str(r.u32());
        const auto rank = r.u32();
        if (rank > 8) r.fail("implausible tensor rank " + std::to_string(rank));
        Shape shape(rank);
        for (auto& d : shape) d = r.u32();
        Tensor<float> t(shape);
        for (auto& v : t.values()) v = r.f32();
        ck.tensors.push_back({std::move(key), std::move(t)});
    }
    if (!r.done()) r.fail("trailing bytes after last tensor");
    return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
    const std::string bytes = encode_checkpoint(ck);
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw CheckpointError(path.string() + ": cannot open for writing");
        f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!f) throw CheckpointError(path.string() + ": write failed");
    }
    std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError(path.string() + ": cannot open checkpoint");
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return decode_checkpoint(bytes, path.string());
}

/// Stores every parameter tensor under `prefix + key`.
inline void put_params(Checkpoint& ck, const UNetParams<float>& p, const std::string& prefix = "") {
    for_each_tensor(p, [&](const std::string& key, const Tensor<float>& t) { ck.put(prefix + key, t); });
}

inline UNetParams<float> get_params(const Checkpoint& ck, const std::string& prefix = "") {
    auto p = UNetParams<float>::zeros(ck.model);
    for_each_tensor(p, [&](const std::string& key, Tensor<float>& t) {
        const auto& src = ck.get(prefix + key);
        if (src.shape() != t.shape())
            throw CheckpointError("tensor '" + prefix + key + "' has shape " + shape_str(src.shape()) + ", expected " +
                                  shape_str(t.shape()));
        t = src;
    });
    return p;
}

inline void put_adam(Checkpoint& ck, const AdamState<float>& s) {
    for (const auto& [k, t] : s.m) ck.put("adam.m." + k, t);
    for (const auto& [k, t] : s.v) ck.put("adam.v." + k, t);
    // t fits a float exactly below 2^24 steps
    ck.put("adam.t", Tensor<float>(Shape{}, std::vector<float>{static_cast<float>(s.t)}));
}

inline AdamState<float> get_adam(const Checkpoint& ck, const UNetParams<float>& like) {
    AdamState<float> s;
    for_each_tensor(like, [&](const std::string& key, const Tensor<float>&) {
        s.m.push_back({key, ck.get("adam.m." + key)});
        s.v.push_back({key, ck.get("adam.v." + key)});
    });
    s.t = static_cast<std::uint64_t>(ck.get("adam.t")[0]);
    return s;
}

}  // namespace crackseg
