#pragma once

// Self-describing checkpoint container: a manifest of named float64
// tensors plus a config snapshot, with little-endian payloads.
// load(save(x)) is bitwise identical.
//
// Layout (all integers little-endian):
//   magic   "WPMF"            4 bytes
//   version u32               currently 1
//   u64 config_len, config bytes (key=value text)
//   u64 n_tensors
//   per tensor: u32 name_len, name bytes, u32 ndim, u64 dims...,
//               u64 byte offset into payload
//   u64 payload_len (bytes), payload (concatenated float64 data)

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "wpmfa/params.hpp"
#include "wpmfa/tensor.hpp"

namespace wpmfa {

static_assert(std::endian::native == std::endian::little,
              "checkpoint writer assumes a little-endian host");

namespace ckptdet {

template <class T>
void put(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw std::runtime_error("checkpoint: truncated file");
    return v;
}

}  // namespace ckptdet

inline void save_checkpoint(const std::string& path, const ParamStore& ps,
                            const std::string& config_text = "") {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write checkpoint: " + path);
    f.write("WPMF", 4);
    ckptdet::put<std::uint32_t>(f, 1);
    ckptdet::put<std::uint64_t>(f, config_text.size());
    f.write(config_text.data(), static_cast<std::streamsize>(config_text.size()));
    ckptdet::put<std::uint64_t>(f, ps.size());
    std::uint64_t offset = 0;
    for (const auto& [name, t] : ps) {
        ckptdet::put<std::uint32_t>(f, static_cast<std::uint32_t>(name.size()));
        f.write(name.data(), static_cast<std::streamsize>(name.size()));
        ckptdet::put<std::uint32_t>(f, static_cast<std::uint32_t>(t.shape().size()));
        for (std::size_t d : t.shape()) ckptdet::put<std::uint64_t>(f, d);
        ckptdet::put<std::uint64_t>(f, offset);
        offset += t.numel() * sizeof(double);
    }
    ckptdet::put<std::uint64_t>(f, offset);
    for (const auto& [name, t] : ps)
        f.write(reinterpret_cast<const char*>(t.data().data()),
                static_cast<std::streamsize>(t.numel() * sizeof(double)));
    if (!f) throw std::runtime_error("write failure on checkpoint: " + path);
}

struct LoadedCheckpoint {
    ParamStore params;
    std::string config_text;
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open checkpoint: " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, "WPMF", 4) != 0)
        throw std::runtime_error("not a checkpoint file: " + path);
    const auto version = ckptdet::get<std::uint32_t>(f);
    if (version != 1)
        throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
    LoadedCheckpoint out;
    const auto cfg_len = ckptdet::get<std::uint64_t>(f);
    out.config_text.resize(cfg_len);
    f.read(out.config_text.data(), static_cast<std::streamsize>(cfg_len));
    const auto n_tensors = ckptdet::get<std::uint64_t>(f);
    struct Entry {
        std::string name;
        Shape shape;
        std::uint64_t offset;
    };
    std::vector<Entry> entries(n_tensors);
    for (auto& e : entries) {
        const auto name_len = ckptdet::get<std::uint32_t>(f);
        e.name.resize(name_len);
        f.read(e.name.data(), name_len);
        const auto ndim = ckptdet::get<std::uint32_t>(f);
        e.shape.resize(ndim);
        for (auto& d : e.shape) d = ckptdet::get<std::uint64_t>(f);
        e.offset = ckptdet::get<std::uint64_t>(f);
    }
    const auto payload_len = ckptdet::get<std::uint64_t>(f);
    std::vector<double> payload(payload_len / sizeof(double));
    f.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(payload_len));
    if (!f) throw std::runtime_error("checkpoint: truncated payload in " + path);
    for (auto& e : entries) {
        const std::size_t n = shape_numel(e.shape);
        if (e.offset % sizeof(double) != 0 || e.offset / sizeof(double) + n > payload.size())
            throw std::runtime_error("checkpoint: tensor '" + e.name +
                                     "' extends past payload in " + path);
        std::vector<double> data(payload.begin() + e.offset / sizeof(double),
                                 payload.begin() + e.offset / sizeof(double) + n);
        out.params.add(e.name, Tensor::from(std::move(data), e.shape));
    }
    return out;
}

}  // namespace wpmfa
