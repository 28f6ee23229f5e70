// Parameter checkpoint file, little-endian binary:
//   magic "RLMW", u32 version, u32 entry count, then per entry:
//   u16 name length, UTF-8 name, u8 dtype (0=f32, 1=f64), u8 rank,
//   u64 dims[rank], raw values.

#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "realm/param_store.hpp"

namespace realm {

inline constexpr uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename V>
void write_pod(std::ofstream& os, const V& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
void read_pod(std::ifstream& is, V& v, const std::string& what) {
    is.read(reinterpret_cast<char*>(&v), sizeof(V));
    if (!is) fail("checkpoint: truncated file while reading " + what);
}

}  // namespace detail

template <typename T>
void write_checkpoint(const std::string& path, const ParamStore<T>& store) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) fail("checkpoint: cannot open '" + path + "' for writing");
    os.write("RLMW", 4);
    detail::write_pod(os, kCheckpointVersion);
    detail::write_pod(os, static_cast<uint32_t>(store.entries().size()));
    const uint8_t dtype = std::is_same_v<T, float> ? 0 : 1;
    for (const auto& [name, e] : store.entries()) {
        detail::write_pod(os, static_cast<uint16_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::write_pod(os, dtype);
        detail::write_pod(os, static_cast<uint8_t>(e.value.rank()));
        for (int64_t d : e.value.shape) detail::write_pod(os, static_cast<uint64_t>(d));
        os.write(reinterpret_cast<const char*>(e.value.ptr()),
                 static_cast<std::streamsize>(sizeof(T) * e.value.data.size()));
    }
    if (!os) fail("checkpoint: write failed for '" + path + "'");
}

template <typename T>
ParamStore<T> read_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) fail("checkpoint: cannot open '" + path + "'");
    char magic[4] = {};
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != "RLMW") fail("checkpoint: bad magic in '" + path + "'");
    uint32_t version = 0, count = 0;
    detail::read_pod(is, version, "version");
    if (version != kCheckpointVersion)
        fail("checkpoint: version mismatch in '" + path + "': file " + std::to_string(version) +
             ", supported " + std::to_string(kCheckpointVersion));
    detail::read_pod(is, count, "entry count");
    ParamStore<T> store;
    for (uint32_t i = 0; i < count; ++i) {
        uint16_t name_len = 0;
        detail::read_pod(is, name_len, "name length");
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        if (!is) fail("checkpoint: truncated file while reading name");
        uint8_t dtype = 0, rank = 0;
        detail::read_pod(is, dtype, "dtype");
        if (dtype > 1) fail("checkpoint: unknown dtype " + std::to_string(dtype));
        detail::read_pod(is, rank, "rank");
        std::vector<int64_t> shape(rank);
        for (auto& d : shape) {
            uint64_t u = 0;
            detail::read_pod(is, u, "dims");
            d = static_cast<int64_t>(u);
        }
        const int64_t n = numel_of(shape);
        const size_t elem = dtype == 0 ? 4 : 8;
        std::vector<char> raw(static_cast<size_t>(n) * elem);
        is.read(raw.data(), static_cast<std::streamsize>(raw.size()));
        if (!is)
            fail("checkpoint: truncated payload for '" + name + "': expected " + std::to_string(raw.size()) +
                 " bytes, got " + std::to_string(is.gcount()));
        Tensor<T> t(shape);
        if (dtype == 0) {
            const float* src = reinterpret_cast<const float*>(raw.data());
            for (int64_t j = 0; j < n; ++j) t[j] = static_cast<T>(src[j]);
        } else {
            const double* src = reinterpret_cast<const double*>(raw.data());
            for (int64_t j = 0; j < n; ++j) t[j] = static_cast<T>(src[j]);
        }
        store.add(name, std::move(t));
    }
    return store;
}

}  // namespace realm
