#pragma once

// Shared on-disk container: magic, version, dtype, dims, canonical-JSON
// manifest, little-endian payload, and a trailing checksum of everything
// before it. Corpora store f32 payloads; trained networks store f64.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace pdiff {

static_assert(std::endian::native == std::endian::little,
              "container i/o assumes a little-endian host");

inline constexpr char kContainerMagic[4] = {'P', 'D', 'F', 'C'};
inline constexpr std::uint32_t kContainerVersion = 1;

struct Container {
    nlohmann::json manifest;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<float> f32;
    std::vector<double> f64;

    bool is_f32() const { return f64.empty() && !f32.empty(); }
};

namespace detail {

inline std::uint64_t fnv1a(std::uint64_t h, const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

inline constexpr std::uint64_t kFnvOffset = 1469598103934665603ull;

struct HashingWriter {
    std::ofstream out;
    std::uint64_t hash = kFnvOffset;

    void write(const void* data, std::size_t n) {
        out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
        hash = fnv1a(hash, data, n);
    }
    template <typename T>
    void write_pod(T v) {
        write(&v, sizeof v);
    }
};

struct HashingReader {
    std::ifstream in;
    std::uint64_t hash = kFnvOffset;

    void read(void* data, std::size_t n) {
        in.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
        if (in.gcount() != static_cast<std::streamsize>(n)) {
            throw std::runtime_error("container: truncated file");
        }
        hash = fnv1a(hash, data, n);
    }
    template <typename T>
    T read_pod() {
        T v;
        read(&v, sizeof v);
        return v;
    }
};

}  // namespace detail

/// Canonical JSON: sorted keys (nlohmann's object order), no whitespace.
inline std::string canonical_json(const nlohmann::json& j) { return j.dump(); }

inline void save_container_f32(const std::filesystem::path& path, const nlohmann::json& manifest,
                               std::size_t rows, std::size_t cols, const std::vector<float>& data) {
    if (data.size() != rows * cols) {
        throw std::invalid_argument("container: payload size " + std::to_string(data.size()) +
                                    " != " + std::to_string(rows) + "x" + std::to_string(cols));
    }
    detail::HashingWriter w;
    w.out.open(path, std::ios::binary | std::ios::trunc);
    if (!w.out) throw std::runtime_error("container: cannot open " + path.string() + " for writing");
    w.write(kContainerMagic, 4);
    w.write_pod(kContainerVersion);
    w.write_pod(static_cast<std::uint32_t>(sizeof(float)));
    w.write_pod(static_cast<std::uint64_t>(rows));
    w.write_pod(static_cast<std::uint64_t>(cols));
    const std::string m = canonical_json(manifest);
    w.write_pod(static_cast<std::uint64_t>(m.size()));
    w.write(m.data(), m.size());
    w.write(data.data(), data.size() * sizeof(float));
    const std::uint64_t h = w.hash;
    w.out.write(reinterpret_cast<const char*>(&h), sizeof h);
    if (!w.out) throw std::runtime_error("container: write failed for " + path.string());
}

inline void save_container_f64(const std::filesystem::path& path, const nlohmann::json& manifest,
                               std::size_t rows, std::size_t cols, const std::vector<double>& data) {
    if (data.size() != rows * cols) {
        throw std::invalid_argument("container: payload size " + std::to_string(data.size()) +
                                    " != " + std::to_string(rows) + "x" + std::to_string(cols));
    }
    detail::HashingWriter w;
    w.out.open(path, std::ios::binary | std::ios::trunc);
    if (!w.out) throw std::runtime_error("container: cannot open " + path.string() + " for writing");
    w.write(kContainerMagic, 4);
    w.write_pod(kContainerVersion);
    w.write_pod(static_cast<std::uint32_t>(sizeof(double)));
    w.write_pod(static_cast<std::uint64_t>(rows));
    w.write_pod(static_cast<std::uint64_t>(cols));
    const std::string m = canonical_json(manifest);
    w.write_pod(static_cast<std::uint64_t>(m.size()));
    w.write(m.data(), m.size());
    w.write(data.data(), data.size() * sizeof(double));
    const std::uint64_t h = w.hash;
    w.out.write(reinterpret_cast<const char*>(&h), sizeof h);
    if (!w.out) throw std::runtime_error("container: write failed for " + path.string());
}

inline Container load_container(const std::filesystem::path& path) {
    detail::HashingReader r;
    r.in.open(path, std::ios::binary);
    if (!r.in) throw std::runtime_error("container: cannot open " + path.string());

    char magic[4];
    r.read(magic, 4);
    if (std::memcmp(magic, kContainerMagic, 4) != 0) {
        throw std::runtime_error("container: bad magic in " + path.string());
    }
    const auto version = r.read_pod<std::uint32_t>();
    if (version != kContainerVersion) {
        throw std::runtime_error("container: unsupported version " + std::to_string(version));
    }
    const auto dtype = r.read_pod<std::uint32_t>();
    if (dtype != sizeof(float) && dtype != sizeof(double)) {
        throw std::runtime_error("container: unknown dtype width " + std::to_string(dtype));
    }
    Container c;
    c.rows = r.read_pod<std::uint64_t>();
    c.cols = r.read_pod<std::uint64_t>();
    const auto mlen = r.read_pod<std::uint64_t>();
    std::string mtext(mlen, '\0');
    r.read(mtext.data(), mlen);
    c.manifest = nlohmann::json::parse(mtext);

    const std::size_t count = c.rows * c.cols;
    if (dtype == sizeof(float)) {
        c.f32.resize(count);
        r.read(c.f32.data(), count * sizeof(float));
    } else {
        c.f64.resize(count);
        r.read(c.f64.data(), count * sizeof(double));
    }
    const std::uint64_t expect = r.hash;
    std::uint64_t stored = 0;
    r.in.read(reinterpret_cast<char*>(&stored), sizeof stored);
    if (r.in.gcount() != sizeof stored) throw std::runtime_error("container: truncated file");
    if (stored != expect) {
        throw std::runtime_error("container: checksum mismatch in " + path.string());
    }
    return c;
}

}  // namespace pdiff
