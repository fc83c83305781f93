#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "meswitch/binary_io.hpp"
#include "meswitch/compress.hpp"

namespace meswitch {

inline constexpr char kArtifactMagic[4] = {'M', 'E', 'S', 'W'};
inline constexpr std::uint16_t kArtifactVersion = 1;

struct ArtifactManifest {
    std::string model_id;
    std::string domain;
    std::string base_digest;
    std::size_t layer_count = 0;

    nlohmann::json to_json() const {
        return nlohmann::json{{"model_id", model_id},
                              {"domain", domain},
                              {"base_digest", base_digest},
                              {"layer_count", layer_count}};
    }

    static ArtifactManifest from_json(const nlohmann::json& j) {
        ArtifactManifest m;
        m.model_id = j.at("model_id").get<std::string>();
        m.domain = j.at("domain").get<std::string>();
        m.base_digest = j.at("base_digest").get<std::string>();
        m.layer_count = j.at("layer_count").get<std::size_t>();
        return m;
    }

    friend bool operator==(const ArtifactManifest&, const ArtifactManifest&) = default;
};

/// All compressed layers of one expert plus its manifest.
struct ExpertArtifact {
    ArtifactManifest manifest;
    std::vector<CompressedDelta> layers;

    friend bool operator==(const ExpertArtifact&, const ExpertArtifact&) = default;
};

/// Byte accounting for one serialized layer block.
struct LayerSize {
    std::size_t header = 0;   // m, n, b, k and the packed-length prefix
    std::size_t indices = 0;  // k x u32
    std::size_t salient = 0;  // k x n x u16
    std::size_t steps = 0;    // n x f32
    std::size_t codes = 0;    // packed code bytes

    std::size_t total() const { return header + indices + salient + steps + codes; }
};

struct ArtifactSize {
    std::size_t file_header = 0;  // magic, version, manifest length and bytes
    std::vector<LayerSize> layers;

    std::size_t total() const {
        std::size_t t = file_header;
        for (const auto& l : layers) {
            t += l.total();
        }
        return t;
    }
};

inline constexpr std::size_t kLayerHeaderBytes = 4 + 4 + 1 + 4 + 4;

inline LayerSize layer_size(std::size_t m, std::size_t n, int bits, std::size_t k) {
    LayerSize s;
    s.header = kLayerHeaderBytes;
    s.indices = 4 * k;
    s.salient = 2 * k * n;
    s.steps = 4 * n;
    s.codes = n * PackedCodes::column_stride(m, bits);
    return s;
}

inline std::string manifest_bytes(const ArtifactManifest& m) { return m.to_json().dump(); }

inline ArtifactSize compressed_size_bytes(const ExpertArtifact& a) {
    ArtifactSize out;
    out.file_header = 4 + 2 + 4 + manifest_bytes(a.manifest).size();
    for (const auto& l : a.layers) {
        out.layers.push_back(layer_size(l.rows, l.cols, l.bits, l.k()));
    }
    return out;
}

inline std::vector<std::uint8_t> serialize_artifact(const ExpertArtifact& a) {
    require(a.manifest.layer_count == a.layers.size(), ErrorKind::invalid_argument,
            "serialize_artifact: manifest layer_count does not match the layer blocks");
    ByteWriter w;
    w.bytes(std::span(reinterpret_cast<const std::uint8_t*>(kArtifactMagic), 4));
    w.u16(kArtifactVersion);
    const std::string manifest = manifest_bytes(a.manifest);
    w.u32(static_cast<std::uint32_t>(manifest.size()));
    w.text(manifest);
    for (const auto& l : a.layers) {
        l.validate();
        w.u32(static_cast<std::uint32_t>(l.rows));
        w.u32(static_cast<std::uint32_t>(l.cols));
        w.u8(static_cast<std::uint8_t>(l.bits));
        w.u32(static_cast<std::uint32_t>(l.k()));
        for (auto i : l.salient.indices) {
            w.u32(i);
        }
        for (auto h : l.salient_rows) {
            w.u16(h);
        }
        w.f32s(l.steps.values);
        w.u32(static_cast<std::uint32_t>(l.packed.bytes.size()));
        w.bytes(l.packed.bytes);
    }
    return w.take();
}

/// Parse an artifact. When `expected_base_digest` is non-empty the manifest
/// must name that base, otherwise a digest_mismatch error is raised.
inline ExpertArtifact deserialize_artifact(std::span<const std::uint8_t> bytes,
                                           std::string_view expected_base_digest = {}) {
    ByteReader r(bytes, "artifact");
    const auto magic = r.bytes(4);
    if (!std::equal(magic.begin(), magic.end(), reinterpret_cast<const std::uint8_t*>(kArtifactMagic))) {
        fail(ErrorKind::bad_magic, "artifact: bad magic");
    }
    const std::uint16_t version = r.u16();
    if (version != kArtifactVersion) {
        fail(ErrorKind::bad_version, "artifact: unsupported version " + std::to_string(version));
    }
    const std::uint32_t manifest_len = r.u32();
    ExpertArtifact a;
    try {
        a.manifest = ArtifactManifest::from_json(nlohmann::json::parse(r.text(manifest_len)));
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::invalid_argument, std::string("artifact: malformed manifest: ") + e.what());
    }
    if (!expected_base_digest.empty() && a.manifest.base_digest != expected_base_digest) {
        fail(ErrorKind::digest_mismatch, "artifact: built for base " + a.manifest.base_digest +
                                             " but the resident base is " + std::string(expected_base_digest));
    }
    for (std::size_t layer = 0; layer < a.manifest.layer_count; ++layer) {
        CompressedDelta l;
        l.rows = r.u32();
        l.cols = r.u32();
        l.bits = r.u8();
        const std::uint32_t k = r.u32();
        require(k <= l.rows, ErrorKind::invalid_argument, "artifact: salient count exceeds rows");
        l.salient.indices.resize(k);
        for (auto& i : l.salient.indices) {
            i = r.u32();
        }
        l.salient_rows.resize(static_cast<std::size_t>(k) * l.cols);
        for (auto& h : l.salient_rows) {
            h = r.u16();
        }
        l.steps.values = r.f32s(l.cols);
        const std::uint32_t packed_len = r.u32();
        l.packed.bits = l.bits;
        l.packed.rows = l.rows;
        l.packed.cols = l.cols;
        const auto packed = r.bytes(packed_len);
        l.packed.bytes.assign(packed.begin(), packed.end());
        l.validate();
        a.layers.push_back(std::move(l));
    }
    if (r.remaining() != 0) {
        fail(ErrorKind::invalid_argument, "artifact: " + std::to_string(r.remaining()) + " trailing bytes");
    }
    return a;
}

inline std::string artifact_digest(std::span<const std::uint8_t> bytes) { return hex64(fnv1a64(bytes)); }

inline void save_artifact(const ExpertArtifact& a, const std::filesystem::path& path) {
    write_file_bytes(path, serialize_artifact(a));
}

inline ExpertArtifact load_artifact(const std::filesystem::path& path, std::string_view expected_base_digest = {}) {
    const auto bytes = read_file_bytes(path);
    return deserialize_artifact(bytes, expected_base_digest);
}

}  // namespace meswitch
