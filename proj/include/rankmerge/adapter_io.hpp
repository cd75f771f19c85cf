#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "rankmerge/layer_prior.hpp"
#include "rankmerge/lora.hpp"
#include "rankmerge/types.hpp"

namespace rankmerge {

// Adapter container layout (format_version 1):
//   8-byte unsigned little-endian header length N
//   N bytes of UTF-8 JSON: tensor name -> {dtype, shape, data_offsets},
//     plus a "__metadata__" string map
//   payload: concatenated little-endian float32 tensor data, row-major
// Each layer L contributes tensors "L.lora_A" [d_out, r] and "L.lora_B"
// [r, d_in]. Writing is canonical: names sorted lexicographically, compact
// JSON with sorted keys, offsets tiling the payload in that order, so the
// bytes are a pure function of the adapter set's content.
AdapterSet read_adapter(const std::filesystem::path& path);
void write_adapter(const AdapterSet& set, const std::filesystem::path& path);

// In-memory variants used by the round-trip tests and the CLI.
AdapterSet parse_adapter(const std::vector<std::uint8_t>& bytes, const std::string& origin);
std::vector<std::uint8_t> serialize_adapter(const AdapterSet& set);

struct ManifestEntry {
    std::string name;
    std::optional<int> resolution;
    std::optional<LayerClass> class_override;
    // Output dimension of the layer; optional, used for parameter accounting
    // of architecture fixtures.
    std::optional<Index> d_out;
};

struct LayerManifest {
    std::vector<ManifestEntry> entries;

    const ManifestEntry* find(std::string_view name) const;
    // Override wins, then explicit resolution, then the name patterns.
    LayerClass classify(std::string_view name, const ResolutionRule& rule = {}) const;
};

// Accepts either a bare JSON array of entries or an object
// {"format_version": "1", "entries": [...]}.
LayerManifest read_manifest(const std::filesystem::path& path);
LayerManifest parse_manifest(const std::string& text, const std::string& origin);

struct SyntheticSpec {
    int layers = 1;
    Index d_out = 64;
    Index d_in = 64;
    Index rank = 8;
    // Optional target singular values of a*b (length rank, sorted
    // non-increasing). Empty means i.i.d. standard normal factors.
    std::vector<double> spectrum;
    AdapterRole role = AdapterRole::Content;
};

// Deterministic synthetic adapter sets for tests and benchmarks. Layer names
// cycle through the UNet block families so every dominance class appears.
AdapterSet generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed);

// Shortest round-trip decimal formatting, shared by everything that needs
// canonical float text (metadata alpha, mask annotations).
std::string format_double(double value);
double parse_double(const std::string& text, const std::string& what);

} // namespace rankmerge
