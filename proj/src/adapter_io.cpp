#include "rankmerge/adapter_io.hpp"

#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <set>

#include <json.hpp>

#include "rankmerge/errors.hpp"
#include "rankmerge/linalg.hpp"
#include "rankmerge/rng.hpp"

static_assert(std::endian::native == std::endian::little,
              "adapter container I/O assumes a little-endian host");

namespace rankmerge {

using nlohmann::json;

namespace {

constexpr const char* kMetadataKey = "__metadata__";
constexpr const char* kSuffixA = ".lora_A";
constexpr const char* kSuffixB = ".lora_B";

std::string format_version_of(const json& metadata) {
    if (!metadata.contains("format_version")) return "1";
    const json& v = metadata.at("format_version");
    if (!v.is_string()) throw ValidationError("__metadata__.format_version must be a string");
    return v.get<std::string>();
}

// Scans payload floats into a row-major matrix, widening to double. Byte
// arithmetic only; the payload is not guaranteed to be 4-byte aligned.
Matrix decode_tensor(const std::uint8_t* data, Index rows, Index cols, const std::string& name) {
    Matrix m(rows, cols);
    for (Index i = 0; i < rows; ++i) {
        for (Index j = 0; j < cols; ++j) {
            float v;
            std::memcpy(&v, data + (i * cols + j) * 4, sizeof(float));
            m(i, j) = static_cast<double>(v);
        }
    }
    if (!m.allFinite()) {
        throw ValidationError("tensor '" + name + "': non-finite value in payload");
    }
    return m;
}

void encode_tensor(const Matrix& m, std::vector<std::uint8_t>& out) {
    for (Index i = 0; i < m.rows(); ++i) {
        for (Index j = 0; j < m.cols(); ++j) {
            const float v = static_cast<float>(m(i, j)); // round-to-nearest-even
            const std::uint8_t* p = reinterpret_cast<const std::uint8_t*>(&v);
            out.insert(out.end(), p, p + sizeof(float));
        }
    }
}

struct TensorInfo {
    Index rows = 0;
    Index cols = 0;
    std::uint64_t begin = 0;
    std::uint64_t end = 0;
};

TensorInfo parse_tensor_entry(const std::string& name, const json& entry) {
    if (!entry.is_object()) throw ValidationError("tensor '" + name + "': entry is not an object");
    for (const auto& [key, value] : entry.items()) {
        if (key != "dtype" && key != "shape" && key != "data_offsets") {
            throw ValidationError("tensor '" + name + "': unknown header key '" + key + "'");
        }
    }
    if (!entry.contains("dtype") || !entry.contains("shape") || !entry.contains("data_offsets")) {
        throw ValidationError("tensor '" + name + "': missing dtype, shape or data_offsets");
    }
    if (entry.at("dtype") != "F32") {
        throw ValidationError("tensor '" + name + "': unsupported dtype (only F32 accepted)");
    }
    const json& shape = entry.at("shape");
    if (!shape.is_array() || shape.size() != 2 || !shape[0].is_number_unsigned() ||
        !shape[1].is_number_unsigned()) {
        throw ValidationError("tensor '" + name + "': shape must be two non-negative integers");
    }
    const json& offsets = entry.at("data_offsets");
    if (!offsets.is_array() || offsets.size() != 2 || !offsets[0].is_number_unsigned() ||
        !offsets[1].is_number_unsigned()) {
        throw ValidationError("tensor '" + name + "': data_offsets must be two offsets");
    }
    TensorInfo info;
    info.rows = shape[0].get<Index>();
    info.cols = shape[1].get<Index>();
    info.begin = offsets[0].get<std::uint64_t>();
    info.end = offsets[1].get<std::uint64_t>();
    if (info.rows < 1 || info.cols < 1) {
        throw ValidationError("tensor '" + name + "': shape must be positive");
    }
    const std::uint64_t expected =
        static_cast<std::uint64_t>(info.rows) * static_cast<std::uint64_t>(info.cols) * 4;
    if (info.end < info.begin || info.end - info.begin != expected) {
        throw ValidationError("tensor '" + name + "': data_offsets span " +
                              std::to_string(info.end - info.begin) + " bytes, expected " +
                              std::to_string(expected));
    }
    return info;
}

} // namespace

std::string format_double(double value) {
    char buffer[64];
    const auto result = std::to_chars(buffer, buffer + sizeof(buffer), value);
    return std::string(buffer, result.ptr);
}

double parse_double(const std::string& text, const std::string& what) {
    double value = 0.0;
    const char* begin = text.data();
    const char* end = begin + text.size();
    const auto result = std::from_chars(begin, end, value);
    if (result.ec != std::errc{} || result.ptr != end) {
        throw ValidationError(what + ": cannot parse '" + text + "' as a decimal number");
    }
    return value;
}

AdapterSet parse_adapter(const std::vector<std::uint8_t>& bytes, const std::string& origin) {
    if (bytes.size() < 8) throw ValidationError(origin + ": truncated file (no header length)");
    std::uint64_t header_len = 0;
    std::memcpy(&header_len, bytes.data(), 8);
    if (bytes.size() - 8 < header_len) {
        throw ValidationError(origin + ": truncated file (header length " +
                              std::to_string(header_len) + " exceeds file size)");
    }

    json header;
    try {
        header = json::parse(bytes.begin() + 8, bytes.begin() + 8 + header_len);
    } catch (const json::parse_error& e) {
        throw ValidationError(origin + ": malformed header JSON: " + e.what());
    }
    if (!header.is_object()) throw ValidationError(origin + ": header is not a JSON object");

    const std::uint8_t* payload = bytes.data() + 8 + header_len;
    const std::uint64_t payload_size = bytes.size() - 8 - header_len;

    AdapterSet set;
    json metadata = json::object();
    if (header.contains(kMetadataKey)) {
        metadata = header.at(kMetadataKey);
        if (!metadata.is_object()) throw ValidationError(origin + ": __metadata__ is not a map");
    }
    const std::string version = format_version_of(metadata);
    if (version != "1") {
        throw ValidationError(origin + ": unsupported format_version '" + version + "'");
    }

    // Tensor entries in lexicographic name order (nlohmann objects iterate
    // sorted); offsets must ascend contiguously from zero in that order.
    struct NamedTensor {
        std::string name;
        TensorInfo info;
    };
    std::vector<NamedTensor> tensors;
    std::uint64_t expected_begin = 0;
    for (const auto& [name, entry] : header.items()) {
        if (name == kMetadataKey) continue;
        TensorInfo info = parse_tensor_entry(name, entry);
        if (info.begin != expected_begin) {
            throw ValidationError("tensor '" + name +
                                  "': overlapping or non-contiguous data_offsets (begin " +
                                  std::to_string(info.begin) + ", expected " +
                                  std::to_string(expected_begin) + ")");
        }
        if (info.end > payload_size) {
            throw ValidationError("tensor '" + name + "': truncated file (payload ends at " +
                                  std::to_string(payload_size) + ", tensor needs " +
                                  std::to_string(info.end) + ")");
        }
        expected_begin = info.end;
        tensors.push_back({name, info});
    }
    if (expected_begin != payload_size) {
        throw ValidationError(origin + ": payload has " + std::to_string(payload_size) +
                              " bytes but tensors tile only " + std::to_string(expected_begin));
    }

    // Pair L.lora_A with L.lora_B.
    std::map<std::string, std::pair<std::optional<TensorInfo>, std::optional<TensorInfo>>> pairs;
    for (const NamedTensor& t : tensors) {
        const auto ends_with = [&](const char* suffix) {
            const std::string_view sv(suffix);
            return t.name.size() > sv.size() &&
                   t.name.compare(t.name.size() - sv.size(), sv.size(), sv) == 0;
        };
        if (ends_with(kSuffixA)) {
            pairs[t.name.substr(0, t.name.size() - std::strlen(kSuffixA))].first = t.info;
        } else if (ends_with(kSuffixB)) {
            pairs[t.name.substr(0, t.name.size() - std::strlen(kSuffixB))].second = t.info;
        } else {
            throw ValidationError("tensor '" + t.name +
                                  "': name does not end in .lora_A or .lora_B");
        }
    }

    for (const auto& [layer_name, pair] : pairs) {
        if (!pair.first.has_value()) {
            throw ValidationError(layer_name + kSuffixA + " missing");
        }
        if (!pair.second.has_value()) {
            throw ValidationError(layer_name + kSuffixB + " missing");
        }
        const TensorInfo& a_info = *pair.first;
        const TensorInfo& b_info = *pair.second;
        if (a_info.cols != b_info.rows) {
            throw ValidationError("tensor '" + layer_name + kSuffixB + "': rank " +
                                  std::to_string(b_info.rows) + " does not match '" + layer_name +
                                  kSuffixA + "' rank " + std::to_string(a_info.cols));
        }
        Matrix a = decode_tensor(payload + a_info.begin, a_info.rows, a_info.cols,
                                 layer_name + kSuffixA);
        Matrix b = decode_tensor(payload + b_info.begin, b_info.rows, b_info.cols,
                                 layer_name + kSuffixB);

        double alpha = static_cast<double>(a_info.cols);
        const std::string per_layer_key = "alpha:" + layer_name;
        if (metadata.contains(per_layer_key)) {
            if (!metadata.at(per_layer_key).is_string()) {
                throw ValidationError(origin + ": metadata " + per_layer_key + " must be a string");
            }
            alpha = parse_double(metadata.at(per_layer_key).get<std::string>(),
                                 "metadata " + per_layer_key);
        } else if (metadata.contains("alpha")) {
            if (!metadata.at("alpha").is_string()) {
                throw ValidationError(origin + ": metadata alpha must be a string");
            }
            alpha = parse_double(metadata.at("alpha").get<std::string>(), "metadata alpha");
        }
        set.add(LoraLayer(layer_name, std::move(a), std::move(b), alpha));
    }

    if (metadata.contains("role")) {
        if (!metadata.at("role").is_string()) {
            throw ValidationError(origin + ": metadata role must be a string");
        }
        set.role = parse_role(metadata.at("role").get<std::string>());
    }
    for (const auto& [key, value] : metadata.items()) {
        if (key == "format_version" || key == "role" || key == "rank" || key == "alpha" ||
            key.rfind("alpha:", 0) == 0) {
            continue;
        }
        if (!value.is_string()) {
            throw ValidationError(origin + ": metadata value for '" + key + "' must be a string");
        }
        set.metadata[key] = value.get<std::string>();
    }
    return set;
}

std::vector<std::uint8_t> serialize_adapter(const AdapterSet& set) {
    json metadata = json::object();
    metadata["format_version"] = "1";
    metadata["role"] = role_name(set.role);

    bool uniform_alpha = true;
    bool uniform_rank = true;
    if (!set.layers.empty()) {
        const LoraLayer& first = set.layers.begin()->second;
        for (const auto& [name, layer] : set.layers) {
            uniform_alpha = uniform_alpha && layer.alpha == first.alpha;
            uniform_rank = uniform_rank && layer.rank() == first.rank();
        }
        if (uniform_alpha) {
            metadata["alpha"] = format_double(first.alpha);
        } else {
            for (const auto& [name, layer] : set.layers) {
                metadata["alpha:" + name] = format_double(layer.alpha);
            }
        }
        if (uniform_rank) metadata["rank"] = std::to_string(first.rank());
    }
    for (const auto& [key, value] : set.metadata) {
        if (key == "format_version" || key == "role" || key == "rank" || key == "alpha" ||
            key.rfind("alpha:", 0) == 0) {
            throw ValidationError("write_adapter: metadata key '" + key + "' is reserved");
        }
        metadata[key] = value;
    }

    // Tensor names sorted lexicographically; offsets tile the payload in the
    // same order. std::map iteration and nlohmann key ordering give both.
    json header = json::object();
    header[kMetadataKey] = std::move(metadata);
    std::vector<std::uint8_t> payload;
    std::map<std::string, const Matrix*> tensors;
    for (const auto& [name, layer] : set.layers) {
        tensors[name + kSuffixA] = &layer.a;
        tensors[name + kSuffixB] = &layer.b;
    }
    for (const auto& [tensor_name, matrix] : tensors) {
        const std::uint64_t begin = payload.size();
        encode_tensor(*matrix, payload);
        header[tensor_name] = {
            {"dtype", "F32"},
            {"shape", {matrix->rows(), matrix->cols()}},
            {"data_offsets", {begin, payload.size()}},
        };
    }

    const std::string header_text = header.dump();
    std::vector<std::uint8_t> bytes;
    bytes.reserve(8 + header_text.size() + payload.size());
    const std::uint64_t header_len = header_text.size();
    const std::uint8_t* len_ptr = reinterpret_cast<const std::uint8_t*>(&header_len);
    bytes.insert(bytes.end(), len_ptr, len_ptr + 8);
    bytes.insert(bytes.end(), header_text.begin(), header_text.end());
    bytes.insert(bytes.end(), payload.begin(), payload.end());
    return bytes;
}

AdapterSet read_adapter(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open adapter file '" + path.string() + "'");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    if (in.bad()) throw IoError("read failure on '" + path.string() + "'");
    return parse_adapter(bytes, path.string());
}

void write_adapter(const AdapterSet& set, const std::filesystem::path& path) {
    const std::vector<std::uint8_t> bytes = serialize_adapter(set);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failure on '" + path.string() + "'");
}

const ManifestEntry* LayerManifest::find(std::string_view name) const {
    for (const ManifestEntry& entry : entries) {
        if (entry.name == name) return &entry;
    }
    return nullptr;
}

LayerClass LayerManifest::classify(std::string_view name, const ResolutionRule& rule) const {
    const ManifestEntry* entry = find(name);
    if (entry == nullptr) return classify_layer(name, {}, rule);
    if (entry->class_override.has_value()) return *entry->class_override;
    return classify_layer(name, entry->resolution, rule);
}

LayerManifest parse_manifest(const std::string& text, const std::string& origin) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ValidationError(origin + ": malformed manifest JSON: " + e.what());
    }

    json entries;
    if (doc.is_array()) {
        entries = doc;
    } else if (doc.is_object()) {
        if (doc.contains("format_version") && doc.at("format_version") != "1") {
            throw ValidationError(origin + ": unsupported manifest format_version");
        }
        for (const auto& [key, value] : doc.items()) {
            if (key != "format_version" && key != "entries") {
                throw ValidationError(origin + ": unknown manifest key '" + key + "'");
            }
        }
        if (!doc.contains("entries") || !doc.at("entries").is_array()) {
            throw ValidationError(origin + ": manifest object needs an 'entries' array");
        }
        entries = doc.at("entries");
    } else {
        throw ValidationError(origin + ": manifest must be an array or an object");
    }

    LayerManifest manifest;
    std::set<std::string> seen;
    for (const json& item : entries) {
        if (!item.is_object()) throw ValidationError(origin + ": manifest entry is not an object");
        ManifestEntry entry;
        for (const auto& [key, value] : item.items()) {
            if (key == "name") {
                if (!value.is_string() || value.get<std::string>().empty()) {
                    throw ValidationError(origin + ": manifest entry name must be a non-empty string");
                }
                entry.name = value.get<std::string>();
            } else if (key == "resolution") {
                if (!value.is_number_integer() || value.get<int>() < 1) {
                    throw ValidationError(origin + ": resolution must be a positive integer (entry '" +
                                          item.value("name", std::string("?")) + "')");
                }
                entry.resolution = value.get<int>();
            } else if (key == "class_override") {
                if (!value.is_string()) {
                    throw ValidationError(origin + ": class_override must be a string (entry '" +
                                          item.value("name", std::string("?")) + "')");
                }
                entry.class_override = parse_layer_class(value.get<std::string>());
            } else if (key == "d_out") {
                if (!value.is_number_integer() || value.get<Index>() < 1) {
                    throw ValidationError(origin + ": d_out must be a positive integer (entry '" +
                                          item.value("name", std::string("?")) + "')");
                }
                entry.d_out = value.get<Index>();
            } else {
                throw ValidationError(origin + ": unknown manifest entry key '" + key + "' (entry '" +
                                      item.value("name", std::string("?")) + "')");
            }
        }
        if (entry.name.empty()) throw ValidationError(origin + ": manifest entry without a name");
        if (!seen.insert(entry.name).second) {
            throw ValidationError(origin + ": duplicate manifest entry '" + entry.name + "'");
        }
        manifest.entries.push_back(std::move(entry));
    }
    return manifest;
}

LayerManifest read_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open manifest '" + path.string() + "'");
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw IoError("read failure on '" + path.string() + "'");
    return parse_manifest(text, path.string());
}

AdapterSet generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
    if (spec.layers < 1) throw ValidationError("generate_synthetic: layers must be >= 1");
    if (spec.d_out < 1 || spec.d_in < 1 || spec.rank < 1) {
        throw ValidationError("generate_synthetic: dimensions and rank must be positive");
    }
    if (!spec.spectrum.empty()) {
        if (static_cast<Index>(spec.spectrum.size()) != spec.rank) {
            throw ValidationError("generate_synthetic: spectrum length must equal rank");
        }
        if (spec.rank > std::min(spec.d_out, spec.d_in)) {
            throw ValidationError("generate_synthetic: spectrum requires rank <= min(d_out, d_in)");
        }
        for (size_t i = 0; i < spec.spectrum.size(); ++i) {
            if (spec.spectrum[i] < 0.0) {
                throw ValidationError("generate_synthetic: spectrum values must be >= 0");
            }
            if (i > 0 && spec.spectrum[i] > spec.spectrum[i - 1]) {
                throw ValidationError("generate_synthetic: spectrum must be sorted non-increasing");
            }
        }
    }

    static const char* kBlocks[] = {"down_blocks.1", "down_blocks.2", "mid_block", "up_blocks.1",
                                    "up_blocks.2"};
    AdapterSet set;
    set.role = spec.role;
    for (int i = 0; i < spec.layers; ++i) {
        const std::string name = "unet." + std::string(kBlocks[i % 5]) + ".attentions." +
                                 std::to_string(i) + ".to_q";
        Rng rng(derive_seed(seed, name));
        Matrix a, b;
        if (spec.spectrum.empty()) {
            a = rng.normal_matrix(spec.d_out, spec.rank);
            b = rng.normal_matrix(spec.rank, spec.d_in);
        } else {
            // Orthonormal factors around the requested spectrum so a*b has
            // exactly those singular values.
            Eigen::HouseholderQR<Matrix> qr_u(rng.normal_matrix(spec.d_out, spec.rank));
            Eigen::HouseholderQR<Matrix> qr_v(rng.normal_matrix(spec.d_in, spec.rank));
            const Matrix u = qr_u.householderQ() * Matrix::Identity(spec.d_out, spec.rank);
            const Matrix v = qr_v.householderQ() * Matrix::Identity(spec.d_in, spec.rank);
            Vector sigma = Eigen::Map<const Vector>(spec.spectrum.data(), spec.rank);
            a = u * sigma.asDiagonal();
            b = v.transpose();
        }
        set.add(LoraLayer(name, std::move(a), std::move(b)));
    }
    return set;
}

} // namespace rankmerge
