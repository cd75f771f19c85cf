#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "rankmerge/adapter_io.hpp"
#include "rankmerge/errors.hpp"
#include "rankmerge/linalg.hpp"
#include "rankmerge/lora.hpp"
#include "test_util.hpp"

using namespace rankmerge;

namespace {

const std::filesystem::path kFixtureDir = FIXTURE_DIR;

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// The fixture's content, rebuilt in memory; values chosen to be exactly
// representable in float32.
AdapterSet fixture_set() {
    Matrix a_a(4, 2);
    a_a << 1, 2, 3, 4, 5, 6, 7, 8;
    Matrix a_b(2, 4);
    a_b << 0.5, -1, 1.5, -2, 2.5, -3, 3.5, -4;
    Matrix b_a(4, 2);
    b_a << -1, 0.25, 0.75, -0.125, 2, -3, 4, 5;
    Matrix b_b(2, 4);
    b_b << 1, 0, 0, 1, 0, 1, 1, 0;

    AdapterSet set;
    set.role = AdapterRole::Content;
    set.add(LoraLayer("a", a_a, a_b, 4.0));
    set.add(LoraLayer("b", b_a, b_b, 4.0));
    return set;
}

std::filesystem::path temp_path(const std::string& name) {
    return std::filesystem::temp_directory_path() / ("rankmerge_test_" + name);
}

// Narrow a set to float32 precision, the values a written file stores.
AdapterSet narrowed(const AdapterSet& set) {
    AdapterSet out;
    out.role = set.role;
    out.metadata = set.metadata;
    for (const auto& [name, layer] : set.layers) {
        Matrix a = layer.a.unaryExpr([](double v) {
            return static_cast<double>(static_cast<float>(v));
        });
        Matrix b = layer.b.unaryExpr([](double v) {
            return static_cast<double>(static_cast<float>(v));
        });
        out.add(LoraLayer(name, std::move(a), std::move(b), layer.alpha));
    }
    return out;
}

bool sets_equal(const AdapterSet& lhs, const AdapterSet& rhs) {
    if (lhs.role != rhs.role || lhs.metadata != rhs.metadata) return false;
    if (lhs.layers.size() != rhs.layers.size()) return false;
    for (const auto& [name, layer] : lhs.layers) {
        const auto it = rhs.layers.find(name);
        if (it == rhs.layers.end()) return false;
        if (layer.alpha != it->second.alpha) return false;
        if (layer.a.rows() != it->second.a.rows() || layer.a.cols() != it->second.a.cols())
            return false;
        if (!(layer.a.array() == it->second.a.array()).all()) return false;
        if (!(layer.b.array() == it->second.b.array()).all()) return false;
    }
    return true;
}

} // namespace

TEST_CASE("reading the hand-authored fixture recovers the exact matrices") {
    const AdapterSet set = read_adapter(kFixtureDir / "two_layer_rank2.adapter");
    REQUIRE(set.layers.size() == 2);
    const AdapterSet expected = fixture_set();
    CHECK(sets_equal(set, expected));
    CHECK(set.layers.at("a").alpha == 4.0);
    CHECK(set.layers.at("a").rank() == 2);
    CHECK(set.role == AdapterRole::Content);
}

TEST_CASE("writing the fixture content is byte-identical to the checked-in file") {
    const std::vector<std::uint8_t> expected = read_bytes(kFixtureDir / "two_layer_rank2.adapter");
    const std::vector<std::uint8_t> produced = serialize_adapter(fixture_set());
    REQUIRE(produced.size() == expected.size());
    CHECK(std::memcmp(produced.data(), expected.data(), expected.size()) == 0);
}

TEST_CASE("round trip: read(write(S)) equals S at 32-bit precision") {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        AdapterSet set;
        set.role = AdapterRole::Style;
        set.metadata["note"] = "fixture " + std::to_string(seed);
        set.add(test_util::random_layer(seed, "unet.mid_block.attn." + std::to_string(seed), 6, 3,
                                        5, 7.5));
        set.add(test_util::random_layer(seed + 50, "unet.up_blocks.1.attn.0", 6, 2, 5, 7.5));

        const auto path = temp_path("roundtrip.adapter");
        write_adapter(set, path);
        const AdapterSet loaded = read_adapter(path);
        CHECK(sets_equal(loaded, narrowed(set)));

        // read -> write -> read is a fixed point.
        const auto path2 = temp_path("roundtrip2.adapter");
        write_adapter(loaded, path2);
        CHECK(read_bytes(path) == read_bytes(path2));
        CHECK(sets_equal(read_adapter(path2), loaded));
        std::filesystem::remove(path);
        std::filesystem::remove(path2);
    }
}

TEST_CASE("writes are canonical: same content, same bytes") {
    AdapterSet set = fixture_set();
    const std::vector<std::uint8_t> once = serialize_adapter(set);
    const std::vector<std::uint8_t> twice = serialize_adapter(set);
    CHECK(once == twice);
}

TEST_CASE("per-layer alpha round trip when alphas differ") {
    AdapterSet set;
    set.add(test_util::random_layer(3, "x", 4, 2, 4, 2.5));
    set.add(test_util::random_layer(4, "y", 4, 3, 4, 6.0));
    const auto path = temp_path("alphas.adapter");
    write_adapter(set, path);
    const AdapterSet loaded = read_adapter(path);
    CHECK(loaded.layers.at("x").alpha == 2.5);
    CHECK(loaded.layers.at("y").alpha == 6.0);
    std::filesystem::remove(path);
}

TEST_CASE("alpha defaults to the rank when metadata has none") {
    AdapterSet set;
    set.add(test_util::random_layer(5, "x", 4, 3, 4)); // alpha = rank = 3
    std::vector<std::uint8_t> bytes = serialize_adapter(set);
    // Strip the alpha key from the header by rewriting it through JSON.
    const std::string original = "\"alpha\":\"3\",";
    std::string text(bytes.begin() + 8, bytes.end());
    const auto pos = text.find(original);
    REQUIRE(pos != std::string::npos);
    // Splice the header manually: drop the alpha entry and fix the length.
    std::uint64_t header_len = 0;
    std::memcpy(&header_len, bytes.data(), 8);
    std::string header(bytes.begin() + 8, bytes.begin() + 8 + header_len);
    const auto apos = header.find(original);
    REQUIRE(apos != std::string::npos);
    header.erase(apos, original.size());
    std::vector<std::uint8_t> patched;
    const std::uint64_t new_len = header.size();
    patched.resize(8);
    std::memcpy(patched.data(), &new_len, 8);
    patched.insert(patched.end(), header.begin(), header.end());
    patched.insert(patched.end(), bytes.begin() + 8 + header_len, bytes.end());

    const AdapterSet loaded = parse_adapter(patched, "patched");
    CHECK(loaded.layers.at("x").alpha == 3.0);
}

TEST_CASE("empty set writes a header with only __metadata__ and no payload") {
    AdapterSet set;
    const std::vector<std::uint8_t> bytes = serialize_adapter(set);
    std::uint64_t header_len = 0;
    std::memcpy(&header_len, bytes.data(), 8);
    CHECK(bytes.size() == 8 + header_len);
    const std::string header(bytes.begin() + 8, bytes.end());
    CHECK(header.find("__metadata__") != std::string::npos);
    CHECK(header.find("lora_A") == std::string::npos);
    const AdapterSet loaded = parse_adapter(bytes, "empty");
    CHECK(loaded.layers.empty());
}

TEST_CASE("reserved metadata keys are rejected on write") {
    AdapterSet set = fixture_set();
    set.metadata["alpha"] = "9";
    CHECK_THROWS_AS(serialize_adapter(set), ValidationError);
}

TEST_CASE("read validation: distinct errors naming the offending tensor") {
    const std::vector<std::uint8_t> good = read_bytes(kFixtureDir / "two_layer_rank2.adapter");

    SUBCASE("truncated length prefix") {
        std::vector<std::uint8_t> bytes(good.begin(), good.begin() + 4);
        CHECK_THROWS_WITH_AS(parse_adapter(bytes, "t"), doctest::Contains("truncated"),
                             ValidationError);
    }
    SUBCASE("header length beyond the file") {
        std::vector<std::uint8_t> bytes = good;
        const std::uint64_t huge = bytes.size();
        std::memcpy(bytes.data(), &huge, 8);
        CHECK_THROWS_WITH_AS(parse_adapter(bytes, "t"), doctest::Contains("truncated"),
                             ValidationError);
    }
    SUBCASE("truncated payload") {
        std::vector<std::uint8_t> bytes = good;
        bytes.resize(bytes.size() - 16);
        CHECK_THROWS_AS(parse_adapter(bytes, "t"), ValidationError);
    }
    SUBCASE("missing lora_B") {
        // Rebuild a header that references only a.lora_A.
        AdapterSet set;
        set.add(test_util::random_layer(6, "a", 4, 2, 4));
        std::vector<std::uint8_t> bytes = serialize_adapter(set);
        std::uint64_t header_len = 0;
        std::memcpy(&header_len, bytes.data(), 8);
        std::string header(bytes.begin() + 8, bytes.begin() + 8 + header_len);
        // Drop the a.lora_B entry and its 32 payload bytes.
        const std::string b_entry =
            ",\"a.lora_B\":{\"data_offsets\":[32,64],\"dtype\":\"F32\",\"shape\":[2,4]}";
        const auto pos = header.find(b_entry);
        REQUIRE(pos != std::string::npos);
        header.erase(pos, b_entry.size());
        std::vector<std::uint8_t> patched(8);
        const std::uint64_t new_len = header.size();
        std::memcpy(patched.data(), &new_len, 8);
        patched.insert(patched.end(), header.begin(), header.end());
        patched.insert(patched.end(), bytes.begin() + 8 + header_len,
                       bytes.end() - 32); // drop B payload
        CHECK_THROWS_WITH_AS(parse_adapter(patched, "t"), doctest::Contains("a.lora_B missing"),
                             ValidationError);
    }
    SUBCASE("unsupported dtype") {
        std::vector<std::uint8_t> bytes = good;
        std::string text(bytes.begin() + 8, bytes.end());
        const auto pos = text.find("F32");
        text.replace(pos, 3, "F16");
        std::copy(text.begin(), text.end(), bytes.begin() + 8);
        CHECK_THROWS_WITH_AS(parse_adapter(bytes, "t"), doctest::Contains("dtype"),
                             ValidationError);
    }
    SUBCASE("overlapping offsets") {
        std::vector<std::uint8_t> bytes = good;
        std::string text(bytes.begin() + 8, bytes.end());
        // a.lora_B starts at 16 instead of 32: overlaps a.lora_A and breaks
        // the expected size, reported as an offsets problem.
        const std::string original = "\"data_offsets\":[32,64]";
        const auto pos = text.find(original);
        REQUIRE(pos != std::string::npos);
        text.replace(pos, original.size(), "\"data_offsets\":[16,48]");
        std::copy(text.begin(), text.end(), bytes.begin() + 8);
        CHECK_THROWS_WITH_AS(parse_adapter(bytes, "t"),
                             doctest::Contains("overlapping or non-contiguous"), ValidationError);
    }
    SUBCASE("rank mismatch between the pair") {
        // Raw file authored in place: A is [4,2] but B claims [3,4].
        const std::string header =
            R"({"__metadata__":{"format_version":"1"},)"
            R"("a.lora_A":{"data_offsets":[0,32],"dtype":"F32","shape":[4,2]},)"
            R"("a.lora_B":{"data_offsets":[32,80],"dtype":"F32","shape":[3,4]}})";
        std::vector<std::uint8_t> bytes(8);
        const std::uint64_t len = header.size();
        std::memcpy(bytes.data(), &len, 8);
        bytes.insert(bytes.end(), header.begin(), header.end());
        bytes.resize(8 + header.size() + 80, 0); // zero payload floats
        CHECK_THROWS_WITH_AS(parse_adapter(bytes, "t"), doctest::Contains("rank"),
                             ValidationError);
    }
    SUBCASE("non-finite payload value") {
        std::vector<std::uint8_t> bytes = good;
        // Overwrite the first float of a.lora_A with +inf (0x7f800000).
        std::uint64_t header_len = 0;
        std::memcpy(&header_len, bytes.data(), 8);
        const std::uint8_t inf[4] = {0x00, 0x00, 0x80, 0x7f};
        std::copy(inf, inf + 4, bytes.begin() + 8 + header_len);
        CHECK_THROWS_WITH_AS(parse_adapter(bytes, "t"), doctest::Contains("a.lora_A"),
                             ValidationError);
    }
    SUBCASE("unknown tensor suffix") {
        std::vector<std::uint8_t> bytes = good;
        std::string text(bytes.begin() + 8, bytes.end());
        const auto pos = text.find("a.lora_A");
        text.replace(pos, 8, "a.lora_X");
        std::copy(text.begin(), text.end(), bytes.begin() + 8);
        CHECK_THROWS_AS(parse_adapter(bytes, "t"), ValidationError);
    }
}

TEST_CASE("manifest parsing") {
    SUBCASE("bare array") {
        const LayerManifest manifest = parse_manifest(
            R"([{"name":"unet.up_blocks.2.a"},{"name":"x","resolution":16},{"name":"y","class_override":"style"}])",
            "m");
        REQUIRE(manifest.entries.size() == 3);
        CHECK(manifest.classify("unet.up_blocks.2.a") == LayerClass::ContentDominant);
        CHECK(manifest.classify("x") == LayerClass::ContentDominant); // resolution 16
        CHECK(manifest.classify("y") == LayerClass::StyleDominant);   // override
        CHECK(manifest.classify("unknown") == LayerClass::Neutral);
    }
    SUBCASE("wrapped object with format_version") {
        const LayerManifest manifest = parse_manifest(
            R"({"format_version":"1","entries":[{"name":"a","d_out":640}]})", "m");
        REQUIRE(manifest.entries.size() == 1);
        CHECK(manifest.entries[0].d_out == 640);
    }
    SUBCASE("override beats resolution") {
        const LayerManifest manifest = parse_manifest(
            R"([{"name":"a","resolution":16,"class_override":"neutral"}])", "m");
        CHECK(manifest.classify("a") == LayerClass::Neutral);
    }
    SUBCASE("duplicate names rejected") {
        CHECK_THROWS_WITH_AS(parse_manifest(R"([{"name":"a"},{"name":"a"}])", "m"),
                             doctest::Contains("duplicate"), ValidationError);
    }
    SUBCASE("unknown entry key rejected") {
        CHECK_THROWS_WITH_AS(parse_manifest(R"([{"name":"a","width":3}])", "m"),
                             doctest::Contains("width"), ValidationError);
    }
    SUBCASE("malformed JSON names the position") {
        CHECK_THROWS_WITH_AS(parse_manifest("[{\"name\":\n\"a\",]", "m"),
                             doctest::Contains("malformed"), ValidationError);
    }
    SUBCASE("bad class_override") {
        CHECK_THROWS_AS(parse_manifest(R"([{"name":"a","class_override":"fancy"}])", "m"),
                        ValidationError);
    }
}

TEST_CASE("the checked-in SDXL-like manifest is valid and classifies as designed") {
    const LayerManifest manifest = read_manifest(kFixtureDir / "sdxl_attention_manifest.json");
    CHECK(manifest.entries.size() == 560);
    int content = 0, style = 0, neutral = 0;
    for (const ManifestEntry& entry : manifest.entries) {
        switch (manifest.classify(entry.name)) {
            case LayerClass::ContentDominant: ++content; break;
            case LayerClass::StyleDominant: ++style; break;
            case LayerClass::Neutral: ++neutral; break;
        }
        REQUIRE(entry.d_out.has_value());
    }
    CHECK(content == 240); // down_blocks.2 + mid_block
    CHECK(style == 80);    // down_blocks.1 + up_blocks.1
    CHECK(neutral == 240); // up_blocks.0
}

TEST_CASE("generate_synthetic shapes and determinism") {
    SyntheticSpec spec;
    spec.layers = 6;
    spec.d_out = 640;
    spec.d_in = 64;
    spec.rank = 64;
    const AdapterSet set = generate_synthetic(spec, 42);
    REQUIRE(set.layers.size() == 6);
    for (const auto& [name, layer] : set.layers) {
        CHECK(layer.a.rows() == 640);
        CHECK(layer.a.cols() == 64);
        CHECK(layer.b.rows() == 64);
        CHECK(layer.b.cols() == 64);
        CHECK(layer.alpha == 64.0);
    }

    // Same seed, same bytes.
    const AdapterSet again = generate_synthetic(spec, 42);
    CHECK(serialize_adapter(set) == serialize_adapter(again));
    const AdapterSet different = generate_synthetic(spec, 43);
    CHECK(serialize_adapter(set) != serialize_adapter(different));

    // Layer names cycle the block families, so every class appears.
    int content = 0, style = 0;
    for (const auto& [name, layer] : set.layers) {
        const LayerClass cls = classify_layer(name);
        content += cls == LayerClass::ContentDominant ? 1 : 0;
        style += cls == LayerClass::StyleDominant ? 1 : 0;
    }
    CHECK(content > 0);
    CHECK(style > 0);
}

TEST_CASE("generate_synthetic with a target spectrum") {
    SyntheticSpec spec;
    spec.layers = 1;
    spec.d_out = 8;
    spec.d_in = 6;
    spec.rank = 4;
    spec.spectrum = {4.0, 3.0, 2.0, 1.0};
    const AdapterSet set = generate_synthetic(spec, 7);
    const LoraLayer& layer = set.layers.begin()->second;
    const Vector sigma = svd(delta_weight(layer)).sigma;
    // alpha = rank, so the delta's spectrum is exactly the requested one.
    for (Index i = 0; i < 4; ++i) {
        CHECK(sigma[i] == doctest::Approx(spec.spectrum[i]).epsilon(1e-8));
    }
    for (Index i = 4; i < sigma.size(); ++i) CHECK(sigma[i] < 1e-9);

    spec.spectrum = {1.0, 2.0};
    CHECK_THROWS_AS(generate_synthetic(spec, 7), ValidationError);
}

TEST_CASE("format_double round trips") {
    for (double v : {0.1, 1.0, 64.0, 2.5e-7, 1e300, 0.0}) {
        CHECK(parse_double(format_double(v), "t") == v);
    }
    CHECK_THROWS_AS(parse_double("abc", "t"), ValidationError);
    CHECK_THROWS_AS(parse_double("1.0x", "t"), ValidationError);
}
