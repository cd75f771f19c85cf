#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "rankmerge/adapter_io.hpp"
#include "rankmerge/merge_optimizer.hpp"

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const std::string kCli = RANKMERGE_CLI;
const fs::path kFixtures = FIXTURE_DIR;

struct RunResult {
    int exit_code = -1;
    std::string output; // stdout + stderr
};

RunResult run(const std::string& args) {
    const std::string command = kCli + " " + args + " 2>&1";
    FILE* pipe = popen(command.c_str(), "r");
    REQUIRE(pipe != nullptr);
    RunResult result;
    char buffer[4096];
    while (size_t n = fread(buffer, 1, sizeof(buffer), pipe)) result.output.append(buffer, n);
    const int status = pclose(pipe);
    result.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return result;
}

fs::path temp_dir() {
    const fs::path dir = fs::temp_directory_path() / "rankmerge_cli_test";
    fs::create_directories(dir);
    return dir;
}

std::string file_text(const fs::path& path) {
    std::ifstream in(path);
    REQUIRE(in.good());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

bool same_bytes(const fs::path& lhs, const fs::path& rhs) {
    std::ifstream a(lhs, std::ios::binary), b(rhs, std::ios::binary);
    const std::string sa((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
    const std::string sb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
    return !sa.empty() && sa == sb;
}

void write_config(const fs::path& path, const json& extra = json::object()) {
    json config = {{"steps", 5}, {"probe_count", 32}, {"seed", 9}};
    for (const auto& [key, value] : extra.items()) config[key] = value;
    std::ofstream out(path);
    out << config.dump() << "\n";
}

void write_names_manifest(const fs::path& path, const std::vector<std::string>& names) {
    json entries = json::array();
    for (const std::string& name : names) entries.push_back({{"name", name}});
    std::ofstream out(path);
    out << entries.dump() << "\n";
}

} // namespace

TEST_CASE("gen is deterministic per seed") {
    const fs::path dir = temp_dir();
    const RunResult r1 =
        run("gen --layers 4 --dims 16x12 --rank 4 --seed 3 --out " + (dir / "g1.adapter").string());
    CHECK(r1.exit_code == 0);
    const RunResult r2 =
        run("gen --layers 4 --dims 16x12 --rank 4 --seed 3 --out " + (dir / "g2.adapter").string());
    CHECK(r2.exit_code == 0);
    CHECK(same_bytes(dir / "g1.adapter", dir / "g2.adapter"));

    const RunResult r3 =
        run("gen --layers 4 --dims 16x12 --rank 4 --seed 4 --out " + (dir / "g3.adapter").string());
    CHECK(r3.exit_code == 0);
    CHECK_FALSE(same_bytes(dir / "g1.adapter", dir / "g3.adapter"));
}

TEST_CASE("RANKMERGE_SEED acts as the default seed") {
    const fs::path dir = temp_dir();
    REQUIRE(run("gen --layers 2 --dims 8x8 --rank 2 --seed 77 --out " +
                (dir / "flag.adapter").string())
                .exit_code == 0);
    const std::string env_cmd = "RANKMERGE_SEED=77 " + kCli + " gen --layers 2 --dims 8x8 --rank 2 --out " +
                                (dir / "env.adapter").string() + " 2>&1";
    CHECK(std::system(env_cmd.c_str()) == 0);
    CHECK(same_bytes(dir / "flag.adapter", dir / "env.adapter"));
}

TEST_CASE("merge of a set with itself succeeds and reports decreasing losses") {
    const fs::path dir = temp_dir();
    const fs::path adapter = dir / "self.adapter";
    REQUIRE(run("gen --layers 4 --dims 24x24 --rank 4 --seed 5 --out " + adapter.string())
                .exit_code == 0);
    write_config(dir / "config.json");
    write_names_manifest(dir / "manifest.json",
                         {"unet.down_blocks.1.attentions.0.to_q",
                          "unet.down_blocks.2.attentions.1.to_q", "unet.mid_block.attentions.2.to_q",
                          "unet.up_blocks.1.attentions.3.to_q"});

    const RunResult merged = run("merge --content " + adapter.string() + " --style " +
                                 adapter.string() + " --manifest " + (dir / "manifest.json").string() +
                                 " --config " + (dir / "config.json").string() + " --out " +
                                 (dir / "merged.adapter").string() + " --report " +
                                 (dir / "report.json").string());
    CHECK(merged.exit_code == 0);
    CHECK(merged.output.find("merged 4 layer(s)") != std::string::npos);

    const json report = json::parse(file_text(dir / "report.json"));
    for (const auto& [name, layer] : report.at("layers").items()) {
        CHECK(layer.at("final_loss").get<double>() <=
              layer.at("initial_loss").get<double>() + 1e-9);
    }

    // The merged file carries mask annotations and loads as a valid adapter.
    const rankmerge::AdapterSet loaded = rankmerge::read_adapter(dir / "merged.adapter");
    CHECK(loaded.layers.size() == 4);
    CHECK(rankmerge::extract_mask_metadata(loaded).size() == 4);
}

TEST_CASE("merge without --manifest exits 2 naming the flag") {
    const RunResult result = run("merge --content a --style b --config c --out d");
    CHECK(result.exit_code == 2);
    CHECK(result.output.find("--manifest") != std::string::npos);
}

TEST_CASE("unknown flags are errors") {
    const RunResult result = run("gen --layers 2 --dims 8x8 --rank 2 --frobnicate --out /tmp/x");
    CHECK(result.exit_code == 2);
}

TEST_CASE("output-mask baseline multiplies the trainable parameter count") {
    const fs::path dir = temp_dir();
    const fs::path content = dir / "c.adapter";
    const fs::path style = dir / "s.adapter";
    REQUIRE(run("gen --layers 2 --dims 32x16 --rank 4 --seed 6 --out " + content.string())
                .exit_code == 0);
    REQUIRE(run("gen --layers 2 --dims 32x16 --rank 4 --seed 7 --out " + style.string())
                .exit_code == 0);
    write_config(dir / "config.json", {{"steps", 2}});
    write_names_manifest(dir / "manifest.json", {"unet.down_blocks.1.attentions.0.to_q",
                                                 "unet.down_blocks.2.attentions.1.to_q"});

    const std::string base = " --content " + content.string() + " --style " + style.string() +
                             " --manifest " + (dir / "manifest.json").string() + " --config " +
                             (dir / "config.json").string();
    REQUIRE(run("merge" + base + " --out " + (dir / "m1.adapter").string() + " --report " +
                (dir / "r1.json").string())
                .exit_code == 0);
    REQUIRE(run("merge" + base + " --baseline output-mask --out " + (dir / "m2.adapter").string() +
                " --report " + (dir / "r2.json").string())
                .exit_code == 0);

    const json rank_report = json::parse(file_text(dir / "r1.json"));
    const json out_report = json::parse(file_text(dir / "r2.json"));
    const long long rank_params = rank_report.at("aggregate").at("trainable_parameters").get<long long>();
    const long long out_params = out_report.at("aggregate").at("trainable_parameters").get<long long>();
    CHECK(rank_params == 2 * (4 + 4));
    CHECK(out_params == 2 * 2 * 32); // factor sum(d_out) / sum(r) = 8
    CHECK(out_params * (4 + 4) == rank_params * 2 * 32);
}

TEST_CASE("verify-theorem writes a report and prints the holds fraction") {
    const fs::path dir = temp_dir();
    const fs::path report_path = dir / "theorem.json";
    const RunResult result = run(
        "verify-theorem --trials 20 --dims 8x8 --rank 4 --active-outputs 4 --seed 2 --report " +
        report_path.string());
    CHECK(result.exit_code == 0);
    CHECK(result.output.find("of instances") != std::string::npos);

    const json report = json::parse(file_text(report_path));
    CHECK(report.at("aggregate").at("trials") == 20);
    CHECK(report.at("instances").size() == 20);

    // Pretty-printer consumes it.
    const RunResult pretty = run("report --in " + report_path.string());
    CHECK(pretty.exit_code == 0);
    CHECK(pretty.output.find("e_rank") != std::string::npos);
    CHECK(pretty.output.find("holds fraction") != std::string::npos);
}

TEST_CASE("verify-theorem --exhaustive records the method") {
    const fs::path dir = temp_dir();
    const fs::path report_path = dir / "theorem_exhaustive.json";
    const RunResult result = run(
        "verify-theorem --trials 5 --dims 6x6 --rank 3 --active-outputs 4 --exhaustive --report " +
        report_path.string());
    CHECK(result.exit_code == 0);
    const json report = json::parse(file_text(report_path));
    for (const json& instance : report.at("instances")) {
        CHECK(instance.at("method") == "exhaustive");
    }
}

TEST_CASE("verify-theorem rejects impossible active-outputs") {
    const RunResult result = run(
        "verify-theorem --trials 5 --dims 6x6 --rank 3 --active-outputs 7 --report /tmp/never.json");
    CHECK(result.exit_code == 2);
}

TEST_CASE("analyze a fresh adapter shows full-rank histograms") {
    const fs::path dir = temp_dir();
    const fs::path adapter = dir / "fresh.adapter";
    REQUIRE(run("gen --layers 5 --dims 16x16 --rank 6 --seed 8 --out " + adapter.string())
                .exit_code == 0);
    write_names_manifest(dir / "manifest.json", {"unused.layer"});

    const fs::path report_path = dir / "analysis.json";
    const RunResult result = run("analyze --adapter " + adapter.string() + " --manifest " +
                                 (dir / "manifest.json").string() + " --threshold 0.05 --report " +
                                 report_path.string());
    CHECK(result.exit_code == 0);

    const json analysis = json::parse(file_text(report_path));
    for (const auto& [name, layer] : analysis.at("layers").items()) {
        CHECK(layer.at("rank_content") == 6);
        CHECK(layer.at("rank_style") == 6);
    }
}

TEST_CASE("analyze rejects a threshold of 1 or more") {
    const fs::path dir = temp_dir();
    const fs::path adapter = dir / "t.adapter";
    REQUIRE(run("gen --layers 1 --dims 8x8 --rank 2 --seed 9 --out " + adapter.string())
                .exit_code == 0);
    write_names_manifest(dir / "manifest.json", {"x"});
    const RunResult result = run("analyze --adapter " + adapter.string() + " --manifest " +
                                 (dir / "manifest.json").string() + " --threshold 1.0");
    CHECK(result.exit_code == 2);
}

TEST_CASE("init-masks with default thresholds reports all-ones content masks") {
    const fs::path dir = temp_dir();
    write_names_manifest(dir / "manifest.json",
                         {"unet.up_blocks.2.attn.0", "unet.mid_block.attn.1",
                          "unet.down_blocks.1.attn.2", "other.layer"});
    const fs::path out_path = dir / "init.json";
    const RunResult result = run("init-masks --manifest " + (dir / "manifest.json").string() +
                                 " --rank 64 --t-content 0.1 --t-style 0.0 --seed 12 --out " +
                                 out_path.string());
    CHECK(result.exit_code == 0);

    const json init = json::parse(file_text(out_path));
    const json& layers = init.at("layers");
    CHECK(layers.at("unet.up_blocks.2.attn.0").at("class") == "content-dominant");
    CHECK(layers.at("unet.up_blocks.2.attn.0").at("ones_content") == 64);
    CHECK(layers.at("unet.mid_block.attn.1").at("ones_content") == 64);
    CHECK(layers.at("other.layer").at("class") == "neutral");
    CHECK(layers.at("other.layer").at("ones_style") == 64);
    // Style-dominant layer: the style mask is the dominant (all-ones) one.
    CHECK(layers.at("unet.down_blocks.1.attn.2").at("ones_style") == 64);
}

TEST_CASE("gen accepts a spectrum and the file round-trips through analyze") {
    const fs::path dir = temp_dir();
    const RunResult result = run("gen --layers 1 --dims 8x8 --rank 4 --seed 13 --spectrum 4,3,2,1 --out " +
                                 (dir / "spec.adapter").string());
    CHECK(result.exit_code == 0);
    const rankmerge::AdapterSet set = rankmerge::read_adapter(dir / "spec.adapter");
    CHECK(set.layers.begin()->second.rank() == 4);
}

TEST_CASE("report rejects unknown layouts") {
    const fs::path dir = temp_dir();
    std::ofstream(dir / "junk.json") << "{\"hello\":1}\n";
    const RunResult result = run("report --in " + (dir / "junk.json").string());
    CHECK(result.exit_code == 2);
}

TEST_CASE("missing input file maps to the I/O exit code") {
    const RunResult result = run("report --in /nonexistent/path.json");
    CHECK(result.exit_code == 4);
}
