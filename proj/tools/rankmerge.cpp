// Command-line surface for rank-dimension LoRA merging: train and materialize
// merged adapters, reproduce the rank-vs-output masking error comparison, and
// inspect the resulting mask ranks.

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "rankmerge/adapter_io.hpp"
#include "rankmerge/errors.hpp"
#include "rankmerge/layer_prior.hpp"
#include "rankmerge/linalg.hpp"
#include "rankmerge/lora.hpp"
#include "rankmerge/masking_theory.hpp"
#include "rankmerge/merge_optimizer.hpp"
#include "rankmerge/rng.hpp"

namespace {

using nlohmann::json;
using namespace rankmerge;

constexpr int kExitValidation = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitIo = 4;

std::optional<std::uint64_t> env_seed() {
    const char* value = std::getenv("RANKMERGE_SEED");
    if (value == nullptr || *value == '\0') return std::nullopt;
    try {
        return std::stoull(value);
    } catch (const std::exception&) {
        throw ValidationError("RANKMERGE_SEED is not an unsigned integer: '" +
                              std::string(value) + "'");
    }
}

std::pair<Index, Index> parse_dims(const std::string& dims) {
    const auto x = dims.find('x');
    if (x == std::string::npos || x == 0 || x + 1 >= dims.size()) {
        throw ValidationError("--dims must look like <d_out>x<d_in>, got '" + dims + "'");
    }
    try {
        const Index d_out = std::stoll(dims.substr(0, x));
        const Index d_in = std::stoll(dims.substr(x + 1));
        if (d_out < 1 || d_in < 1) throw std::invalid_argument("non-positive");
        return {d_out, d_in};
    } catch (const std::exception&) {
        throw ValidationError("--dims must be two positive integers, got '" + dims + "'");
    }
}

std::vector<double> parse_spectrum(const std::string& text) {
    std::vector<double> values;
    std::stringstream in(text);
    std::string token;
    while (std::getline(in, token, ',')) {
        values.push_back(parse_double(token, "--spectrum"));
    }
    if (values.empty()) throw ValidationError("--spectrum must list at least one value");
    return values;
}

json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path + "'");
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw IoError("read failure on '" + path + "'");
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        throw ValidationError(path + ": malformed JSON: " + std::string(e.what()));
    }
}

void write_json_file(const json& doc, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << doc.dump(2) << "\n";
    if (!out) throw IoError("write failure on '" + path + "'");
}

// ---------------------------------------------------------------------------
// merge

struct MergeArgs {
    std::string content_path, style_path, manifest_path, config_path, out_path;
    std::string baseline;
    std::string report_path;
    std::uint64_t seed = 0;
    bool seed_given = false;
    int jobs = 1;
};

int run_merge(const MergeArgs& args) {
    const json config_json = read_json_file(args.config_path);
    MergeConfig config = MergeConfig::from_json(config_json);
    if (args.seed_given) {
        config.seed = args.seed;
    } else if (!config_json.contains("seed")) {
        if (const auto seed = env_seed()) config.seed = *seed;
    }
    if (!args.baseline.empty()) config.baseline_mode = parse_baseline_mode(args.baseline);

    const AdapterSet content = read_adapter(args.content_path);
    const AdapterSet style = read_adapter(args.style_path);
    const LayerManifest manifest = read_manifest(args.manifest_path);

    const MergeResult result = merge_adapters(content, style, manifest, config, args.jobs);
    write_adapter(result.merged, args.out_path);
    if (!args.report_path.empty()) write_json_file(result.report.to_json(), args.report_path);

    for (const auto& [name, layer] : result.report.layers) {
        if (layer.copied) {
            std::printf("%-48s %-17s copied\n", name.c_str(),
                        layer_class_name(layer.cls).c_str());
        } else {
            std::printf("%-48s %-17s loss %.6g -> %.6g  rank(m_c)=%lld rank(m_s)=%lld\n",
                        name.c_str(), layer_class_name(layer.cls).c_str(), layer.initial_loss,
                        layer.final_loss, static_cast<long long>(layer.rank_content),
                        static_cast<long long>(layer.rank_style));
        }
    }
    std::printf("merged %d layer(s) (%d copied), %lld trainable mask parameters, %.2f s\n",
                result.report.trained_layers, result.report.copied_layers,
                result.report.trainable_parameters, result.report.wall_seconds);
    std::printf("wrote %s\n", args.out_path.c_str());
    if (!args.report_path.empty()) std::printf("report %s\n", args.report_path.c_str());
    return 0;
}

// ---------------------------------------------------------------------------
// verify-theorem

struct VerifyArgs {
    int trials = 100;
    std::string dims;
    Index rank = 0;
    Index active_outputs = -1;
    std::uint64_t seed = 0;
    bool exhaustive = false;
    std::string ensemble = "gaussian";
    double decay = 0.7;
    std::string report_path;
};

int run_verify(const VerifyArgs& args) {
    TheoremBatchConfig config;
    config.trials = args.trials;
    std::tie(config.d_out, config.d_in) = parse_dims(args.dims);
    config.r = args.rank;
    config.d_s = args.active_outputs;
    config.seed = args.seed;
    config.method = args.exhaustive ? MaskSearch::Exhaustive : MaskSearch::Auto;
    if (args.ensemble == "gaussian") {
        config.ensemble = SpectrumKind::Gaussian;
    } else if (args.ensemble == "geometric") {
        config.ensemble = SpectrumKind::Geometric;
    } else {
        throw ValidationError("--ensemble must be gaussian or geometric");
    }
    config.decay = args.decay;

    const TheoremBatchReport report = run_theorem_batch(config);
    write_json_file(report.to_json(), args.report_path);

    std::printf("trials: %d  equal-budget s: %lld  search: %s\n", config.trials,
                static_cast<long long>(report.instances.front().check.budget.s),
                mask_search_name(report.instances.front().check.method));
    std::printf("rank-mask error <= output-mask error in %.1f%% of instances\n",
                100.0 * report.holds_fraction);
    std::printf("output-mask error >= lower bound in %.1f%% of instances\n",
                100.0 * report.bound_fraction);
    if (!report.counterexamples.empty()) {
        std::printf("%zu counterexample(s) recorded in the report\n",
                    report.counterexamples.size());
    }
    std::printf("report %s\n", args.report_path.c_str());
    return 0;
}

// ---------------------------------------------------------------------------
// analyze

struct AnalyzeArgs {
    std::string adapter_path, manifest_path;
    double threshold = 0.05;
    std::string report_path;
};

int run_analyze(const AnalyzeArgs& args) {
    if (!(args.threshold >= 0.0 && args.threshold < 1.0)) {
        throw ValidationError("--threshold must lie in [0, 1)");
    }
    const AdapterSet set = read_adapter(args.adapter_path);
    const LayerManifest manifest = read_manifest(args.manifest_path);

    std::map<std::string, MaskPair> masks = extract_mask_metadata(set);
    // Layers without mask annotations (e.g. plain arithmetic merges) count as
    // fully active.
    for (const auto& [name, layer] : set.layers) {
        if (!masks.count(name)) {
            MaskPair full;
            full.content = Vector::Ones(layer.rank());
            full.style = Vector::Ones(layer.rank());
            masks[name] = std::move(full);
        }
    }
    std::map<std::string, LayerClass> classes;
    for (const auto& [name, pair] : masks) classes[name] = manifest.classify(name);

    const RankHistograms histograms = rank_histogram(masks, classes, args.threshold);

    json layers_json = json::object();
    std::printf("%-48s %-17s %10s %10s\n", "layer", "class", "rank(m_c)", "rank(m_s)");
    for (const auto& [name, pair] : masks) {
        const Index rank_c = mask_rank(pair.content, args.threshold);
        const Index rank_s = mask_rank(pair.style, args.threshold);
        std::printf("%-48s %-17s %10lld %10lld\n", name.c_str(),
                    layer_class_name(classes.at(name)).c_str(), static_cast<long long>(rank_c),
                    static_cast<long long>(rank_s));
        layers_json[name] = {
            {"class", layer_class_name(classes.at(name))},
            {"rank_content", rank_c},
            {"rank_style", rank_s},
        };
    }

    const auto print_histogram = [](const char* title, const std::map<Index, int>& histogram) {
        std::printf("%s:", title);
        for (const auto& [rank, count] : histogram) {
            std::printf(" %lld:%d", static_cast<long long>(rank), count);
        }
        std::printf("\n");
    };
    print_histogram("content-dominant rank(m_c)", histograms.content_dominant_content_mask);
    print_histogram("content-dominant rank(m_s)", histograms.content_dominant_style_mask);
    print_histogram("style-dominant rank(m_c)", histograms.style_dominant_content_mask);
    print_histogram("style-dominant rank(m_s)", histograms.style_dominant_style_mask);

    if (!args.report_path.empty()) {
        const auto histogram_json = [](const std::map<Index, int>& histogram) {
            json j = json::object();
            for (const auto& [rank, count] : histogram) j[std::to_string(rank)] = count;
            return j;
        };
        write_json_file(
            json{
                {"format_version", "1"},
                {"threshold", args.threshold},
                {"layers", std::move(layers_json)},
                {"rank_histograms",
                 {
                     {"content_dominant",
                      {{"content_mask", histogram_json(histograms.content_dominant_content_mask)},
                       {"style_mask", histogram_json(histograms.content_dominant_style_mask)}}},
                     {"style_dominant",
                      {{"content_mask", histogram_json(histograms.style_dominant_content_mask)},
                       {"style_mask", histogram_json(histograms.style_dominant_style_mask)}}},
                 }},
            },
            args.report_path);
        std::printf("report %s\n", args.report_path.c_str());
    }
    return 0;
}

// ---------------------------------------------------------------------------
// init-masks

struct InitMasksArgs {
    std::string manifest_path;
    Index rank = 0;
    double t_content = 0.1;
    double t_style = 0.0;
    std::uint64_t seed = 0;
    std::string out_path;
};

int run_init_masks(const InitMasksArgs& args) {
    const LayerManifest manifest = read_manifest(args.manifest_path);
    Thresholds thresholds;
    thresholds.t_content = args.t_content;
    thresholds.t_style = args.t_style;
    thresholds.validate();

    json layers_json = json::object();
    std::printf("%-48s %-17s %8s %8s\n", "layer", "class", "ones(m_c)", "ones(m_s)");
    for (const ManifestEntry& entry : manifest.entries) {
        const LayerClass cls = manifest.classify(entry.name);
        const MaskPair masks =
            init_masks(cls, args.rank, thresholds, derive_seed(args.seed, entry.name));
        const Index ones_c = mask_rank(masks.content, 0.0);
        const Index ones_s = mask_rank(masks.style, 0.0);
        std::printf("%-48s %-17s %8lld %8lld\n", entry.name.c_str(),
                    layer_class_name(cls).c_str(), static_cast<long long>(ones_c),
                    static_cast<long long>(ones_s));
        json content = json::array();
        json style = json::array();
        for (Index i = 0; i < masks.content.size(); ++i) content.push_back(masks.content[i]);
        for (Index i = 0; i < masks.style.size(); ++i) style.push_back(masks.style[i]);
        layers_json[entry.name] = {
            {"class", layer_class_name(cls)},
            {"content_mask", std::move(content)},
            {"style_mask", std::move(style)},
            {"ones_content", ones_c},
            {"ones_style", ones_s},
        };
    }

    if (!args.out_path.empty()) {
        write_json_file(
            json{
                {"format_version", "1"},
                {"rank", args.rank},
                {"seed", args.seed},
                {"t_content", args.t_content},
                {"t_style", args.t_style},
                {"layers", std::move(layers_json)},
            },
            args.out_path);
        std::printf("wrote %s\n", args.out_path.c_str());
    }
    return 0;
}

// ---------------------------------------------------------------------------
// gen

struct GenArgs {
    int layers = 1;
    std::string dims;
    Index rank = 0;
    std::uint64_t seed = 0;
    std::string out_path;
    std::string spectrum;
    std::string role = "content";
};

int run_gen(const GenArgs& args) {
    SyntheticSpec spec;
    spec.layers = args.layers;
    std::tie(spec.d_out, spec.d_in) = parse_dims(args.dims);
    spec.rank = args.rank;
    if (!args.spectrum.empty()) spec.spectrum = parse_spectrum(args.spectrum);
    spec.role = parse_role(args.role);

    const AdapterSet set = generate_synthetic(spec, args.seed);
    write_adapter(set, args.out_path);
    std::printf("wrote %zu layer(s) of %lldx%lld rank %lld to %s\n", set.layers.size(),
                static_cast<long long>(spec.d_out), static_cast<long long>(spec.d_in),
                static_cast<long long>(spec.rank), args.out_path.c_str());
    return 0;
}

// ---------------------------------------------------------------------------
// report

int run_report(const std::string& in_path) {
    const json doc = read_json_file(in_path);
    if (!doc.is_object()) throw ValidationError(in_path + ": report must be a JSON object");

    if (doc.contains("instances")) {
        // Masking-theory verification report.
        std::printf("%6s %12s %12s %12s %6s %6s\n", "index", "e_rank", "e_out", "bound", "s",
                    "holds");
        for (const json& inst : doc.at("instances")) {
            std::printf("%6d %12.6g %12.6g %12.6g %6lld %6s\n", inst.at("index").get<int>(),
                        inst.at("e_rank").get<double>(), inst.at("e_out").get<double>(),
                        inst.at("e_out_lower_bound").get<double>(),
                        inst.at("s").get<long long>(),
                        inst.at("holds").get<bool>() ? "yes" : "NO");
        }
        const json& aggregate = doc.at("aggregate");
        std::printf("holds fraction: %.4f over %d trial(s)\n",
                    aggregate.at("holds_fraction").get<double>(),
                    aggregate.at("trials").get<int>());
        return 0;
    }
    if (doc.contains("layers") && doc.contains("aggregate")) {
        // Merge report.
        std::printf("%-48s %-17s %12s %12s %10s %10s\n", "layer", "class", "initial", "final",
                    "rank(m_c)", "rank(m_s)");
        for (const auto& [name, layer] : doc.at("layers").items()) {
            if (layer.value("copied", false)) {
                std::printf("%-48s %-17s %12s\n", name.c_str(),
                            layer.at("class").get<std::string>().c_str(), "copied");
            } else {
                std::printf("%-48s %-17s %12.6g %12.6g %10lld %10lld\n", name.c_str(),
                            layer.at("class").get<std::string>().c_str(),
                            layer.at("initial_loss").get<double>(),
                            layer.at("final_loss").get<double>(),
                            layer.at("rank_content").get<long long>(),
                            layer.at("rank_style").get<long long>());
            }
        }
        const json& aggregate = doc.at("aggregate");
        std::printf("trainable mask parameters: %lld (%d trained, %d copied)\n",
                    aggregate.at("trainable_parameters").get<long long>(),
                    aggregate.at("trained_layers").get<int>(),
                    aggregate.at("copied_layers").get<int>());
        return 0;
    }
    if (doc.contains("rank_histograms")) {
        // Analysis report.
        std::printf("threshold: %g\n", doc.at("threshold").get<double>());
        for (const auto& [name, layer] : doc.at("layers").items()) {
            std::printf("%-48s %-17s %10lld %10lld\n", name.c_str(),
                        layer.at("class").get<std::string>().c_str(),
                        layer.at("rank_content").get<long long>(),
                        layer.at("rank_style").get<long long>());
        }
        return 0;
    }
    throw ValidationError(in_path + ": unrecognized report layout");
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Rank-dimension LoRA merging and masking-theory verification"};
    app.require_subcommand(1);

    MergeArgs merge_args;
    CLI::App* merge = app.add_subcommand("merge", "Train mask mergers and write a merged adapter");
    merge->add_option("--content", merge_args.content_path, "Content adapter file")->required();
    merge->add_option("--style", merge_args.style_path, "Style adapter file")->required();
    merge->add_option("--manifest", merge_args.manifest_path, "Layer manifest JSON")->required();
    merge->add_option("--config", merge_args.config_path, "Merge config JSON")->required();
    merge->add_option("--out", merge_args.out_path, "Merged adapter output path")->required();
    merge->add_option("--baseline", merge_args.baseline,
                      "Masking mode: rank-mask (default) or output-mask");
    merge->add_option("--report", merge_args.report_path, "Write the merge report JSON here");
    CLI::Option* merge_seed = merge->add_option("--seed", merge_args.seed,
                                                "Seed (overrides config file and RANKMERGE_SEED)");
    merge->add_option("--jobs", merge_args.jobs, "Worker threads for per-layer training")
        ->check(CLI::PositiveNumber);

    VerifyArgs verify_args;
    CLI::App* verify = app.add_subcommand(
        "verify-theorem", "Compare rank-mask and output-mask errors at equal parameter budget");
    verify->add_option("--trials", verify_args.trials, "Number of random instances")
        ->check(CLI::PositiveNumber);
    verify->add_option("--dims", verify_args.dims, "Matrix dimensions <d_out>x<d_in>")->required();
    verify->add_option("--rank", verify_args.rank, "Base rank r")->required();
    verify->add_option("--active-outputs", verify_args.active_outputs,
                       "Active output units d_s")
        ->required();
    CLI::Option* verify_seed = verify->add_option("--seed", verify_args.seed, "Base seed");
    verify->add_flag("--exhaustive", verify_args.exhaustive,
                     "Force the exhaustive output-mask search");
    verify->add_option("--ensemble", verify_args.ensemble,
                       "Random-matrix ensemble: gaussian (default) or geometric");
    verify->add_option("--decay", verify_args.decay, "Geometric spectrum decay factor");
    verify->add_option("--report", verify_args.report_path, "Report JSON output path")->required();

    AnalyzeArgs analyze_args;
    CLI::App* analyze =
        app.add_subcommand("analyze", "Rank histograms of a merged adapter's masks");
    analyze->add_option("--adapter", analyze_args.adapter_path, "Merged adapter file")->required();
    analyze->add_option("--manifest", analyze_args.manifest_path, "Layer manifest JSON")
        ->required();
    analyze->add_option("--threshold", analyze_args.threshold,
                        "Binarization threshold in [0, 1)");
    analyze->add_option("--report", analyze_args.report_path, "Write analysis JSON here");

    InitMasksArgs init_args;
    CLI::App* init = app.add_subcommand("init-masks", "Preview prior-informed mask initialization");
    init->add_option("--manifest", init_args.manifest_path, "Layer manifest JSON")->required();
    init->add_option("--rank", init_args.rank, "Mask length")->required()
        ->check(CLI::PositiveNumber);
    init->add_option("--t-content", init_args.t_content, "Content threshold");
    init->add_option("--t-style", init_args.t_style, "Style threshold");
    CLI::Option* init_seed = init->add_option("--seed", init_args.seed, "Base seed");
    init->add_option("--out", init_args.out_path, "Write initialized masks JSON here");

    GenArgs gen_args;
    CLI::App* gen = app.add_subcommand("gen", "Generate a synthetic adapter set");
    gen->add_option("--layers", gen_args.layers, "Number of layers")->required()
        ->check(CLI::PositiveNumber);
    gen->add_option("--dims", gen_args.dims, "Layer dimensions <d_out>x<d_in>")->required();
    gen->add_option("--rank", gen_args.rank, "Adapter rank")->required()
        ->check(CLI::PositiveNumber);
    CLI::Option* gen_seed = gen->add_option("--seed", gen_args.seed, "Base seed");
    gen->add_option("--out", gen_args.out_path, "Adapter output path")->required();
    gen->add_option("--spectrum", gen_args.spectrum,
                    "Comma-separated target singular values of a*b");
    gen->add_option("--role", gen_args.role, "Role tag: content, style or merged");

    std::string report_in;
    CLI::App* report = app.add_subcommand("report", "Pretty-print a report JSON file");
    report->add_option("--in", report_in, "Report JSON file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitValidation;
    }

    try {
        merge_args.seed_given = merge_seed->count() > 0;
        const auto apply_env_seed = [](const CLI::Option* option, std::uint64_t& seed) {
            if (option->count() == 0) {
                if (const auto env = env_seed()) seed = *env;
            }
        };
        apply_env_seed(verify_seed, verify_args.seed);
        apply_env_seed(init_seed, init_args.seed);
        apply_env_seed(gen_seed, gen_args.seed);

        if (merge->parsed()) return run_merge(merge_args);
        if (verify->parsed()) return run_verify(verify_args);
        if (analyze->parsed()) return run_analyze(analyze_args);
        if (init->parsed()) return run_init_masks(init_args);
        if (gen->parsed()) return run_gen(gen_args);
        if (report->parsed()) return run_report(report_in);
        return kExitValidation;
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const IoError& e) {
        std::cerr << "I/O error: " << e.what() << "\n";
        return kExitIo;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitValidation;
    }
}
