#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>

#include <json.hpp>

#include "rankmerge/adapter_io.hpp"
#include "rankmerge/layer_prior.hpp"
#include "rankmerge/lora.hpp"
#include "rankmerge/types.hpp"

namespace rankmerge {

enum class BaselineMode { RankMask, OutputMask };

std::string baseline_mode_name(BaselineMode mode);
BaselineMode parse_baseline_mode(std::string_view s);

struct MergeConfig {
    double lambda_layer_prior = 0.1;
    double learning_rate = 0.01;
    int steps = 100;
    std::uint64_t seed = 0;
    int probe_count = 256;
    double binarize_threshold = 0.05;
    Thresholds thresholds{}; // merger initialization (t_content / t_style)
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_epsilon = 1e-8;
    BaselineMode baseline_mode = BaselineMode::RankMask;
    double similarity_coefficient = 0.01; // output-mask baseline only

    void validate() const;
    static MergeConfig from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
};

// Fixed random probe inputs standing in for layer activations; the alignment
// loss matches the merged layer's response to each adapter's own response on
// that adapter's probes.
struct ProbeSet {
    Matrix x_content; // d_in x probe_count
    Matrix x_style;   // d_in x probe_count
};

ProbeSet make_probes(Index d_in, int probe_count, std::uint64_t seed,
                     std::string_view layer_name);

// ||(merged - content delta) X_c||_F^2 / n + ||(merged - style delta) X_s||_F^2 / n
double alignment_loss(const LoraLayer& content, const LoraLayer& style, const MaskPair& masks,
                      const ProbeSet& probes);

// alignment + lambda * layer_prior_loss(m_c, m_s, 1, cls); the unit hinge
// coefficient balances the hinge against the L1 term so the sparsity pull
// stops at the norm-constraint boundary.
double total_loss(const LoraLayer& content, const LoraLayer& style, const MaskPair& masks,
                  const ProbeSet& probes, double lambda, LayerClass cls);

// Analytic gradient of total_loss w.r.t. (content mask, style mask). The
// merged delta is linear in each mask entry, so the quadratic alignment term
// has a closed-form gradient; the prior contributes its subgradient.
std::pair<Vector, Vector> total_gradient(const LoraLayer& content, const LoraLayer& style,
                                         const MaskPair& masks, const ProbeSet& probes,
                                         double lambda, LayerClass cls);

struct LayerTrainReport {
    LayerClass cls = LayerClass::Neutral;
    bool copied = false;
    double initial_loss = 0.0;
    double final_loss = 0.0;
    double alignment = 0.0;
    double prior = 0.0;
    Index rank_content = 0;
    Index rank_style = 0;
    int steps_run = 0;
};

struct MergeReport {
    BaselineMode mode = BaselineMode::RankMask;
    std::map<std::string, LayerTrainReport> layers;
    long long trainable_parameters = 0;
    int trained_layers = 0;
    int copied_layers = 0;
    RankHistograms histograms;
    // Informational only; kept out of the serialized report so report files
    // are deterministic.
    double wall_seconds = 0.0;

    nlohmann::json to_json() const;
};

// Gradient descent (first-order moments per the config) on the rank-dimension
// mask pair, with per-step clamping to [0,1] and backtracking: a step that
// would increase the total loss is retried at half size up to 10 times, else
// skipped, so the final loss never exceeds the initial one.
std::pair<MaskPair, LayerTrainReport> train_masks(const LoraLayer& content,
                                                  const LoraLayer& style, LayerClass cls,
                                                  const MergeConfig& config);

// Output-dimension baseline: one mask of length d_out per adapter, alignment
// plus a cosine overlap penalty between the two masks, no layer prior.
std::pair<MaskPair, LayerTrainReport> train_output_masks(const LoraLayer& content,
                                                         const LoraLayer& style, LayerClass cls,
                                                         const MergeConfig& config);

// coefficient * |cos(u, v)|; zero when either mask is numerically null.
double output_overlap_penalty(const Vector& u, const Vector& v, double coefficient);

struct MergeResult {
    AdapterSet merged;
    MergeReport report;
};

// Trains every layer present in both sets (classified through the manifest),
// copies one-sided layers through unchanged, and materializes merged layers
// by folding the trained masks into the A factors. Layer work may run on
// `jobs` threads; results are identical for any job count.
MergeResult merge_adapters(const AdapterSet& content, const AdapterSet& style,
                           const LayerManifest& manifest, const MergeConfig& config,
                           int jobs = 1);

// Arithmetic combination of already-merged adapters; alphas default to 1/n.
AdapterSet multi_concept_merge(const std::vector<AdapterSet>& merged_sets,
                               std::vector<double> alphas = {});

// Folding helpers (also used to annotate merged files for later analysis).
LoraLayer fold_rank_masks(const LoraLayer& content, const LoraLayer& style,
                          const MaskPair& masks);
LoraLayer fold_output_masks(const LoraLayer& content, const LoraLayer& style,
                            const MaskPair& masks);

// Mask annotations carried in adapter metadata ("mask_content:<layer>" /
// "mask_style:<layer>", comma-separated decimals).
void embed_mask_metadata(AdapterSet& set, const std::string& layer_name, const MaskPair& masks);
std::map<std::string, MaskPair> extract_mask_metadata(const AdapterSet& set);

} // namespace rankmerge
