#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "rankmerge/types.hpp"

namespace rankmerge {

enum class LayerClass { ContentDominant, StyleDominant, Neutral };

std::string layer_class_name(LayerClass cls);
LayerClass parse_layer_class(std::string_view s);

// Resolution-based classification rule. An explicit resolution strictly below
// content_resolution_threshold marks a layer content-dominant, at or above it
// style-dominant. Without a resolution the name patterns decide; content
// patterns are checked first. Unmatched names are neutral.
struct ResolutionRule {
    int content_resolution_threshold = 32;
    std::vector<std::string> content_patterns = {"up_blocks.2", "down_blocks.2", "mid_block"};
    std::vector<std::string> style_patterns = {"up_blocks.1", "down_blocks.1"};
};

LayerClass classify_layer(std::string_view name, std::optional<int> resolution = {},
                          const ResolutionRule& rule = {});

// Merger initialization thresholds; the dominant concept's merger uses the
// lower threshold (t_style <= t_content) and therefore keeps more components.
struct Thresholds {
    double t_content = 0.1;
    double t_style = 0.0;

    void validate() const;
};

// Content-dominant:  ||m_c||_1 + lambda * max(0, ||m_s||_* - ||m_c||_*)
// Style-dominant:    ||m_s||_1 + lambda * max(0, ||m_c||_* - ||m_s||_*)
// Neutral:           0
// The mergers are diagonal, so each nuclear norm equals the L1 norm of the
// mask vector and no SVD is needed.
double layer_prior_loss(const MaskVector& m_c, const MaskVector& m_s, double lambda,
                        LayerClass cls);

// Subgradient of layer_prior_loss w.r.t. (m_c, m_s), with sign(0) taken as 0
// and the hinge treated as inactive at its kink.
std::pair<Vector, Vector> layer_prior_subgradient(const MaskVector& m_c, const MaskVector& m_s,
                                                  double lambda, LayerClass cls);

// Draws V of i.i.d. uniform(0,1) entries, normalizes it to unit Euclidean
// norm, and thresholds: the dominant concept's mask keeps entries above
// t_style, the other above t_content. Neutral layers get all-ones masks.
MaskPair init_masks(LayerClass cls, Index rank, const Thresholds& thresholds,
                    std::uint64_t seed);

// Unequal-rank variant: with rank_content == rank_style this is exactly
// init_masks with a single shared normalized vector; otherwise each mask is
// thresholded from its own normalized vector drawn in sequence.
MaskPair init_mask_pair(LayerClass cls, Index rank_content, Index rank_style,
                        const Thresholds& thresholds, std::uint64_t seed);

// Binarized-rank frequency tables, one per (dominance class, merger role).
// Neutral layers are not counted.
struct RankHistograms {
    std::map<Index, int> content_dominant_content_mask;
    std::map<Index, int> content_dominant_style_mask;
    std::map<Index, int> style_dominant_content_mask;
    std::map<Index, int> style_dominant_style_mask;
};

RankHistograms rank_histogram(const std::map<std::string, MaskPair>& masks,
                              const std::map<std::string, LayerClass>& classes,
                              double threshold);

} // namespace rankmerge
