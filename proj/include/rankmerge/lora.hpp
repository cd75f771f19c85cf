#pragma once

#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "rankmerge/types.hpp"

namespace rankmerge {

// One low-rank adapter layer. The effective weight update is
// (alpha / rank) * a * b, the conventional LoRA scaling.
struct LoraLayer {
    std::string name;
    Matrix a;     // d_out x rank
    Matrix b;     // rank x d_in
    double alpha; // positive scale; defaults to rank (scale factor 1)

    LoraLayer() : alpha(0.0) {}
    LoraLayer(std::string layer_name, Matrix a_factor, Matrix b_factor); // alpha = rank
    LoraLayer(std::string layer_name, Matrix a_factor, Matrix b_factor, double alpha_value);

    Index rank() const { return a.cols(); }
    Index d_out() const { return a.rows(); }
    Index d_in() const { return b.cols(); }
    double scale() const { return alpha / static_cast<double>(rank()); }
};

enum class AdapterRole { Content, Style, Merged };

std::string role_name(AdapterRole role);
AdapterRole parse_role(std::string_view s);

// Named collection of adapter layers, keyed (and ordered) by layer name.
struct AdapterSet {
    std::map<std::string, LoraLayer> layers;
    AdapterRole role = AdapterRole::Content;
    // Extra file metadata carried through read/write unchanged (e.g. the
    // trained mask vectors a merge run attaches for later analysis).
    std::map<std::string, std::string> metadata;

    void add(LoraLayer layer);
    bool empty() const { return layers.empty(); }
};

Matrix delta_weight(const LoraLayer& layer);

// (alpha/rank) * a * diag(m) * b. An all-ones mask reproduces delta_weight.
Matrix apply_rank_mask(const LoraLayer& layer, const MaskVector& m);

// Zeroes the rows of delta_weight where m_out is 0. Entries must be 0 or 1.
Matrix apply_output_mask(const LoraLayer& layer, const Vector& m_out);

// Mask-weighted sum of the two adapters' updates on a shared base layer.
Matrix merged_delta(const LoraLayer& content, const LoraLayer& style, const MaskPair& masks);

// Weighted sum of adapters, represented by stacking: the merged layer's A is
// the horizontal concatenation of the scaled per-adapter A factors and B the
// vertical concatenation of the B factors, so the result remains a valid
// adapter while its delta equals the weighted sum of the inputs' deltas.
AdapterSet naive_merge(const std::vector<AdapterSet>& adapters, const std::vector<double>& weights);

// Strict comparison: entries > threshold map to 1, others to 0.
MaskVector binarize(const MaskVector& m, double threshold);
Index mask_rank(const MaskVector& m, double threshold);

} // namespace rankmerge
