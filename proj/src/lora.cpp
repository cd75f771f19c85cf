#include "rankmerge/lora.hpp"

#include <cmath>
#include <sstream>

#include "rankmerge/errors.hpp"
#include "rankmerge/linalg.hpp"

namespace rankmerge {

namespace {

void validate_layer(const LoraLayer& layer) {
    if (layer.a.rows() < 1 || layer.a.cols() < 1 || layer.b.rows() < 1 || layer.b.cols() < 1) {
        throw ValidationError("layer '" + layer.name + "': empty factor matrix");
    }
    if (layer.a.cols() != layer.b.rows()) {
        throw ValidationError("layer '" + layer.name + "': a has " +
                              std::to_string(layer.a.cols()) + " columns but b has " +
                              std::to_string(layer.b.rows()) + " rows");
    }
    require_finite(layer.a, "layer '" + layer.name + "' factor a");
    require_finite(layer.b, "layer '" + layer.name + "' factor b");
    if (!(layer.alpha > 0.0) || !std::isfinite(layer.alpha)) {
        throw ValidationError("layer '" + layer.name + "': alpha must be a positive real");
    }
}

void check_mask_range(const MaskVector& m, const std::string& what) {
    if (!m.allFinite()) throw ValidationError(what + ": non-finite mask entry");
    if ((m.array() < 0.0).any() || (m.array() > 1.0).any()) {
        throw ValidationError(what + ": mask entries must lie in [0, 1]");
    }
}

} // namespace

LoraLayer::LoraLayer(std::string layer_name, Matrix a_factor, Matrix b_factor)
    : name(std::move(layer_name)), a(std::move(a_factor)), b(std::move(b_factor)), alpha(0.0) {
    alpha = static_cast<double>(rank());
    validate_layer(*this);
}

LoraLayer::LoraLayer(std::string layer_name, Matrix a_factor, Matrix b_factor, double alpha_value)
    : name(std::move(layer_name)), a(std::move(a_factor)), b(std::move(b_factor)),
      alpha(alpha_value) {
    validate_layer(*this);
}

void AdapterSet::add(LoraLayer layer) {
    if (layers.count(layer.name)) {
        throw ValidationError("duplicate layer name '" + layer.name + "'");
    }
    layers.emplace(layer.name, std::move(layer));
}

Matrix delta_weight(const LoraLayer& layer) {
    validate_layer(layer);
    return layer.scale() * (layer.a * layer.b);
}

Matrix apply_rank_mask(const LoraLayer& layer, const MaskVector& m) {
    validate_layer(layer);
    if (m.size() != layer.rank()) {
        throw ValidationError("apply_rank_mask: mask length " + std::to_string(m.size()) +
                              " != rank " + std::to_string(layer.rank()) + " of layer '" +
                              layer.name + "'");
    }
    check_mask_range(m, "apply_rank_mask");
    return layer.scale() * (layer.a * (m.asDiagonal() * layer.b));
}

Matrix apply_output_mask(const LoraLayer& layer, const Vector& m_out) {
    validate_layer(layer);
    if (m_out.size() != layer.d_out()) {
        throw ValidationError("apply_output_mask: mask length " + std::to_string(m_out.size()) +
                              " != d_out " + std::to_string(layer.d_out()) + " of layer '" +
                              layer.name + "'");
    }
    for (Index i = 0; i < m_out.size(); ++i) {
        if (m_out[i] != 0.0 && m_out[i] != 1.0) {
            throw ValidationError("apply_output_mask: entry " + std::to_string(i) +
                                  " is not binary");
        }
    }
    return m_out.asDiagonal() * delta_weight(layer);
}

Matrix merged_delta(const LoraLayer& content, const LoraLayer& style, const MaskPair& masks) {
    if (content.d_out() != style.d_out() || content.d_in() != style.d_in()) {
        throw ValidationError("merged_delta: shape mismatch between layers '" + content.name +
                              "' (" + std::to_string(content.d_out()) + "x" +
                              std::to_string(content.d_in()) + ") and '" + style.name + "' (" +
                              std::to_string(style.d_out()) + "x" + std::to_string(style.d_in()) +
                              ")");
    }
    return apply_rank_mask(content, masks.content) + apply_rank_mask(style, masks.style);
}

AdapterSet naive_merge(const std::vector<AdapterSet>& adapters, const std::vector<double>& weights) {
    if (adapters.empty()) throw ValidationError("naive_merge: no adapters given");
    if (weights.size() != adapters.size()) {
        throw ValidationError("naive_merge: " + std::to_string(weights.size()) +
                              " weights for " + std::to_string(adapters.size()) + " adapters");
    }

    // All sets must share the same layer inventory.
    for (size_t i = 1; i < adapters.size(); ++i) {
        std::ostringstream missing, extra;
        for (const auto& [name, layer] : adapters[0].layers) {
            if (!adapters[i].layers.count(name)) missing << " " << name;
        }
        for (const auto& [name, layer] : adapters[i].layers) {
            if (!adapters[0].layers.count(name)) extra << " " << name;
        }
        if (!missing.str().empty() || !extra.str().empty()) {
            throw ValidationError("naive_merge: adapter " + std::to_string(i) +
                                  " inventory mismatch; missing:" +
                                  (missing.str().empty() ? " none" : missing.str()) +
                                  "; unexpected:" + (extra.str().empty() ? " none" : extra.str()));
        }
    }

    AdapterSet merged;
    merged.role = AdapterRole::Merged;
    for (const auto& [name, first] : adapters[0].layers) {
        const Index d_out = first.d_out();
        const Index d_in = first.d_in();
        Index total_rank = 0;
        for (const auto& set : adapters) {
            const LoraLayer& l = set.layers.at(name);
            if (l.d_out() != d_out || l.d_in() != d_in) {
                throw ValidationError("naive_merge: layer '" + name +
                                      "' has inconsistent dimensions across adapters");
            }
            total_rank += l.rank();
        }

        Matrix a(d_out, total_rank);
        Matrix b(total_rank, d_in);
        Index offset = 0;
        for (size_t i = 0; i < adapters.size(); ++i) {
            const LoraLayer& l = adapters[i].layers.at(name);
            // Fold the blending weight and the source alpha/rank scaling into
            // the copied A columns; the merged layer uses scale factor 1.
            a.middleCols(offset, l.rank()) = (weights[i] * l.scale()) * l.a;
            b.middleRows(offset, l.rank()) = l.b;
            offset += l.rank();
        }
        merged.add(LoraLayer(name, std::move(a), std::move(b), static_cast<double>(total_rank)));
    }
    return merged;
}

MaskVector binarize(const MaskVector& m, double threshold) {
    if (!(threshold >= 0.0 && threshold < 1.0)) {
        throw ValidationError("binarize: threshold must lie in [0, 1)");
    }
    return (m.array() > threshold).cast<double>();
}

Index mask_rank(const MaskVector& m, double threshold) {
    return static_cast<Index>(binarize(m, threshold).sum());
}

std::string role_name(AdapterRole role) {
    switch (role) {
        case AdapterRole::Content: return "content";
        case AdapterRole::Style: return "style";
        case AdapterRole::Merged: return "merged";
    }
    return "content";
}

AdapterRole parse_role(std::string_view s) {
    if (s == "content") return AdapterRole::Content;
    if (s == "style") return AdapterRole::Style;
    if (s == "merged") return AdapterRole::Merged;
    throw ValidationError("unknown adapter role '" + std::string(s) + "'");
}

} // namespace rankmerge
