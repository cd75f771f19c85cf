#include "rankmerge/layer_prior.hpp"

#include <cmath>

#include "rankmerge/errors.hpp"
#include "rankmerge/linalg.hpp"
#include "rankmerge/lora.hpp"
#include "rankmerge/rng.hpp"

namespace rankmerge {

namespace {

Vector sign_of(const Vector& v) {
    Vector s(v.size());
    for (Index i = 0; i < v.size(); ++i) s[i] = v[i] > 0.0 ? 1.0 : (v[i] < 0.0 ? -1.0 : 0.0);
    return s;
}

MaskVector threshold_indicator(const Vector& v, double threshold) {
    return (v.array() > threshold).cast<double>();
}

Vector normalized_uniform(Rng& rng, Index rank) {
    Vector v = rng.uniform_vector(rank);
    const double norm = v.norm();
    if (norm > 0.0) v /= norm;
    return v;
}

} // namespace

std::string layer_class_name(LayerClass cls) {
    switch (cls) {
        case LayerClass::ContentDominant: return "content-dominant";
        case LayerClass::StyleDominant: return "style-dominant";
        case LayerClass::Neutral: return "neutral";
    }
    return "neutral";
}

LayerClass parse_layer_class(std::string_view s) {
    if (s == "content" || s == "content-dominant") return LayerClass::ContentDominant;
    if (s == "style" || s == "style-dominant") return LayerClass::StyleDominant;
    if (s == "neutral") return LayerClass::Neutral;
    throw ValidationError("unknown layer class '" + std::string(s) + "'");
}

LayerClass classify_layer(std::string_view name, std::optional<int> resolution,
                          const ResolutionRule& rule) {
    if (name.empty()) throw ValidationError("classify_layer: empty layer name");
    if (resolution.has_value()) {
        return *resolution < rule.content_resolution_threshold ? LayerClass::ContentDominant
                                                               : LayerClass::StyleDominant;
    }
    for (const std::string& pattern : rule.content_patterns) {
        if (name.find(pattern) != std::string_view::npos) return LayerClass::ContentDominant;
    }
    for (const std::string& pattern : rule.style_patterns) {
        if (name.find(pattern) != std::string_view::npos) return LayerClass::StyleDominant;
    }
    return LayerClass::Neutral;
}

void Thresholds::validate() const {
    if (!(t_content >= 0.0 && t_content <= 1.0) || !(t_style >= 0.0 && t_style <= 1.0)) {
        throw ValidationError("thresholds must lie in [0, 1]");
    }
    if (t_style > t_content) {
        throw ValidationError("t_style must not exceed t_content");
    }
}

double layer_prior_loss(const MaskVector& m_c, const MaskVector& m_s, double lambda,
                        LayerClass cls) {
    if (lambda < 0.0) throw ValidationError("layer_prior_loss: lambda must be >= 0");
    if (cls == LayerClass::Neutral) return 0.0;
    // Nuclear norm of a diagonal merger equals the L1 norm of its vector.
    const double nc = l1_norm(m_c);
    const double ns = l1_norm(m_s);
    if (cls == LayerClass::ContentDominant) return nc + lambda * std::max(0.0, ns - nc);
    return ns + lambda * std::max(0.0, nc - ns);
}

std::pair<Vector, Vector> layer_prior_subgradient(const MaskVector& m_c, const MaskVector& m_s,
                                                  double lambda, LayerClass cls) {
    if (lambda < 0.0) throw ValidationError("layer_prior_subgradient: lambda must be >= 0");
    Vector grad_c = Vector::Zero(m_c.size());
    Vector grad_s = Vector::Zero(m_s.size());
    if (cls == LayerClass::Neutral) return {grad_c, grad_s};

    const double nc = l1_norm(m_c);
    const double ns = l1_norm(m_s);
    if (cls == LayerClass::ContentDominant) {
        const bool hinge_active = ns > nc;
        grad_c = (1.0 - (hinge_active ? lambda : 0.0)) * sign_of(m_c);
        if (hinge_active) grad_s = lambda * sign_of(m_s);
    } else {
        const bool hinge_active = nc > ns;
        grad_s = (1.0 - (hinge_active ? lambda : 0.0)) * sign_of(m_s);
        if (hinge_active) grad_c = lambda * sign_of(m_c);
    }
    return {grad_c, grad_s};
}

MaskPair init_masks(LayerClass cls, Index rank, const Thresholds& thresholds,
                    std::uint64_t seed) {
    return init_mask_pair(cls, rank, rank, thresholds, seed);
}

MaskPair init_mask_pair(LayerClass cls, Index rank_content, Index rank_style,
                        const Thresholds& thresholds, std::uint64_t seed) {
    if (rank_content < 1 || rank_style < 1) throw ValidationError("init_masks: rank must be >= 1");
    thresholds.validate();

    MaskPair masks;
    if (cls == LayerClass::Neutral) {
        masks.content = Vector::Ones(rank_content);
        masks.style = Vector::Ones(rank_style);
        return masks;
    }

    Rng rng(seed);
    const double dominant_threshold = thresholds.t_style;
    const double other_threshold = thresholds.t_content;
    if (rank_content == rank_style) {
        const Vector v = normalized_uniform(rng, rank_content);
        if (cls == LayerClass::ContentDominant) {
            masks.content = threshold_indicator(v, dominant_threshold);
            masks.style = threshold_indicator(v, other_threshold);
        } else {
            masks.content = threshold_indicator(v, other_threshold);
            masks.style = threshold_indicator(v, dominant_threshold);
        }
        return masks;
    }

    const Vector v_content = normalized_uniform(rng, rank_content);
    const Vector v_style = normalized_uniform(rng, rank_style);
    if (cls == LayerClass::ContentDominant) {
        masks.content = threshold_indicator(v_content, dominant_threshold);
        masks.style = threshold_indicator(v_style, other_threshold);
    } else {
        masks.content = threshold_indicator(v_content, other_threshold);
        masks.style = threshold_indicator(v_style, dominant_threshold);
    }
    return masks;
}

RankHistograms rank_histogram(const std::map<std::string, MaskPair>& masks,
                              const std::map<std::string, LayerClass>& classes,
                              double threshold) {
    for (const auto& [name, pair] : masks) {
        if (!classes.count(name)) {
            throw ValidationError("rank_histogram: no class for layer '" + name + "'");
        }
    }
    for (const auto& [name, cls] : classes) {
        if (!masks.count(name)) {
            throw ValidationError("rank_histogram: no masks for layer '" + name + "'");
        }
    }

    RankHistograms hist;
    for (const auto& [name, pair] : masks) {
        const LayerClass cls = classes.at(name);
        if (cls == LayerClass::Neutral) continue;
        const Index rank_c = mask_rank(pair.content, threshold);
        const Index rank_s = mask_rank(pair.style, threshold);
        if (cls == LayerClass::ContentDominant) {
            hist.content_dominant_content_mask[rank_c]++;
            hist.content_dominant_style_mask[rank_s]++;
        } else {
            hist.style_dominant_content_mask[rank_c]++;
            hist.style_dominant_style_mask[rank_s]++;
        }
    }
    return hist;
}

} // namespace rankmerge
