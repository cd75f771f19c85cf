#include "rankmerge/merge_optimizer.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <mutex>
#include <sstream>
#include <thread>
#include <vector>

#include "rankmerge/errors.hpp"
#include "rankmerge/linalg.hpp"
#include "rankmerge/rng.hpp"

namespace rankmerge {

namespace {

void check_pair_shapes(const LoraLayer& content, const LoraLayer& style) {
    if (content.d_out() != style.d_out() || content.d_in() != style.d_in()) {
        throw ValidationError("layer '" + content.name + "': content is " +
                              std::to_string(content.d_out()) + "x" +
                              std::to_string(content.d_in()) + " but style ('" + style.name +
                              "') is " + std::to_string(style.d_out()) + "x" +
                              std::to_string(style.d_in()));
    }
}

Vector row_dots(const Matrix& lhs, const Matrix& rhs) {
    return lhs.cwiseProduct(rhs).rowwise().sum();
}

Vector clamp01(Vector v) {
    return v.cwiseMax(0.0).cwiseMin(1.0);
}

void check_mask_sizes(const LoraLayer& content, const LoraLayer& style, const MaskPair& masks) {
    if (masks.content.size() != content.rank() || masks.style.size() != style.rank()) {
        throw ValidationError("layer '" + content.name + "': mask lengths (" +
                              std::to_string(masks.content.size()) + ", " +
                              std::to_string(masks.style.size()) + ") must match ranks (" +
                              std::to_string(content.rank()) + ", " +
                              std::to_string(style.rank()) + ")");
    }
}

void check_probe_shapes(const LoraLayer& content, const ProbeSet& probes) {
    if (probes.x_content.rows() != content.d_in() || probes.x_style.rows() != content.d_in() ||
        probes.x_content.cols() != probes.x_style.cols() || probes.x_content.cols() < 1) {
        throw ValidationError("layer '" + content.name +
                              "': probe matrices must be d_in x probe_count");
    }
}

// Rank-dimension objective with cached probe responses. The merged response
// is linear in the masks, so evaluations reduce to rank-sized products.
class RankMaskObjective {
public:
    RankMaskObjective(const LoraLayer& content, const LoraLayer& style, const ProbeSet& probes,
                      double lambda, LayerClass cls)
        : content_(content),
          style_(style),
          lambda_(lambda),
          cls_(cls),
          inv_n_(1.0 / static_cast<double>(probes.x_content.cols())),
          bc_xc_(content.b * probes.x_content),
          bs_xc_(style.b * probes.x_content),
          bc_xs_(content.b * probes.x_style),
          bs_xs_(style.b * probes.x_style),
          target_c_(content.scale() * (content.a * bc_xc_)),
          target_s_(style.scale() * (style.a * bs_xs_)) {}

    double alignment(const MaskPair& masks) const {
        const Matrix resp_c = respond(masks, bc_xc_, bs_xc_);
        const Matrix resp_s = respond(masks, bc_xs_, bs_xs_);
        return inv_n_ * ((resp_c - target_c_).squaredNorm() + (resp_s - target_s_).squaredNorm());
    }

    // The prior enters as lambda * (L1 + hinge), i.e. layer_prior_loss with a
    // unit hinge coefficient. Equal L1 and hinge weights make the sparsity
    // pull vanish at the norm-constraint boundary instead of punching
    // through it, which is what keeps the dominant mask's rank ahead.
    double prior(const MaskPair& masks) const {
        return lambda_ * layer_prior_loss(masks.content, masks.style, 1.0, cls_);
    }

    double total(const MaskPair& masks) const { return alignment(masks) + prior(masks); }

    std::pair<Vector, Vector> gradient(const MaskPair& masks) const {
        const Matrix residual_c = respond(masks, bc_xc_, bs_xc_) - target_c_;
        const Matrix residual_s = respond(masks, bc_xs_, bs_xs_) - target_s_;

        const double wc = 2.0 * inv_n_ * content_.scale();
        const double ws = 2.0 * inv_n_ * style_.scale();
        Vector grad_c = wc * (row_dots(content_.a.transpose() * residual_c, bc_xc_) +
                              row_dots(content_.a.transpose() * residual_s, bc_xs_));
        Vector grad_s = ws * (row_dots(style_.a.transpose() * residual_c, bs_xc_) +
                              row_dots(style_.a.transpose() * residual_s, bs_xs_));

        auto [prior_c, prior_s] =
            layer_prior_subgradient(masks.content, masks.style, 1.0, cls_);
        grad_c += lambda_ * prior_c;
        grad_s += lambda_ * prior_s;
        return {std::move(grad_c), std::move(grad_s)};
    }

private:
    Matrix respond(const MaskPair& masks, const Matrix& content_resp,
                   const Matrix& style_resp) const {
        return content_.scale() * (content_.a * (masks.content.asDiagonal() * content_resp)) +
               style_.scale() * (style_.a * (masks.style.asDiagonal() * style_resp));
    }

    const LoraLayer& content_;
    const LoraLayer& style_;
    double lambda_;
    LayerClass cls_;
    double inv_n_;
    Matrix bc_xc_, bs_xc_, bc_xs_, bs_xs_;
    Matrix target_c_, target_s_;
};

// Output-dimension baseline objective: row masks over the cached dense probe
// responses plus a cosine overlap penalty between the two masks.
class OutputMaskObjective {
public:
    OutputMaskObjective(const LoraLayer& content, const LoraLayer& style, const ProbeSet& probes,
                        double similarity_coefficient)
        : sim_(similarity_coefficient),
          inv_n_(1.0 / static_cast<double>(probes.x_content.cols())),
          yc_xc_(delta_weight(content) * probes.x_content),
          ys_xc_(delta_weight(style) * probes.x_content),
          yc_xs_(delta_weight(content) * probes.x_style),
          ys_xs_(delta_weight(style) * probes.x_style) {}

    double alignment(const MaskPair& masks) const {
        const Matrix resp_c = respond(masks, yc_xc_, ys_xc_);
        const Matrix resp_s = respond(masks, yc_xs_, ys_xs_);
        return inv_n_ * ((resp_c - yc_xc_).squaredNorm() + (resp_s - ys_xs_).squaredNorm());
    }

    double overlap(const MaskPair& masks) const {
        return output_overlap_penalty(masks.content, masks.style, sim_);
    }

    double total(const MaskPair& masks) const { return alignment(masks) + overlap(masks); }

    std::pair<Vector, Vector> gradient(const MaskPair& masks) const {
        const Matrix residual_c = respond(masks, yc_xc_, ys_xc_) - yc_xc_;
        const Matrix residual_s = respond(masks, yc_xs_, ys_xs_) - ys_xs_;
        const double w = 2.0 * inv_n_;
        Vector grad_u = w * (row_dots(yc_xc_, residual_c) + row_dots(yc_xs_, residual_s));
        Vector grad_v = w * (row_dots(ys_xc_, residual_c) + row_dots(ys_xs_, residual_s));

        const double nu = masks.content.norm();
        const double nv = masks.style.norm();
        if (nu >= 1e-12 && nv >= 1e-12) {
            const Vector u_hat = masks.content / nu;
            const Vector v_hat = masks.style / nv;
            const double cosine = u_hat.dot(v_hat);
            const double sgn = cosine > 0.0 ? 1.0 : (cosine < 0.0 ? -1.0 : 0.0);
            grad_u += (sim_ * sgn / nu) * (v_hat - cosine * u_hat);
            grad_v += (sim_ * sgn / nv) * (u_hat - cosine * v_hat);
        }
        return {std::move(grad_u), std::move(grad_v)};
    }

private:
    Matrix respond(const MaskPair& masks, const Matrix& content_resp,
                   const Matrix& style_resp) const {
        return masks.content.asDiagonal() * content_resp + masks.style.asDiagonal() * style_resp;
    }

    double sim_;
    double inv_n_;
    Matrix yc_xc_, ys_xc_, yc_xs_, ys_xs_;
};

struct DescentOutcome {
    MaskPair masks;
    double initial_loss = 0.0;
    double final_loss = 0.0;
    int steps_run = 0;
};

// First-order updates with momentum/second-moment accumulators, per-step
// clamping to [0,1] and loss-increase backtracking (half the step, up to 10
// retries, else skip), so the loss sequence is non-increasing.
template <typename Objective>
DescentOutcome descend(const Objective& objective, MaskPair masks, const MergeConfig& config,
                       const std::string& layer_name) {
    DescentOutcome outcome;
    double current = objective.total(masks);
    if (std::isnan(current)) {
        throw NumericError("layer '" + layer_name + "': NaN loss at step 0");
    }
    outcome.initial_loss = current;

    Vector m_c = Vector::Zero(masks.content.size());
    Vector v_c = Vector::Zero(masks.content.size());
    Vector m_s = Vector::Zero(masks.style.size());
    Vector v_s = Vector::Zero(masks.style.size());
    const double b1 = config.adam_beta1;
    const double b2 = config.adam_beta2;

    for (int step = 1; step <= config.steps; ++step) {
        const auto [g_c, g_s] = objective.gradient(masks);
        m_c = b1 * m_c + (1.0 - b1) * g_c;
        m_s = b1 * m_s + (1.0 - b1) * g_s;
        v_c = b2 * v_c + (1.0 - b2) * g_c.cwiseProduct(g_c);
        v_s = b2 * v_s + (1.0 - b2) * g_s.cwiseProduct(g_s);
        const double corr1 = 1.0 - std::pow(b1, step);
        const double corr2 = 1.0 - std::pow(b2, step);
        const Vector dir_c = (m_c / corr1).cwiseQuotient(
            ((v_c / corr2).cwiseSqrt().array() + config.adam_epsilon).matrix());
        const Vector dir_s = (m_s / corr1).cwiseQuotient(
            ((v_s / corr2).cwiseSqrt().array() + config.adam_epsilon).matrix());

        double eta = config.learning_rate;
        for (int attempt = 0; attempt <= 10; ++attempt) {
            MaskPair candidate;
            candidate.content = clamp01(masks.content - eta * dir_c);
            candidate.style = clamp01(masks.style - eta * dir_s);
            const double candidate_loss = objective.total(candidate);
            if (std::isnan(candidate_loss)) {
                throw NumericError("layer '" + layer_name + "': NaN loss at step " +
                                   std::to_string(step));
            }
            if (candidate_loss <= current) {
                masks = std::move(candidate);
                current = candidate_loss;
                break;
            }
            eta *= 0.5;
        }
        ++outcome.steps_run;
    }

    outcome.masks = std::move(masks);
    outcome.final_loss = current;
    return outcome;
}

} // namespace

double output_overlap_penalty(const Vector& u, const Vector& v, double coefficient) {
    if (coefficient < 0.0) throw ValidationError("overlap penalty: coefficient must be >= 0");
    const double nu = u.norm();
    const double nv = v.norm();
    if (nu < 1e-12 || nv < 1e-12) return 0.0;
    return coefficient * std::abs(u.dot(v) / (nu * nv));
}

std::string baseline_mode_name(BaselineMode mode) {
    return mode == BaselineMode::RankMask ? "rank-mask" : "output-mask";
}

BaselineMode parse_baseline_mode(std::string_view s) {
    if (s == "rank-mask") return BaselineMode::RankMask;
    if (s == "output-mask") return BaselineMode::OutputMask;
    throw ValidationError("unknown baseline mode '" + std::string(s) +
                          "' (expected rank-mask or output-mask)");
}

void MergeConfig::validate() const {
    if (lambda_layer_prior < 0.0) throw ValidationError("config: lambda_layer_prior must be >= 0");
    if (!(learning_rate > 0.0)) throw ValidationError("config: learning_rate must be > 0");
    if (steps < 1) throw ValidationError("config: steps must be >= 1");
    if (probe_count < 1) throw ValidationError("config: probe_count must be >= 1");
    if (!(binarize_threshold >= 0.0 && binarize_threshold < 1.0)) {
        throw ValidationError("config: binarize_threshold must lie in [0, 1)");
    }
    thresholds.validate();
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
        throw ValidationError("config: momentum coefficients must lie in [0, 1)");
    }
    if (!(adam_epsilon > 0.0)) throw ValidationError("config: adam_epsilon must be > 0");
    if (similarity_coefficient < 0.0) {
        throw ValidationError("config: similarity_coefficient must be >= 0");
    }
}

MergeConfig MergeConfig::from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ValidationError("config: JSON document must be an object");
    MergeConfig config;
    for (const auto& [key, value] : j.items()) {
        try {
            if (key == "format_version") {
                if (value != "1") throw ValidationError("config: unsupported format_version");
            } else if (key == "lambda_layer_prior") {
                config.lambda_layer_prior = value.get<double>();
            } else if (key == "learning_rate") {
                config.learning_rate = value.get<double>();
            } else if (key == "steps") {
                config.steps = value.get<int>();
            } else if (key == "seed") {
                config.seed = value.get<std::uint64_t>();
            } else if (key == "probe_count") {
                config.probe_count = value.get<int>();
            } else if (key == "binarize_threshold") {
                config.binarize_threshold = value.get<double>();
            } else if (key == "t_content") {
                config.thresholds.t_content = value.get<double>();
            } else if (key == "t_style") {
                config.thresholds.t_style = value.get<double>();
            } else if (key == "adam_beta1") {
                config.adam_beta1 = value.get<double>();
            } else if (key == "adam_beta2") {
                config.adam_beta2 = value.get<double>();
            } else if (key == "adam_epsilon") {
                config.adam_epsilon = value.get<double>();
            } else if (key == "baseline_mode") {
                config.baseline_mode = parse_baseline_mode(value.get<std::string>());
            } else if (key == "similarity_coefficient") {
                config.similarity_coefficient = value.get<double>();
            } else {
                throw ValidationError("config: unknown key '" + key + "'");
            }
        } catch (const nlohmann::json::exception&) {
            throw ValidationError("config: bad value type for key '" + key + "'");
        }
    }
    config.validate();
    return config;
}

nlohmann::json MergeConfig::to_json() const {
    return {
        {"format_version", "1"},
        {"lambda_layer_prior", lambda_layer_prior},
        {"learning_rate", learning_rate},
        {"steps", steps},
        {"seed", seed},
        {"probe_count", probe_count},
        {"binarize_threshold", binarize_threshold},
        {"t_content", thresholds.t_content},
        {"t_style", thresholds.t_style},
        {"adam_beta1", adam_beta1},
        {"adam_beta2", adam_beta2},
        {"adam_epsilon", adam_epsilon},
        {"baseline_mode", baseline_mode_name(baseline_mode)},
        {"similarity_coefficient", similarity_coefficient},
    };
}

ProbeSet make_probes(Index d_in, int probe_count, std::uint64_t seed,
                     std::string_view layer_name) {
    if (d_in < 1 || probe_count < 1) {
        throw ValidationError("make_probes: d_in and probe_count must be positive");
    }
    const std::uint64_t layer_seed = derive_seed(seed, layer_name);
    ProbeSet probes;
    probes.x_content = Rng(derive_seed(layer_seed, "probe:content")).normal_matrix(d_in, probe_count);
    probes.x_style = Rng(derive_seed(layer_seed, "probe:style")).normal_matrix(d_in, probe_count);
    return probes;
}

double alignment_loss(const LoraLayer& content, const LoraLayer& style, const MaskPair& masks,
                      const ProbeSet& probes) {
    check_pair_shapes(content, style);
    check_mask_sizes(content, style, masks);
    check_probe_shapes(content, probes);
    return RankMaskObjective(content, style, probes, 0.0, LayerClass::Neutral).alignment(masks);
}

double total_loss(const LoraLayer& content, const LoraLayer& style, const MaskPair& masks,
                  const ProbeSet& probes, double lambda, LayerClass cls) {
    check_pair_shapes(content, style);
    check_mask_sizes(content, style, masks);
    check_probe_shapes(content, probes);
    return RankMaskObjective(content, style, probes, lambda, cls).total(masks);
}

std::pair<Vector, Vector> total_gradient(const LoraLayer& content, const LoraLayer& style,
                                         const MaskPair& masks, const ProbeSet& probes,
                                         double lambda, LayerClass cls) {
    check_pair_shapes(content, style);
    check_mask_sizes(content, style, masks);
    check_probe_shapes(content, probes);
    return RankMaskObjective(content, style, probes, lambda, cls).gradient(masks);
}

std::pair<MaskPair, LayerTrainReport> train_masks(const LoraLayer& content,
                                                  const LoraLayer& style, LayerClass cls,
                                                  const MergeConfig& config) {
    config.validate();
    check_pair_shapes(content, style);

    const std::uint64_t layer_seed = derive_seed(config.seed, content.name);
    MaskPair initial =
        init_mask_pair(cls, content.rank(), style.rank(), config.thresholds, layer_seed);
    const ProbeSet probes =
        make_probes(content.d_in(), config.probe_count, config.seed, content.name);

    const RankMaskObjective objective(content, style, probes, config.lambda_layer_prior, cls);
    DescentOutcome outcome = descend(objective, std::move(initial), config, content.name);

    LayerTrainReport report;
    report.cls = cls;
    report.initial_loss = outcome.initial_loss;
    report.final_loss = outcome.final_loss;
    report.alignment = objective.alignment(outcome.masks);
    report.prior = objective.prior(outcome.masks);
    report.rank_content = mask_rank(outcome.masks.content, config.binarize_threshold);
    report.rank_style = mask_rank(outcome.masks.style, config.binarize_threshold);
    report.steps_run = outcome.steps_run;
    return {std::move(outcome.masks), report};
}

std::pair<MaskPair, LayerTrainReport> train_output_masks(const LoraLayer& content,
                                                         const LoraLayer& style, LayerClass cls,
                                                         const MergeConfig& config) {
    config.validate();
    check_pair_shapes(content, style);

    MaskPair initial;
    initial.content = Vector::Ones(content.d_out());
    initial.style = Vector::Ones(style.d_out());
    const ProbeSet probes =
        make_probes(content.d_in(), config.probe_count, config.seed, content.name);

    const OutputMaskObjective objective(content, style, probes, config.similarity_coefficient);
    DescentOutcome outcome = descend(objective, std::move(initial), config, content.name);

    LayerTrainReport report;
    report.cls = cls;
    report.initial_loss = outcome.initial_loss;
    report.final_loss = outcome.final_loss;
    report.alignment = objective.alignment(outcome.masks);
    report.prior = objective.overlap(outcome.masks);
    report.rank_content = mask_rank(outcome.masks.content, config.binarize_threshold);
    report.rank_style = mask_rank(outcome.masks.style, config.binarize_threshold);
    report.steps_run = outcome.steps_run;
    return {std::move(outcome.masks), report};
}

LoraLayer fold_rank_masks(const LoraLayer& content, const LoraLayer& style,
                          const MaskPair& masks) {
    check_pair_shapes(content, style);
    if (masks.content.size() != content.rank() || masks.style.size() != style.rank()) {
        throw ValidationError("fold_rank_masks: mask lengths must match adapter ranks for layer '" +
                              content.name + "'");
    }
    const Index total_rank = content.rank() + style.rank();
    Matrix a(content.d_out(), total_rank);
    a.leftCols(content.rank()) = content.scale() * (content.a * masks.content.asDiagonal());
    a.rightCols(style.rank()) = style.scale() * (style.a * masks.style.asDiagonal());
    Matrix b(total_rank, content.d_in());
    b.topRows(content.rank()) = content.b;
    b.bottomRows(style.rank()) = style.b;
    return LoraLayer(content.name, std::move(a), std::move(b), static_cast<double>(total_rank));
}

LoraLayer fold_output_masks(const LoraLayer& content, const LoraLayer& style,
                            const MaskPair& masks) {
    check_pair_shapes(content, style);
    if (masks.content.size() != content.d_out() || masks.style.size() != style.d_out()) {
        throw ValidationError("fold_output_masks: mask lengths must equal d_out for layer '" +
                              content.name + "'");
    }
    const Index total_rank = content.rank() + style.rank();
    Matrix a(content.d_out(), total_rank);
    a.leftCols(content.rank()) =
        content.scale() * (masks.content.asDiagonal() * content.a);
    a.rightCols(style.rank()) = style.scale() * (masks.style.asDiagonal() * style.a);
    Matrix b(total_rank, content.d_in());
    b.topRows(content.rank()) = content.b;
    b.bottomRows(style.rank()) = style.b;
    return LoraLayer(content.name, std::move(a), std::move(b), static_cast<double>(total_rank));
}

void embed_mask_metadata(AdapterSet& set, const std::string& layer_name, const MaskPair& masks) {
    const auto encode = [](const Vector& v) {
        std::ostringstream out;
        for (Index i = 0; i < v.size(); ++i) {
            if (i > 0) out << ",";
            out << format_double(v[i]);
        }
        return out.str();
    };
    set.metadata["mask_content:" + layer_name] = encode(masks.content);
    set.metadata["mask_style:" + layer_name] = encode(masks.style);
}

std::map<std::string, MaskPair> extract_mask_metadata(const AdapterSet& set) {
    const auto decode = [](const std::string& text, const std::string& key) {
        std::vector<double> values;
        std::stringstream in(text);
        std::string token;
        while (std::getline(in, token, ',')) {
            values.push_back(parse_double(token, "metadata " + key));
        }
        Vector v(static_cast<Index>(values.size()));
        for (size_t i = 0; i < values.size(); ++i) v[static_cast<Index>(i)] = values[i];
        return v;
    };

    std::map<std::string, MaskPair> masks;
    for (const auto& [key, value] : set.metadata) {
        constexpr std::string_view kContentPrefix = "mask_content:";
        constexpr std::string_view kStylePrefix = "mask_style:";
        if (key.rfind(kContentPrefix, 0) == 0) {
            masks[key.substr(kContentPrefix.size())].content = decode(value, key);
        } else if (key.rfind(kStylePrefix, 0) == 0) {
            masks[key.substr(kStylePrefix.size())].style = decode(value, key);
        }
    }
    for (const auto& [name, pair] : masks) {
        if (pair.content.size() == 0 || pair.style.size() == 0) {
            throw ValidationError("adapter metadata: incomplete mask annotation for layer '" +
                                  name + "'");
        }
    }
    return masks;
}

MergeResult merge_adapters(const AdapterSet& content, const AdapterSet& style,
                           const LayerManifest& manifest, const MergeConfig& config, int jobs) {
    config.validate();
    if (jobs < 1) throw ValidationError("merge_adapters: jobs must be >= 1");
    const auto start = std::chrono::steady_clock::now();

    std::vector<std::string> shared;
    for (const auto& [name, layer] : content.layers) {
        if (style.layers.count(name)) shared.push_back(name);
    }
    if (shared.empty() && !content.empty() && !style.empty()) {
        throw ValidationError("merge_adapters: the two adapters share no layer names");
    }

    struct TaskResult {
        MaskPair masks;
        LayerTrainReport report;
        LoraLayer merged;
    };
    std::vector<TaskResult> results(shared.size());
    std::atomic<size_t> next{0};
    std::mutex error_mutex;
    std::exception_ptr first_error;
    size_t first_error_index = shared.size();

    const auto worker = [&]() {
        while (true) {
            const size_t task = next.fetch_add(1);
            if (task >= shared.size()) return;
            try {
                const std::string& name = shared[task];
                const LoraLayer& content_layer = content.layers.at(name);
                const LoraLayer& style_layer = style.layers.at(name);
                const LayerClass cls = manifest.classify(name);
                TaskResult result;
                if (config.baseline_mode == BaselineMode::RankMask) {
                    std::tie(result.masks, result.report) =
                        train_masks(content_layer, style_layer, cls, config);
                    result.merged = fold_rank_masks(content_layer, style_layer, result.masks);
                } else {
                    std::tie(result.masks, result.report) =
                        train_output_masks(content_layer, style_layer, cls, config);
                    result.merged = fold_output_masks(content_layer, style_layer, result.masks);
                }
                results[task] = std::move(result);
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mutex);
                if (task < first_error_index) {
                    first_error_index = task;
                    first_error = std::current_exception();
                }
            }
        }
    };

    if (jobs == 1 || shared.size() <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        const int workers = std::min<int>(jobs, static_cast<int>(shared.size()));
        pool.reserve(workers);
        for (int i = 0; i < workers; ++i) pool.emplace_back(worker);
        for (std::thread& t : pool) t.join();
    }
    if (first_error) std::rethrow_exception(first_error);

    MergeResult out;
    out.report.mode = config.baseline_mode;
    out.merged.role = AdapterRole::Merged;

    std::map<std::string, MaskPair> trained_masks;
    std::map<std::string, LayerClass> trained_classes;
    for (size_t i = 0; i < shared.size(); ++i) {
        const std::string& name = shared[i];
        TaskResult& result = results[i];
        out.merged.add(std::move(result.merged));
        embed_mask_metadata(out.merged, name, result.masks);
        out.report.layers[name] = result.report;
        out.report.trained_layers++;
        if (config.baseline_mode == BaselineMode::RankMask) {
            out.report.trainable_parameters +=
                content.layers.at(name).rank() + style.layers.at(name).rank();
        } else {
            out.report.trainable_parameters += 2 * content.layers.at(name).d_out();
        }
        trained_masks[name] = std::move(result.masks);
        trained_classes[name] = result.report.cls;
    }
    out.report.histograms =
        rank_histogram(trained_masks, trained_classes, config.binarize_threshold);

    // Layers present in only one set are copied through unmodified.
    const auto copy_through = [&](const AdapterSet& source, const AdapterSet& other) {
        for (const auto& [name, layer] : source.layers) {
            if (other.layers.count(name)) continue;
            out.merged.add(layer);
            LayerTrainReport report;
            report.cls = manifest.classify(name);
            report.copied = true;
            out.report.layers[name] = report;
            out.report.copied_layers++;
        }
    };
    copy_through(content, style);
    copy_through(style, content);

    out.report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return out;
}

AdapterSet multi_concept_merge(const std::vector<AdapterSet>& merged_sets,
                               std::vector<double> alphas) {
    if (merged_sets.empty()) throw ValidationError("multi_concept_merge: no adapters given");
    if (alphas.empty()) {
        alphas.assign(merged_sets.size(), 1.0 / static_cast<double>(merged_sets.size()));
    }
    return naive_merge(merged_sets, alphas);
}

namespace {

nlohmann::json histogram_json(const std::map<Index, int>& histogram) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [rank, count] : histogram) j[std::to_string(rank)] = count;
    return j;
}

} // namespace

nlohmann::json MergeReport::to_json() const {
    nlohmann::json layers_json = nlohmann::json::object();
    for (const auto& [name, layer] : layers) {
        nlohmann::json entry = {
            {"class", layer_class_name(layer.cls)},
            {"copied", layer.copied},
        };
        if (!layer.copied) {
            entry["initial_loss"] = layer.initial_loss;
            entry["final_loss"] = layer.final_loss;
            entry["alignment_loss"] = layer.alignment;
            entry["prior_loss"] = layer.prior;
            entry["rank_content"] = layer.rank_content;
            entry["rank_style"] = layer.rank_style;
            entry["steps_run"] = layer.steps_run;
        }
        layers_json[name] = std::move(entry);
    }
    return {
        {"format_version", "1"},
        {"baseline_mode", baseline_mode_name(mode)},
        {"layers", std::move(layers_json)},
        {"aggregate",
         {
             {"trainable_parameters", trainable_parameters},
             {"trained_layers", trained_layers},
             {"copied_layers", copied_layers},
             {"rank_histograms",
              {
                  {"content_dominant",
                   {{"content_mask", histogram_json(histograms.content_dominant_content_mask)},
                    {"style_mask", histogram_json(histograms.content_dominant_style_mask)}}},
                  {"style_dominant",
                   {{"content_mask", histogram_json(histograms.style_dominant_content_mask)},
                    {"style_mask", histogram_json(histograms.style_dominant_style_mask)}}},
              }},
         }},
    };
}

} // namespace rankmerge
