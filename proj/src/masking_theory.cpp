#include "rankmerge/masking_theory.hpp"

#include <algorithm>
#include <numeric>
#include <string>

#include "rankmerge/errors.hpp"
#include "rankmerge/linalg.hpp"
#include "rankmerge/rng.hpp"

namespace rankmerge {

namespace {

void check_budget_args(Index d_out, Index d_in, Index r, Index d_s) {
    if (d_out < 1 || d_in < 1) throw ValidationError("budget: dimensions must be positive");
    if (r < 0 || r > std::min(d_out, d_in)) {
        throw ValidationError("budget: rank r=" + std::to_string(r) + " out of range [0, " +
                              std::to_string(std::min(d_out, d_in)) + "]");
    }
    if (d_s < 0 || d_s > d_out) {
        throw ValidationError("budget: active outputs d_s=" + std::to_string(d_s) +
                              " out of range [0, " + std::to_string(d_out) + "]");
    }
}

// Per-row squared costs of masking decisions against the rank-r truncation:
// kept[i] = ||x_i - xr_i||^2, dropped[i] = ||x_i||^2.
struct RowCosts {
    Vector kept;
    Vector dropped;
};

RowCosts row_costs(const Eigen::Ref<const Matrix>& x, Index r) {
    const Matrix xr = best_rank_r(x, r);
    RowCosts costs;
    costs.kept = (x - xr).rowwise().squaredNorm();
    costs.dropped = x.rowwise().squaredNorm();
    return costs;
}

double exhaustive_min(const RowCosts& costs, Index d_out, Index d_s) {
    // Enumerate kept-row index sets in ascending lexicographic order; the
    // first minimum encountered wins ties.
    std::vector<Index> kept(d_s);
    std::iota(kept.begin(), kept.end(), Index{0});
    double best = std::numeric_limits<double>::infinity();
    const double total_dropped = costs.dropped.sum();
    while (true) {
        double err2 = total_dropped;
        for (Index i : kept) err2 += costs.kept[i] - costs.dropped[i];
        if (err2 < best) best = err2;

        // next combination
        Index j = d_s - 1;
        while (j >= 0 && kept[j] == d_out - d_s + j) --j;
        if (j < 0) break;
        ++kept[j];
        for (Index k = j + 1; k < d_s; ++k) kept[k] = kept[k - 1] + 1;
    }
    return std::sqrt(std::max(0.0, best));
}

double greedy_min(const RowCosts& costs, Index d_out, Index d_s) {
    // Keep the d_s rows whose retention reduces the error most, i.e. the
    // largest dropped[i] - kept[i]; ties broken by smaller row index.
    std::vector<Index> order(d_out);
    std::iota(order.begin(), order.end(), Index{0});
    std::stable_sort(order.begin(), order.end(), [&](Index lhs, Index rhs) {
        return costs.dropped[lhs] - costs.kept[lhs] > costs.dropped[rhs] - costs.kept[rhs];
    });
    double err2 = costs.dropped.sum();
    for (Index k = 0; k < d_s; ++k) {
        const Index i = order[k];
        err2 += costs.kept[i] - costs.dropped[i];
    }
    return std::sqrt(std::max(0.0, err2));
}

} // namespace

long long param_count_rank(Index d_out, Index d_in, Index s) {
    check_budget_args(d_out, d_in, std::min(d_out, d_in), 0);
    if (s < 0 || s > std::min(d_out, d_in)) {
        throw ValidationError("param_count_rank: s out of range");
    }
    return static_cast<long long>(s) * (d_out + d_in);
}

long long param_count_out(Index d_out, Index d_in, Index r, Index d_s) {
    check_budget_args(d_out, d_in, r, d_s);
    return static_cast<long long>(r) * (d_s + d_in);
}

Index equal_budget_s(Index r, Index d_out, Index d_in, Index d_s) {
    check_budget_args(d_out, d_in, r, d_s);
    return static_cast<Index>((static_cast<long long>(r) * (d_s + d_in)) / (d_out + d_in));
}

BudgetSpec BudgetSpec::equal_budget(Index d_out, Index d_in, Index r, Index d_s) {
    BudgetSpec spec;
    spec.d_out = d_out;
    spec.d_in = d_in;
    spec.r = r;
    spec.d_s = d_s;
    spec.s = equal_budget_s(r, d_out, d_in, d_s);
    spec.f = static_cast<double>(d_out - d_s) / static_cast<double>(d_out);
    return spec;
}

double rank_mask_error(const Eigen::Ref<const Matrix>& x, Index r, Index s) {
    const Index p = std::min(x.rows(), x.cols());
    if (r < 1 || r > p) throw ValidationError("rank_mask_error: r out of range");
    if (s < 0 || s > r) {
        throw ValidationError("rank_mask_error: s=" + std::to_string(s) + " out of range [0, " +
                              std::to_string(r) + "]");
    }
    // The optimal mask keeps the top s singular components, so the error is
    // the tail energy past s (everything masked within the top r plus the
    // truncation tail past r).
    return tail_energy(svd(x).sigma, s);
}

OutputMaskError output_mask_error(const Eigen::Ref<const Matrix>& x, Index r, Index d_s,
                                  MaskSearch method) {
    const Index d_out = x.rows();
    check_budget_args(d_out, x.cols(), r, d_s);
    if (r < 1) throw ValidationError("output_mask_error: r must be >= 1");

    constexpr Index kExhaustiveLimit = 20;
    if (method == MaskSearch::Auto) {
        method = d_out <= kExhaustiveLimit ? MaskSearch::Exhaustive : MaskSearch::Greedy;
    }
    if (method == MaskSearch::Exhaustive && d_out > kExhaustiveLimit) {
        throw ValidationError("output_mask_error: exhaustive search limited to d_out <= " +
                              std::to_string(kExhaustiveLimit) + ", got " +
                              std::to_string(d_out));
    }

    const RowCosts costs = row_costs(x, r);
    OutputMaskError result;
    result.method = method;
    result.error = method == MaskSearch::Exhaustive ? exhaustive_min(costs, d_out, d_s)
                                                    : greedy_min(costs, d_out, d_s);
    return result;
}

double output_mask_error_lower_bound(const Eigen::Ref<const Vector>& sigma, Index r, double f) {
    if (!(f >= 0.0 && f <= 1.0)) throw ValidationError("lower bound: f must lie in [0, 1]");
    if (r < 0 || r > sigma.size()) throw ValidationError("lower bound: r out of range");
    const double head = sigma.head(r).squaredNorm();
    const double tail = sigma.tail(sigma.size() - r).squaredNorm();
    return std::sqrt(f * head + tail);
}

TheoremCheckResult theorem_check(const Eigen::Ref<const Matrix>& x, Index r, Index d_s,
                                 MaskSearch method) {
    TheoremCheckResult result;
    result.budget = BudgetSpec::equal_budget(x.rows(), x.cols(), r, d_s);
    result.degenerate = result.budget.s == 0;
    result.e_rank = rank_mask_error(x, r, result.budget.s);

    const OutputMaskError out = output_mask_error(x, r, d_s, method);
    result.e_out = out.error;
    result.method = out.method;
    result.e_out_lower_bound = output_mask_error_lower_bound(svd(x).sigma, r, result.budget.f);
    result.holds = result.e_rank <= result.e_out + 1e-9;
    result.bound_holds = result.e_out >= result.e_out_lower_bound - 1e-9;
    return result;
}

Matrix draw_instance_matrix(const TheoremBatchConfig& config, std::uint64_t instance_seed) {
    Rng rng(instance_seed);
    if (config.ensemble == SpectrumKind::Gaussian) {
        return rng.normal_matrix(config.d_out, config.d_in);
    }
    // Geometric spectrum sigma_i = decay^i on random orthonormal factors.
    const Index p = std::min(config.d_out, config.d_in);
    Vector sigma(p);
    for (Index i = 0; i < p; ++i) sigma[i] = std::pow(config.decay, static_cast<double>(i));
    Eigen::HouseholderQR<Matrix> qr_u(rng.normal_matrix(config.d_out, p));
    Eigen::HouseholderQR<Matrix> qr_v(rng.normal_matrix(config.d_in, p));
    const Matrix u = qr_u.householderQ() * Matrix::Identity(config.d_out, p);
    const Matrix v = qr_v.householderQ() * Matrix::Identity(config.d_in, p);
    return u * sigma.asDiagonal() * v.transpose();
}

TheoremBatchReport run_theorem_batch(const TheoremBatchConfig& config) {
    if (config.trials < 1) throw ValidationError("theorem batch: trials must be >= 1");
    if (!(config.decay > 0.0 && config.decay <= 1.0)) {
        throw ValidationError("theorem batch: decay must lie in (0, 1]");
    }

    TheoremBatchReport report;
    report.config = config;
    int holds = 0;
    int bound_holds = 0;
    for (int i = 0; i < config.trials; ++i) {
        const std::uint64_t instance_seed =
            derive_seed(config.seed, "instance:" + std::to_string(i));
        const Matrix x = draw_instance_matrix(config, instance_seed);
        TheoremInstance instance;
        instance.index = i;
        instance.seed = instance_seed;
        instance.check = theorem_check(x, config.r, config.d_s, config.method);
        if (instance.check.holds) {
            ++holds;
        } else {
            report.counterexamples.emplace_back(i, x);
        }
        if (instance.check.bound_holds) ++bound_holds;
        report.instances.push_back(std::move(instance));
    }
    report.holds_fraction = static_cast<double>(holds) / config.trials;
    report.bound_fraction = static_cast<double>(bound_holds) / config.trials;
    return report;
}

const char* mask_search_name(MaskSearch m) {
    switch (m) {
        case MaskSearch::Auto: return "auto";
        case MaskSearch::Exhaustive: return "exhaustive";
        case MaskSearch::Greedy: return "greedy";
    }
    return "auto";
}

nlohmann::json TheoremBatchReport::to_json() const {
    nlohmann::json instances_json = nlohmann::json::array();
    for (const TheoremInstance& inst : instances) {
        const TheoremCheckResult& c = inst.check;
        instances_json.push_back({
            {"index", inst.index},
            {"seed", inst.seed},
            {"d_out", c.budget.d_out},
            {"d_in", c.budget.d_in},
            {"r", c.budget.r},
            {"d_s", c.budget.d_s},
            {"s", c.budget.s},
            {"f", c.budget.f},
            {"e_rank", c.e_rank},
            {"e_out", c.e_out},
            {"e_out_lower_bound", c.e_out_lower_bound},
            {"method", mask_search_name(c.method)},
            {"holds", c.holds},
            {"bound_holds", c.bound_holds},
            {"degenerate", c.degenerate},
        });
    }
    nlohmann::json counterexamples_json = nlohmann::json::array();
    for (const auto& [index, matrix] : counterexamples) {
        nlohmann::json rows = nlohmann::json::array();
        for (Index i = 0; i < matrix.rows(); ++i) {
            nlohmann::json row = nlohmann::json::array();
            for (Index j = 0; j < matrix.cols(); ++j) row.push_back(matrix(i, j));
            rows.push_back(std::move(row));
        }
        counterexamples_json.push_back({{"index", index}, {"matrix", std::move(rows)}});
    }
    return {
        {"format_version", "1"},
        {"config",
         {
             {"trials", config.trials},
             {"d_out", config.d_out},
             {"d_in", config.d_in},
             {"rank", config.r},
             {"active_outputs", config.d_s},
             {"seed", config.seed},
             {"method", mask_search_name(config.method)},
             {"ensemble", config.ensemble == SpectrumKind::Gaussian ? "gaussian" : "geometric"},
             {"decay", config.decay},
         }},
        {"aggregate",
         {
             {"trials", config.trials},
             {"holds_fraction", holds_fraction},
             {"bound_fraction", bound_fraction},
         }},
        {"instances", std::move(instances_json)},
        {"counterexamples", std::move(counterexamples_json)},
    };
}

} // namespace rankmerge
