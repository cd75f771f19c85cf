#pragma once

#include <cstdint>
#include <vector>

#include <json.hpp>

#include "rankmerge/types.hpp"

namespace rankmerge {

// Trainable-parameter counts of the two masking schemes.
long long param_count_rank(Index d_out, Index d_in, Index s);
long long param_count_out(Index d_out, Index d_in, Index r, Index d_s);

// Largest s whose rank-mask budget fits the output-mask budget:
// s = floor(r * (d_s + d_in) / (d_out + d_in)). With d_out = d_in = d this is
// r * (1 - f/2) rounded down, f = (d - d_s) / d.
Index equal_budget_s(Index r, Index d_out, Index d_in, Index d_s);

// Equal-parameter-budget configuration for one layer shape.
struct BudgetSpec {
    Index d_out = 0;
    Index d_in = 0;
    Index r = 0;   // base rank
    Index d_s = 0; // active output units
    Index s = 0;   // active rank components
    double f = 0.0; // masked output fraction (d_out - d_s) / d_out

    static BudgetSpec equal_budget(Index d_out, Index d_in, Index r, Index d_s);
};

// Frobenius error of keeping the top s components of the rank-r
// factorization of x: sqrt(sum of sigma_i^2 for i > s).
double rank_mask_error(const Eigen::Ref<const Matrix>& x, Index r, Index s);

enum class MaskSearch { Auto, Exhaustive, Greedy };

struct OutputMaskError {
    double error = 0.0;
    MaskSearch method = MaskSearch::Exhaustive; // resolved: never Auto
};

// Minimum over binary output masks with exactly d_s ones of
// ||x - M * x_r||_F, x_r the best rank-r approximation. Searches all
// C(d_out, d_s) masks when exhaustive; keeps the d_s rows with the largest
// energy reduction when greedy. Auto picks exhaustive for d_out <= 20.
OutputMaskError output_mask_error(const Eigen::Ref<const Matrix>& x, Index r, Index d_s,
                                  MaskSearch method = MaskSearch::Auto);

// sqrt(f * sum_{i<=r} sigma_i^2 + sum_{i>r} sigma_i^2); averaged-row-energy
// lower bound on the output-mask error.
double output_mask_error_lower_bound(const Eigen::Ref<const Vector>& sigma, Index r, double f);

struct TheoremCheckResult {
    BudgetSpec budget;
    double e_rank = 0.0;
    double e_out = 0.0;
    double e_out_lower_bound = 0.0;
    MaskSearch method = MaskSearch::Exhaustive;
    bool holds = false;       // e_rank <= e_out + 1e-9
    bool bound_holds = false; // e_out >= e_out_lower_bound - 1e-9
    bool degenerate = false;  // s == 0
};

// Compares rank-mask and output-mask errors on x at the equal budget derived
// from (r, d_s).
TheoremCheckResult theorem_check(const Eigen::Ref<const Matrix>& x, Index r, Index d_s,
                                 MaskSearch method = MaskSearch::Auto);

enum class SpectrumKind { Gaussian, Geometric };

struct TheoremBatchConfig {
    int trials = 100;
    Index d_out = 12;
    Index d_in = 12;
    Index r = 6;
    Index d_s = 8;
    std::uint64_t seed = 0;
    MaskSearch method = MaskSearch::Auto;
    SpectrumKind ensemble = SpectrumKind::Gaussian;
    double decay = 0.7; // geometric ensemble: sigma_i = decay^i
};

struct TheoremInstance {
    int index = 0;
    std::uint64_t seed = 0;
    TheoremCheckResult check;
};

struct TheoremBatchReport {
    TheoremBatchConfig config;
    std::vector<TheoremInstance> instances;               // sorted by index
    std::vector<std::pair<int, Matrix>> counterexamples;  // instances where holds == false
    double holds_fraction = 0.0;
    double bound_fraction = 0.0;

    nlohmann::json to_json() const;
};

// Draws one matrix of the configured ensemble (used by the batch runner and
// by sweep tooling).
Matrix draw_instance_matrix(const TheoremBatchConfig& config, std::uint64_t instance_seed);

TheoremBatchReport run_theorem_batch(const TheoremBatchConfig& config);

const char* mask_search_name(MaskSearch m);

} // namespace rankmerge
