#pragma once

#include <Eigen/Dense>

namespace rankmerge {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

// Per-rank merger weights, relaxed to [0,1] during training.
using MaskVector = Vector;

// Trainable mergers of one layer: content_mask scales the content adapter's
// rank components, style_mask the style adapter's.
struct MaskPair {
    MaskVector content;
    MaskVector style;
};

} // namespace rankmerge
