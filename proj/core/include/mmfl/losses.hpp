#pragma once

#include <vector>

#include "mmfl/jarn.hpp"

namespace mmfl {

struct LossWeights {
    double gamma_triplet = 1.5;
    double beta_center = 0.0005;
    double margin = 0.3;
    double smoothing = 0.1;
};

// Batch-hard ranking loss: per anchor, hinge(hardest-positive distance -
// hardest-negative distance + margin), summed over anchors. Distances are
// Euclidean; callers pass L2-normalized features.
Var trihard_loss(const Var& features, const std::vector<int>& pids, double margin);

// 0.5 * sum_j ||F_j - centers[pid_j]||^2; gradients flow to both features and
// centers.
Var center_loss(const Var& features, const std::vector<int>& pids, const Var& centers);

// Label-smoothing cross entropy over rows of logits. target -1 masks the row
// out; the mean runs over unmasked rows (0 when none remain).
Var lsr_loss(const Var& logits, const std::vector<int>& targets, double epsilon);

// Plain cross entropy, mean over the batch: -z_target + log sum_j exp(z_j).
Var ce_loss(const Var& logits, const std::vector<int>& targets);

// Mean label-smoothing loss over every attribute head (4 branches x schema
// types). attr_targets[t][b] is sample b's value index for type t, -1 missing.
Var attribute_loss(const Jarn::Out& heads, const std::vector<std::vector<int>>& attr_targets,
                   double epsilon);

// Mean cross entropy over the four PID heads.
Var pid_loss(const Jarn::Out& heads, const std::vector<int>& pids);

struct LossReport {
    double lsr = 0.0, ce = 0.0, triplet = 0.0, center = 0.0, total = 0.0;
};

struct TotalLoss {
    Var value;
    LossReport report;
};

// L = lsr + ce + gamma * triplet + beta * center.
TotalLoss total_loss(const Var& lsr, const Var& ce, const Var& triplet, const Var& center,
                     const LossWeights& weights);

}  // namespace mmfl
