#include "mmfl/losses.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace mmfl {

namespace {

// Euclidean distance matrix of (B,D) rows, d_ii = 0.
std::vector<double> pairwise_distances(const Tensor& f) {
    const int B = f.dim(0), D = f.dim(1);
    std::vector<double> d(static_cast<std::size_t>(B) * B, 0.0);
    for (int i = 0; i < B; ++i)
        for (int j = i + 1; j < B; ++j) {
            double s = 0.0;
            for (int k = 0; k < D; ++k) {
                const double diff = f.at(i, k) - f.at(j, k);
                s += diff * diff;
            }
            const double dist = std::sqrt(s);
            d[static_cast<std::size_t>(i) * B + j] = dist;
            d[static_cast<std::size_t>(j) * B + i] = dist;
        }
    return d;
}

}  // namespace

Var trihard_loss(const Var& features, const std::vector<int>& pids, double margin) {
    require(features.value().ndim() == 2, "trihard: features must be (B,D)");
    const int B = features.shape()[0];
    require(static_cast<int>(pids.size()) == B, "trihard: one pid per feature row");
    require(margin >= 0.0, "trihard: margin must be non-negative");
    require(std::set<int>(pids.begin(), pids.end()).size() >= 2,
            "trihard: batch needs at least two classes");
    for (int i = 0; i < B; ++i) {
        bool has_pos = false;
        for (int j = 0; j < B && !has_pos; ++j) has_pos = j != i && pids[j] == pids[i];
        require(has_pos, "trihard: every anchor needs a positive sample");
    }

    const Tensor& f = features.value();
    const int D = f.dim(1);
    const auto dist = pairwise_distances(f);

    std::vector<int> hardest_pos(static_cast<std::size_t>(B)),
        hardest_neg(static_cast<std::size_t>(B));
    std::vector<bool> active(static_cast<std::size_t>(B));
    double loss = 0.0;
    for (int i = 0; i < B; ++i) {
        int p = -1, n = -1;
        for (int j = 0; j < B; ++j) {
            if (j == i) continue;
            const double d = dist[static_cast<std::size_t>(i) * B + j];
            if (pids[j] == pids[i]) {
                if (p < 0 || d > dist[static_cast<std::size_t>(i) * B + p]) p = j;
            } else {
                if (n < 0 || d < dist[static_cast<std::size_t>(i) * B + n]) n = j;
            }
        }
        hardest_pos[static_cast<std::size_t>(i)] = p;
        hardest_neg[static_cast<std::size_t>(i)] = n;
        const double hinge = dist[static_cast<std::size_t>(i) * B + p] -
                             dist[static_cast<std::size_t>(i) * B + n] + margin;
        active[static_cast<std::size_t>(i)] = hinge > 0.0;
        if (hinge > 0.0) loss += hinge;
    }

    Tensor out({1});
    out[0] = loss;
    auto fn = features.node();
    return make_op(
        std::move(out), {fn},
        [fn, B, D, dist, hardest_pos, hardest_neg, active](Node& nd) {
            if (!fn->requires_grad) return;
            const double g = nd.grad[0];
            double* fg = fn->grad_buffer().data();
            const double* fv = fn->value.data();
            auto push_pair = [&](int i, int j, double sign) {
                const double d = dist[static_cast<std::size_t>(i) * B + j];
                if (d <= 0.0) return;  // coincident points: flat subgradient
                const double c = sign * g / d;
                for (int k = 0; k < D; ++k) {
                    const double diff = fv[i * D + k] - fv[j * D + k];
                    fg[i * D + k] += c * diff;
                    fg[j * D + k] -= c * diff;
                }
            };
            for (int i = 0; i < B; ++i) {
                if (!active[static_cast<std::size_t>(i)]) continue;
                push_pair(i, hardest_pos[static_cast<std::size_t>(i)], 1.0);
                push_pair(i, hardest_neg[static_cast<std::size_t>(i)], -1.0);
            }
        });
}

Var center_loss(const Var& features, const std::vector<int>& pids, const Var& centers) {
    require(features.value().ndim() == 2 && centers.value().ndim() == 2,
            "center loss: features and centers must be 2-d");
    const int B = features.shape()[0], D = features.shape()[1];
    const int C = centers.shape()[0];
    require(centers.shape()[1] == D, "center loss: feature/center width mismatch");
    require(static_cast<int>(pids.size()) == B, "center loss: one pid per feature row");
    for (int p : pids)
        require(p >= 0 && p < C, "center loss: pid " + std::to_string(p) + " has no center row");

    const Tensor& f = features.value();
    const Tensor& c = centers.value();
    double loss = 0.0;
    for (int i = 0; i < B; ++i)
        for (int k = 0; k < D; ++k) {
            const double diff = f.at(i, k) - c.at(pids[static_cast<std::size_t>(i)], k);
            loss += diff * diff;
        }
    Tensor out({1});
    out[0] = 0.5 * loss;

    auto fn = features.node(), cn = centers.node();
    return make_op(std::move(out), {fn, cn}, [fn, cn, pids, B, D](Node& nd) {
        const double g = nd.grad[0];
        const double* fv = fn->value.data();
        const double* cv = cn->value.data();
        for (int i = 0; i < B; ++i) {
            const int y = pids[static_cast<std::size_t>(i)];
            for (int k = 0; k < D; ++k) {
                const double diff = fv[i * D + k] - cv[y * D + k];
                if (fn->requires_grad) fn->grad_buffer()[i * D + k] += g * diff;
                if (cn->requires_grad) cn->grad_buffer()[y * D + k] -= g * diff;
            }
        }
    });
}

namespace {

// Shared softmax cross-entropy core: loss_r = -(1-eps)*logp[target] -
// (eps/K)*sum_k logp[k], averaged over unmasked rows.
Var smoothed_ce(const Var& logits, const std::vector<int>& targets, double epsilon,
                bool allow_mask) {
    require(logits.value().ndim() == 2, "cross entropy: logits must be (B,K)");
    const int B = logits.shape()[0], K = logits.shape()[1];
    require(K >= 2, "cross entropy: needs at least two classes");
    require(static_cast<int>(targets.size()) == B, "cross entropy: one target per row");
    require(epsilon >= 0.0 && epsilon < 1.0, "cross entropy: smoothing must be in [0,1)");
    int valid = 0;
    for (int t : targets) {
        if (t == -1 && allow_mask) continue;
        require(t >= 0 && t < K,
                "cross entropy: target " + std::to_string(t) + " outside [0," +
                    std::to_string(K) + ")");
        ++valid;
    }
    if (valid == 0) return Var(Tensor::zeros({1}));

    const Tensor& z = logits.value();
    std::vector<double> logp(static_cast<std::size_t>(B) * K);
    double loss = 0.0;
    for (int i = 0; i < B; ++i) {
        if (targets[static_cast<std::size_t>(i)] == -1) continue;
        double zmax = z.at(i, 0);
        for (int k = 1; k < K; ++k) zmax = std::max(zmax, z.at(i, k));
        double lse = 0.0;
        for (int k = 0; k < K; ++k) lse += std::exp(z.at(i, k) - zmax);
        lse = std::log(lse) + zmax;
        double row = 0.0;
        for (int k = 0; k < K; ++k) {
            const double lp = z.at(i, k) - lse;
            logp[static_cast<std::size_t>(i) * K + k] = lp;
            row -= (epsilon / K) * lp;
        }
        row -= (1.0 - epsilon) * logp[static_cast<std::size_t>(i) * K +
                                      targets[static_cast<std::size_t>(i)]];
        loss += row;
    }
    Tensor out({1});
    out[0] = loss / valid;

    auto zn = logits.node();
    return make_op(std::move(out), {zn}, [zn, targets, logp, epsilon, B, K, valid](Node& nd) {
        if (!zn->requires_grad) return;
        const double g = nd.grad[0] / valid;
        double* zg = zn->grad_buffer().data();
        for (int i = 0; i < B; ++i) {
            const int t = targets[static_cast<std::size_t>(i)];
            if (t == -1) continue;
            for (int k = 0; k < K; ++k) {
                const double p = std::exp(logp[static_cast<std::size_t>(i) * K + k]);
                const double q = epsilon / K + (k == t ? 1.0 - epsilon : 0.0);
                zg[i * K + k] += g * (p - q);
            }
        }
    });
}

}  // namespace

Var lsr_loss(const Var& logits, const std::vector<int>& targets, double epsilon) {
    return smoothed_ce(logits, targets, epsilon, /*allow_mask=*/true);
}

Var ce_loss(const Var& logits, const std::vector<int>& targets) {
    return smoothed_ce(logits, targets, 0.0, /*allow_mask=*/false);
}

Var attribute_loss(const Jarn::Out& heads, const std::vector<std::vector<int>>& attr_targets,
                   double epsilon) {
    std::vector<Var> terms;
    for (const auto& branch : heads.branches) {
        require(branch.attr_logp.size() == attr_targets.size(),
                "attribute loss: one target list per attribute type");
        for (std::size_t t = 0; t < branch.attr_logp.size(); ++t)
            terms.push_back(lsr_loss(branch.attr_logp[t], attr_targets[t], epsilon));
    }
    return scale(add_scalarvars(terms), 1.0 / static_cast<double>(terms.size()));
}

Var pid_loss(const Jarn::Out& heads, const std::vector<int>& pids) {
    std::vector<Var> terms;
    for (const auto& branch : heads.branches) terms.push_back(ce_loss(branch.pid_logits, pids));
    return scale(add_scalarvars(terms), 0.25);
}

TotalLoss total_loss(const Var& lsr, const Var& ce, const Var& triplet, const Var& center,
                     const LossWeights& weights) {
    TotalLoss out;
    out.value = add(add(lsr, ce), add(scale(triplet, weights.gamma_triplet),
                                      scale(center, weights.beta_center)));
    out.report.lsr = lsr.value()[0];
    out.report.ce = ce.value()[0];
    out.report.triplet = triplet.value()[0];
    out.report.center = center.value()[0];
    out.report.total = out.value.value()[0];
    return out;
}

}  // namespace mmfl
