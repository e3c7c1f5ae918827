#pragma once

#include "mmfl/nn.hpp"

namespace mmfl {

// All descriptors produced by the four branches for one batch.
struct EmbeddingBundle {
    Var z_g;      // (B, lift) pooled global descriptor
    Var f_g;      // (B, embed) reduced global embedding
    Var z_ph;     // (B, lift, 2, 1) horizontal part tensor
    Var z_ph_flat;
    std::vector<Var> f_ph_parts;  // two (B, part_dim)
    Var f_ph_c;   // (B, 2*part_dim)
    Var z_pv;     // (B, lift, 1, 2)
    Var z_pv_flat;
    std::vector<Var> f_pv_parts;
    Var f_pv_c;
    Var z_la_flat;  // (B, K*lras_width) pre-reduction local concat
    Var f_la;       // (B, embed)
    Var f_metric;   // (B, 4*embed) = [f_g | f_ph_c | f_pv_c | f_la]
    std::vector<std::vector<int>> lras_indices;  // per-sample selected channels
    Tensor lras_scores;                          // (B, lras_width) accumulated responses
};

struct BranchConfig {
    int in_ch = 512;     // channels of x_g / x_part
    int embed = 256;     // per-branch embedding width
    int part_dim = 128;  // per part-slice width (2*part_dim == embed)
    int lras_width = 256;
    int lras_k = 4;
};

class GlobalBranch : public Module {
public:
    GlobalBranch(Rng& rng, int in_ch, int embed);
    // returns (z_g, f_g)
    std::pair<Var, Var> forward(const Var& x_g) const;

private:
    LinearBnRelu& reduce_;
};

enum class PartAxis { horizontal, vertical };

class PartBranch : public Module {
public:
    PartBranch(Rng& rng, int in_ch, int part_dim, PartAxis axis);
    struct Out {
        Var z, z_flat;
        std::vector<Var> parts;
        Var f_c;
    };
    Out forward(const Var& x_part) const;
    PartAxis axis() const { return axis_; }

private:
    PartAxis axis_;
    LinearBnRelu &red0_, &red1_;
};

// Per-channel sigmoid gates from a 1-d conv over pooled channel statistics.
class EcaGate : public Module {
public:
    EcaGate(Rng& rng, int ch);
    Var gate(const Var& x) const;     // (B,C) in (0,1)
    Var forward(const Var& x) const;  // x * gate
    int kernel() const { return static_cast<int>(kernel_.value().numel()); }
    static int kernel_size(int ch);
    Var kernel_var() const { return kernel_; }

private:
    Var kernel_;
};

class ResidualUnit : public Module {
public:
    ResidualUnit(Rng& rng, int ch);
    Var forward(const Var& x) const;

private:
    Conv2d &c1_, &c2_;
    BatchNorm &b1_, &b2_;
};

// Mask-modulated trunk with top-K channel selection by accumulated response.
class LocalBranch : public Module {
public:
    LocalBranch(Rng& rng, int in_ch, int width, int k, int embed);
    struct Out {
        Var trunk;   // (B, width, H, W)
        Var mask;    // (B, width, H, W) in [0,1]
        Var fused;   // (1 + mask) * trunk
        Tensor scores;                         // (B, width)
        std::vector<std::vector<int>> indices;  // per-sample top-K (lowest index on ties)
        Var z_flat;  // (B, K*width)
        Var f_la;    // (B, embed)
    };
    Out forward(const Var& x) const;
    int k() const { return k_; }

    // Top-K indices by descending score, ties broken by lowest index.
    static std::vector<int> top_k(const double* scores, int n, int k);

private:
    int width_, k_;
    ConvBnRelu& reduce_;
    ResidualUnit& trunk_;
    ResidualUnit& mask_res_;
    Conv2d& mask_conv_;
    LinearBnRelu& out_;
};

class Branches : public Module {
public:
    Branches(Rng& rng, const BranchConfig& cfg);
    EmbeddingBundle forward(const Var& x_g, const Var& x_part) const;
    const BranchConfig& config() const { return cfg_; }
    const EcaGate& eca() const { return eca_; }
    const LocalBranch& local() const { return ldf_; }

private:
    BranchConfig cfg_;
    GlobalBranch& gf_;
    PartBranch &ph_, &pv_;
    EcaGate& eca_;
    LocalBranch& ldf_;
};

}  // namespace mmfl
