#pragma once

#include "mmfl/backbone.hpp"
#include "mmfl/nn.hpp"

namespace mmfl {

struct SffpConfig {
    int c2 = 256, c3 = 512, c4 = 1024, c5 = 2048;  // backbone stage channels
    int width = 256;                               // pyramid width
    int repeats = 2;                               // bidirectional fusion passes
    int lift = 512;                                // branch input channels
    int gc_ratio = 16;                             // global-context bottleneck ratio
};

struct PyramidLevels {
    Var p3, p4, p5;
};

// Fast-normalized weighted sum of same-shape inputs:
// out = sum_i relu(w_i)/(sum_j relu(w_j) + eps) * x_i.
Var weighted_fusion(const std::vector<Var>& xs, const Var& raw_weights, double eps);

// Depthwise 3x3 + pointwise 1x1.
class SeparableConv : public Module {
public:
    SeparableConv(Rng& rng, int ch);
    Var forward(const Var& x) const;

private:
    Conv2d &dw_, &pw_;
};

// One fusion node: normalized weighted sum -> swish -> separable conv.
class FusionNode : public Module {
public:
    FusionNode(Rng& rng, int ch, int n_inputs, double eps = 1e-4);
    Var forward(const std::vector<Var>& xs) const;
    std::vector<double> effective_weights() const;
    Var raw_weights() const { return raw_; }
    double epsilon() const { return eps_; }

private:
    Var raw_;
    SeparableConv& conv_;
    double eps_;
};

// One top-down + bottom-up pass over three pyramid levels.
class BiFpnLayer : public Module {
public:
    BiFpnLayer(Rng& rng, int ch);
    PyramidLevels forward(const PyramidLevels& in) const;
    std::vector<const FusionNode*> nodes() const { return {&td4_, &out3_, &out4_, &out5_}; }

private:
    FusionNode &td4_, &out3_, &out4_, &out5_;
};

// Three-scale multiply-add fusion:
//   inner  = x_lm1 + x_lm1 * Conv4x4s2(x_lm2)   (at scale l-1)
//   result = x_l + x_l * AvgPool2x(inner)       (at scale l)
class ResolutionFusion : public Module {
public:
    ResolutionFusion(Rng& rng, int ch);
    Var forward(const Var& x_l, const Var& x_lm1, const Var& x_lm2) const;

private:
    Conv2d& conv_;
};

// Densely connected dilated 3x3 stack (rates 3/5/7) + fusing 1x1.
class DenseAspp : public Module {
public:
    DenseAspp(Rng& rng, int ch, int growth);
    Var forward(const Var& x) const;

private:
    Conv2d &d3_, &d5_, &d7_, &fuse_;
};

// Global-context attention: softmax position pooling + channel bottleneck,
// added residually to every position. No activation inside the transform.
class GlobalContext : public Module {
public:
    GlobalContext(Rng& rng, int ch, int ratio);
    Var forward(const Var& x) const;
    Var attention(const Var& x) const;  // (B, H*W), rows sum to 1

private:
    Conv2d& wk_;
    Linear &v1_, &v2_;
    LayerNorm& ln_;
};

class Sffp : public Module {
public:
    Sffp(Rng& rng, const SffpConfig& cfg);

    struct Out {
        Var x_g;     // lift channels at stride 32
        Var x_part;  // lift channels at stride 16
    };
    Out forward(const StagePyramid& stages) const;

    PyramidLevels lateral_reduce(const StagePyramid& stages) const;
    PyramidLevels bifpn(const PyramidLevels& in) const;
    const std::vector<BiFpnLayer*>& layers() const { return layers_; }
    const SffpConfig& config() const { return cfg_; }

private:
    SffpConfig cfg_;
    Conv2d &lat2_, &lat3_, &lat4_, &lat5_;
    std::vector<BiFpnLayer*> layers_;
    ResolutionFusion &rfb5_, &rfb4_;
    DenseAspp &aspp5_, &aspp4_;
    GlobalContext &gc5_, &gc4_;
    ConvBnRelu &lift5_, &lift4_;
};

}  // namespace mmfl
