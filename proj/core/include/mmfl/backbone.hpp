#pragma once

#include <array>

#include "mmfl/nn.hpp"

namespace mmfl {

struct BackboneConfig {
    int stem = 64;
    std::array<int, 4> stage_channels{256, 512, 1024, 2048};
    std::array<int, 4> blocks_per_stage{3, 4, 6, 3};
    bool instance_batch_mix = true;  // split instance/batch norm in early stages
};

// Stage feature maps at strides 4/8/16/32 relative to the input.
struct StagePyramid {
    Var c2, c3, c4, c5;
};

// 1x1 reduce -> 3x3 (stride) -> 1x1 expand with projection skip. The first
// normalization optionally splits channels between instance and batch norm.
class Bottleneck : public Module {
public:
    Bottleneck(Rng& rng, int in_ch, int mid_ch, int out_ch, int stride, bool split_norm);
    Var forward(const Var& x) const;

private:
    Conv2d &conv1_, &conv2_, &conv3_;
    InstanceBatchNorm* ibn1_ = nullptr;
    BatchNorm* bn1_ = nullptr;
    BatchNorm &bn2_, &bn3_;
    Conv2d* down_conv_ = nullptr;
    BatchNorm* down_bn_ = nullptr;
};

class Backbone : public Module {
public:
    Backbone(Rng& rng, const BackboneConfig& cfg);

    // images: (B,3,H,W) with H, W divisible by 32.
    StagePyramid forward(const Var& images) const;

    const BackboneConfig& config() const { return cfg_; }

private:
    BackboneConfig cfg_;
    Conv2d& stem_conv_;
    BatchNorm& stem_bn_;
    std::array<std::vector<Bottleneck*>, 4> stages_;
};

}  // namespace mmfl
