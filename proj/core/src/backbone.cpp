#include "mmfl/backbone.hpp"

namespace mmfl {

Bottleneck::Bottleneck(Rng& rng, int in_ch, int mid_ch, int out_ch, int stride, bool split_norm)
    : conv1_(add_module<Conv2d>("conv1", rng, in_ch, mid_ch, 1, 1, 0, 1, 1, false)),
      conv2_(add_module<Conv2d>("conv2", rng, mid_ch, mid_ch, 3, stride, 1, 1, 1, false)),
      conv3_(add_module<Conv2d>("conv3", rng, mid_ch, out_ch, 1, 1, 0, 1, 1, false)),
      bn2_(add_module<BatchNorm>("bn2", mid_ch)),
      bn3_(add_module<BatchNorm>("bn3", out_ch)) {
    if (split_norm)
        ibn1_ = &add_module<InstanceBatchNorm>("ibn1", mid_ch);
    else
        bn1_ = &add_module<BatchNorm>("bn1", mid_ch);
    if (stride != 1 || in_ch != out_ch) {
        down_conv_ = &add_module<Conv2d>("down_conv", rng, in_ch, out_ch, 1, stride, 0, 1, 1, false);
        down_bn_ = &add_module<BatchNorm>("down_bn", out_ch);
    }
}

Var Bottleneck::forward(const Var& x) const {
    Var y = conv1_.forward(x);
    y = ibn1_ ? ibn1_->forward(y) : bn1_->forward(y);
    y = relu(y);
    y = relu(bn2_.forward(conv2_.forward(y)));
    y = bn3_.forward(conv3_.forward(y));
    Var skip = down_conv_ ? down_bn_->forward(down_conv_->forward(x)) : x;
    return relu(add(y, skip));
}

Backbone::Backbone(Rng& rng, const BackboneConfig& cfg)
    : cfg_(cfg),
      stem_conv_(add_module<Conv2d>("stem.conv", rng, 3, cfg.stem, 7, 2, 3, 1, 1, false)),
      stem_bn_(add_module<BatchNorm>("stem.bn", cfg.stem)) {
    int in_ch = cfg.stem;
    for (int s = 0; s < 4; ++s) {
        const int out_ch = cfg.stage_channels[static_cast<std::size_t>(s)];
        const int mid_ch = out_ch / 4;
        const int blocks = cfg.blocks_per_stage[static_cast<std::size_t>(s)];
        require(blocks >= 1, "backbone: each stage needs at least one block");
        for (int b = 0; b < blocks; ++b) {
            const int stride = (b == 0 && s > 0) ? 2 : 1;
            // split norm only in the first block of the first three stages
            const bool split = cfg.instance_batch_mix && s < 3 && b == 0;
            const std::string name =
                "stage" + std::to_string(s + 2) + ".block" + std::to_string(b);
            stages_[static_cast<std::size_t>(s)].push_back(
                &add_module<Bottleneck>(name, rng, b == 0 ? in_ch : out_ch, mid_ch, out_ch,
                                        stride, split));
        }
        in_ch = out_ch;
    }
}

StagePyramid Backbone::forward(const Var& images) const {
    require(images.value().ndim() == 4 && images.shape()[1] == 3,
            "backbone: input must be (B,3,H,W)");
    require(images.shape()[2] % 32 == 0 && images.shape()[3] % 32 == 0,
            "backbone: input height/width must be divisible by 32, got " +
                Tensor::shape_str(images.shape()));
    Var x = relu(stem_bn_.forward(stem_conv_.forward(images)));
    x = max_pool2d(x, 3, 2, 1);
    StagePyramid out;
    Var* maps[4] = {&out.c2, &out.c3, &out.c4, &out.c5};
    for (int s = 0; s < 4; ++s) {
        for (const auto* block : stages_[static_cast<std::size_t>(s)]) x = block->forward(x);
        *maps[s] = x;
    }
    return out;
}

}  // namespace mmfl
