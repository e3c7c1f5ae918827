#include "mmfl/sffp.hpp"

#include <cmath>

namespace mmfl {

Var weighted_fusion(const std::vector<Var>& xs, const Var& raw_weights, double eps) {
    require(!xs.empty(), "weighted_fusion: no inputs");
    const int n = static_cast<int>(xs.size());
    require(raw_weights.value().numel() == n, "weighted_fusion: weight count mismatch");
    for (const auto& x : xs)
        require(x.value().same_shape(xs[0].value()), "weighted_fusion: input shape mismatch");

    const double* wd = raw_weights.value().data();
    std::vector<double> e(static_cast<std::size_t>(n));
    double s = eps;
    for (int i = 0; i < n; ++i) {
        e[static_cast<std::size_t>(i)] = wd[i] > 0.0 ? wd[i] : 0.0;
        s += e[static_cast<std::size_t>(i)];
    }
    const std::int64_t numel = xs[0].value().numel();
    Tensor out(xs[0].shape());
    double* od = out.data();
    for (int i = 0; i < n; ++i) {
        const double c = e[static_cast<std::size_t>(i)] / s;
        if (c == 0.0) continue;
        const double* xd = xs[i].value().data();
        for (std::int64_t j = 0; j < numel; ++j) od[j] += c * xd[j];
    }

    std::vector<std::shared_ptr<Node>> parents;
    for (const auto& x : xs) parents.push_back(x.node());
    auto wn = raw_weights.node();
    parents.push_back(wn);
    auto xp = parents;  // copy without the weight node appended twice
    xp.pop_back();
    return make_op(std::move(out), std::move(parents), [xp, wn, e, s, numel, n](Node& nd) {
        const double* g = nd.grad.data();
        for (int i = 0; i < n; ++i) {
            const double c = e[static_cast<std::size_t>(i)] / s;
            if (xp[static_cast<std::size_t>(i)] && xp[static_cast<std::size_t>(i)]->requires_grad) {
                double* xg = xp[static_cast<std::size_t>(i)]->grad_buffer().data();
                for (std::int64_t j = 0; j < numel; ++j) xg[j] += c * g[j];
            }
        }
        if (wn && wn->requires_grad) {
            // G_i = sum_j g_j * x_i_j; d out/d w_i passes through the relu gate
            // and the shared normalizer: dw_i = (G_i * s - sum_k G_k e_k) / s^2.
            std::vector<double> G(static_cast<std::size_t>(n), 0.0);
            for (int i = 0; i < n; ++i) {
                const double* xd = xp[static_cast<std::size_t>(i)]->value.data();
                double acc = 0.0;
                for (std::int64_t j = 0; j < numel; ++j) acc += g[j] * xd[j];
                G[static_cast<std::size_t>(i)] = acc;
            }
            double dot = 0.0;
            for (int i = 0; i < n; ++i) dot += G[static_cast<std::size_t>(i)] * e[static_cast<std::size_t>(i)];
            double* wg = wn->grad_buffer().data();
            for (int i = 0; i < n; ++i) {
                if (e[static_cast<std::size_t>(i)] == 0.0 && wn->value[i] <= 0.0) continue;
                wg[i] += (G[static_cast<std::size_t>(i)] * s - dot) / (s * s);
            }
        }
    });
}

SeparableConv::SeparableConv(Rng& rng, int ch)
    : dw_(add_module<Conv2d>("dw", rng, ch, ch, 3, 1, 1, 1, ch, false)),
      pw_(add_module<Conv2d>("pw", rng, ch, ch, 1, 1, 0, 1, 1, true)) {}

Var SeparableConv::forward(const Var& x) const { return pw_.forward(dw_.forward(x)); }

FusionNode::FusionNode(Rng& rng, int ch, int n_inputs, double eps)
    : conv_(add_module<SeparableConv>("conv", rng, ch)), eps_(eps) {
    raw_ = add_param("fuse_weights", Tensor::full({n_inputs}, 1.0), /*decay=*/false);
}

Var FusionNode::forward(const std::vector<Var>& xs) const {
    return conv_.forward(swish(weighted_fusion(xs, raw_, eps_)));
}

std::vector<double> FusionNode::effective_weights() const {
    const double* wd = raw_.value().data();
    const int n = static_cast<int>(raw_.value().numel());
    double s = eps_;
    std::vector<double> e(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        e[static_cast<std::size_t>(i)] = wd[i] > 0.0 ? wd[i] : 0.0;
        s += e[static_cast<std::size_t>(i)];
    }
    for (auto& v : e) v /= s;
    return e;
}

BiFpnLayer::BiFpnLayer(Rng& rng, int ch)
    : td4_(add_module<FusionNode>("td4", rng, ch, 2)),
      out3_(add_module<FusionNode>("out3", rng, ch, 2)),
      out4_(add_module<FusionNode>("out4", rng, ch, 3)),
      out5_(add_module<FusionNode>("out5", rng, ch, 2)) {}

PyramidLevels BiFpnLayer::forward(const PyramidLevels& in) const {
    Var td4 = td4_.forward({in.p4, upsample_nearest2x(in.p5)});
    PyramidLevels out;
    out.p3 = out3_.forward({in.p3, upsample_nearest2x(td4)});
    out.p4 = out4_.forward({in.p4, td4, max_pool2d(out.p3, 2, 2, 0)});
    out.p5 = out5_.forward({in.p5, max_pool2d(out.p4, 2, 2, 0)});
    return out;
}

ResolutionFusion::ResolutionFusion(Rng& rng, int ch)
    : conv_(add_module<Conv2d>("conv", rng, ch, ch, 4, 2, 1, 1, 1, true)) {}

Var ResolutionFusion::forward(const Var& x_l, const Var& x_lm1, const Var& x_lm2) const {
    require(x_lm1.shape()[2] == 2 * x_l.shape()[2] && x_lm2.shape()[2] == 2 * x_lm1.shape()[2] &&
                x_lm1.shape()[3] == 2 * x_l.shape()[3] && x_lm2.shape()[3] == 2 * x_lm1.shape()[3],
            "resolution fusion: inputs must be at consecutive 2x scales");
    require(x_l.shape()[1] == x_lm1.shape()[1] && x_l.shape()[1] == x_lm2.shape()[1],
            "resolution fusion: channel counts must match");
    Var inner = add(x_lm1, mul(x_lm1, conv_.forward(x_lm2)));
    Var pooled = avg_pool2d(inner, 2, 2);
    return add(x_l, mul(x_l, pooled));
}

DenseAspp::DenseAspp(Rng& rng, int ch, int growth)
    : d3_(add_module<Conv2d>("d3", rng, ch, growth, 3, 1, 3, 3, 1, true)),
      d5_(add_module<Conv2d>("d5", rng, ch + growth, growth, 3, 1, 5, 5, 1, true)),
      d7_(add_module<Conv2d>("d7", rng, ch + 2 * growth, growth, 3, 1, 7, 7, 1, true)),
      fuse_(add_module<Conv2d>("fuse", rng, ch + 3 * growth, ch, 1, 1, 0, 1, 1, true)) {}

Var DenseAspp::forward(const Var& x) const {
    Var y3 = relu(d3_.forward(x));
    Var y5 = relu(d5_.forward(concat_dim1({x, y3})));
    Var y7 = relu(d7_.forward(concat_dim1({x, y3, y5})));
    return fuse_.forward(concat_dim1({x, y3, y5, y7}));
}

GlobalContext::GlobalContext(Rng& rng, int ch, int ratio)
    : wk_(add_module<Conv2d>("wk", rng, ch, 1, 1, 1, 0, 1, 1, true)),
      v1_(add_module<Linear>("v1", rng, ch, ch / ratio, true)),
      v2_(add_module<Linear>("v2", rng, ch / ratio, ch, true)),
      ln_(add_module<LayerNorm>("ln", ch / ratio)) {
    require(ch % ratio == 0, "global context: channels must be divisible by the ratio");
}

Var GlobalContext::attention(const Var& x) const {
    Var logits = wk_.forward(x);  // (B,1,H,W)
    return softmax_rows(flatten2d(logits));
}

Var GlobalContext::forward(const Var& x) const {
    Var alpha = attention(x);
    Var context = attention_pool(x, alpha);               // (B,C)
    Var v = v2_.forward(ln_.forward(v1_.forward(context)));  // (B,C), no activation
    return add_channel_broadcast(x, v);
}

Sffp::Sffp(Rng& rng, const SffpConfig& cfg)
    : cfg_(cfg),
      lat2_(add_module<Conv2d>("lat2", rng, cfg.c2, cfg.width, 1, 1, 0, 1, 1, true)),
      lat3_(add_module<Conv2d>("lat3", rng, cfg.c3, cfg.width, 1, 1, 0, 1, 1, true)),
      lat4_(add_module<Conv2d>("lat4", rng, cfg.c4, cfg.width, 1, 1, 0, 1, 1, true)),
      lat5_(add_module<Conv2d>("lat5", rng, cfg.c5, cfg.width, 1, 1, 0, 1, 1, true)),
      rfb5_(add_module<ResolutionFusion>("rfb5", rng, cfg.width)),
      rfb4_(add_module<ResolutionFusion>("rfb4", rng, cfg.width)),
      aspp5_(add_module<DenseAspp>("aspp5", rng, cfg.width, cfg.width / 2)),
      aspp4_(add_module<DenseAspp>("aspp4", rng, cfg.width, cfg.width / 2)),
      gc5_(add_module<GlobalContext>("gc5", rng, cfg.width, cfg.gc_ratio)),
      gc4_(add_module<GlobalContext>("gc4", rng, cfg.width, cfg.gc_ratio)),
      lift5_(add_module<ConvBnRelu>("lift5", rng, cfg.width, cfg.lift, 1)),
      lift4_(add_module<ConvBnRelu>("lift4", rng, cfg.width, cfg.lift, 1)) {
    require(cfg.repeats >= 1, "sffp: repeats must be >= 1");
    for (int r = 0; r < cfg.repeats; ++r)
        layers_.push_back(&add_module<BiFpnLayer>("bifpn" + std::to_string(r), rng, cfg.width));
}

PyramidLevels Sffp::lateral_reduce(const StagePyramid& stages) const {
    return {lat3_.forward(stages.c3), lat4_.forward(stages.c4), lat5_.forward(stages.c5)};
}

PyramidLevels Sffp::bifpn(const PyramidLevels& in) const {
    PyramidLevels p = in;
    for (const auto* layer : layers_) p = layer->forward(p);
    return p;
}

Sffp::Out Sffp::forward(const StagePyramid& stages) const {
    PyramidLevels p = bifpn(lateral_reduce(stages));
    Var c2r = lat2_.forward(stages.c2);
    Var f5 = rfb5_.forward(p.p5, p.p4, p.p3);
    Var f4 = rfb4_.forward(p.p4, p.p3, c2r);
    Var g5 = gc5_.forward(aspp5_.forward(f5));
    Var g4 = gc4_.forward(aspp4_.forward(f4));
    return {lift5_.forward(g5), lift4_.forward(g4)};
}

}  // namespace mmfl
