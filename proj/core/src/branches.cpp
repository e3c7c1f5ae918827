#include "mmfl/branches.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace mmfl {

GlobalBranch::GlobalBranch(Rng& rng, int in_ch, int embed)
    : reduce_(add_module<LinearBnRelu>("reduce", rng, in_ch, embed)) {}

std::pair<Var, Var> GlobalBranch::forward(const Var& x_g) const {
    Var z = add(global_avg_pool(x_g), global_max_pool(x_g));
    return {z, reduce_.forward(z)};
}

PartBranch::PartBranch(Rng& rng, int in_ch, int part_dim, PartAxis axis)
    : axis_(axis),
      red0_(add_module<LinearBnRelu>("reduce0", rng, in_ch, part_dim)),
      red1_(add_module<LinearBnRelu>("reduce1", rng, in_ch, part_dim)) {}

PartBranch::Out PartBranch::forward(const Var& x_part) const {
    const bool horiz = axis_ == PartAxis::horizontal;
    const int axis_len = horiz ? x_part.shape()[2] : x_part.shape()[3];
    require(axis_len >= 2, "part branch: partition axis must have size >= 2");
    const int oh = horiz ? 2 : 1, ow = horiz ? 1 : 2;
    Out out;
    out.z = add(adaptive_avg_pool2d(x_part, oh, ow), adaptive_max_pool2d(x_part, oh, ow));
    out.z_flat = flatten2d(out.z);
    for (int p = 0; p < 2; ++p) {
        Var slice = horiz ? select_position(out.z, p, 0) : select_position(out.z, 0, p);
        out.parts.push_back(p == 0 ? red0_.forward(slice) : red1_.forward(slice));
    }
    out.f_c = concat_dim1(out.parts);
    return out;
}

int EcaGate::kernel_size(int ch) {
    require(ch >= 1, "eca: needs at least one channel");
    const int t = static_cast<int>(std::log2(static_cast<double>(ch)) / 2.0 + 0.5);
    const int k = (t % 2 == 1) ? t : t + 1;
    return std::max(k, 1);
}

EcaGate::EcaGate(Rng& rng, int ch) {
    const int k = kernel_size(ch);
    kernel_ = add_param("kernel", kaiming_normal(rng, {k}, k), /*decay=*/true);
}

Var EcaGate::gate(const Var& x) const {
    return sigmoid(conv1d_channels(global_avg_pool(x), kernel_));
}

Var EcaGate::forward(const Var& x) const { return mul_channel_gate(x, gate(x)); }

ResidualUnit::ResidualUnit(Rng& rng, int ch)
    : c1_(add_module<Conv2d>("conv1", rng, ch, ch, 3, 1, 1, 1, 1, false)),
      c2_(add_module<Conv2d>("conv2", rng, ch, ch, 3, 1, 1, 1, 1, false)),
      b1_(add_module<BatchNorm>("bn1", ch)),
      b2_(add_module<BatchNorm>("bn2", ch)) {}

Var ResidualUnit::forward(const Var& x) const {
    Var y = relu(b1_.forward(c1_.forward(x)));
    y = b2_.forward(c2_.forward(y));
    return relu(add(x, y));
}

LocalBranch::LocalBranch(Rng& rng, int in_ch, int width, int k, int embed)
    : width_(width),
      k_(k),
      reduce_(add_module<ConvBnRelu>("reduce", rng, in_ch, width, 1)),
      trunk_(add_module<ResidualUnit>("trunk", rng, width)),
      mask_res_(add_module<ResidualUnit>("mask_res", rng, width)),
      mask_conv_(add_module<Conv2d>("mask_conv", rng, width, width, 1, 1, 0, 1, 1, true)),
      out_(add_module<LinearBnRelu>("out", rng, k * width, embed)) {
    require(k >= 1 && k <= width, "local branch: K must be in [1, width]");
}

std::vector<int> LocalBranch::top_k(const double* scores, int n, int k) {
    std::vector<int> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [scores](int a, int b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return a < b;
    });
    idx.resize(static_cast<std::size_t>(k));
    return idx;
}

LocalBranch::Out LocalBranch::forward(const Var& x) const {
    Out out;
    Var u = reduce_.forward(x);
    out.trunk = trunk_.forward(u);
    out.mask = sigmoid(mask_conv_.forward(mask_res_.forward(u)));
    out.fused = add(out.trunk, mul(out.mask, out.trunk));

    // accumulated per-channel response of the fused maps (selection only,
    // gradients flow through the gather below)
    const int B = out.fused.shape()[0];
    const std::int64_t S =
        static_cast<std::int64_t>(out.fused.shape()[2]) * out.fused.shape()[3];
    out.scores = Tensor({B, width_});
    const double* fd = out.fused.value().data();
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < width_; ++c) {
            const double* fc = fd + (static_cast<std::int64_t>(b) * width_ + c) * S;
            double s = 0.0;
            for (std::int64_t i = 0; i < S; ++i) s += fc[i];
            out.scores.at(b, c) = s;
        }
    out.indices.reserve(static_cast<std::size_t>(B));
    for (int b = 0; b < B; ++b)
        out.indices.push_back(top_k(out.scores.data() + static_cast<std::int64_t>(b) * width_,
                                    width_, k_));

    out.z_flat = local_descriptor_gather(out.trunk, out.mask, out.indices);
    out.f_la = out_.forward(out.z_flat);
    return out;
}

Branches::Branches(Rng& rng, const BranchConfig& cfg)
    : cfg_(cfg),
      gf_(add_module<GlobalBranch>("gf", rng, cfg.in_ch, cfg.embed)),
      ph_(add_module<PartBranch>("phf", rng, cfg.in_ch, cfg.part_dim, PartAxis::horizontal)),
      pv_(add_module<PartBranch>("pvf", rng, cfg.in_ch, cfg.part_dim, PartAxis::vertical)),
      eca_(add_module<EcaGate>("eca", rng, cfg.in_ch)),
      ldf_(add_module<LocalBranch>("ldf", rng, cfg.in_ch, cfg.lras_width, cfg.lras_k, cfg.embed)) {
    require(2 * cfg.part_dim == cfg.embed,
            "branches: part_dim must be embed/2 so part concats match embeddings");
}

EmbeddingBundle Branches::forward(const Var& x_g, const Var& x_part) const {
    EmbeddingBundle b;
    std::tie(b.z_g, b.f_g) = gf_.forward(x_g);
    auto ph = ph_.forward(x_part);
    b.z_ph = ph.z;
    b.z_ph_flat = ph.z_flat;
    b.f_ph_parts = ph.parts;
    b.f_ph_c = ph.f_c;
    auto pv = pv_.forward(x_part);
    b.z_pv = pv.z;
    b.z_pv_flat = pv.z_flat;
    b.f_pv_parts = pv.parts;
    b.f_pv_c = pv.f_c;
    auto la = ldf_.forward(eca_.forward(x_part));
    b.z_la_flat = la.z_flat;
    b.f_la = la.f_la;
    b.lras_indices = std::move(la.indices);
    b.lras_scores = std::move(la.scores);
    b.f_metric = concat_dim1({b.f_g, b.f_ph_c, b.f_pv_c, b.f_la});
    return b;
}

}  // namespace mmfl
