#include "mmfl/model.hpp"

namespace mmfl {

ModelDims ModelDims::full() { return ModelDims{}; }

ModelDims ModelDims::tiny() {
    ModelDims d;
    d.name = "tiny";
    d.image_size = 64;
    d.backbone.stem = 8;
    d.backbone.stage_channels = {16, 32, 64, 128};
    d.backbone.blocks_per_stage = {1, 1, 1, 1};
    d.pyramid = 32;
    d.bifpn_repeats = 1;
    d.lift = 64;
    d.gc_ratio = 4;
    d.embed = 32;
    d.part_dim = 16;
    d.lras_width = 32;
    d.lras_k = 2;
    d.attr_hidden = 32;
    d.pid_hidden = 32;
    return d;
}

ModelDims ModelDims::preset(const std::string& name) {
    if (name == "full") return full();
    if (name == "tiny") return tiny();
    throw ConfigError("unknown model preset: " + name);
}

SffpConfig ModelDims::sffp_config() const {
    SffpConfig c;
    c.c2 = backbone.stage_channels[0];
    c.c3 = backbone.stage_channels[1];
    c.c4 = backbone.stage_channels[2];
    c.c5 = backbone.stage_channels[3];
    c.width = pyramid;
    c.repeats = bifpn_repeats;
    c.lift = lift;
    c.gc_ratio = gc_ratio;
    return c;
}

BranchConfig ModelDims::branch_config() const {
    BranchConfig c;
    c.in_ch = lift;
    c.embed = embed;
    c.part_dim = part_dim;
    c.lras_width = lras_width;
    c.lras_k = lras_k;
    return c;
}

JarnConfig ModelDims::jarn_config(int num_pids) const {
    JarnConfig c;
    c.branch_dims = {lift, 2 * lift, 2 * lift, lras_k * lras_width};
    c.attr_hidden = attr_hidden;
    c.pid_hidden = pid_hidden;
    c.num_pids = num_pids;
    return c;
}

MmflNet::MmflNet(Rng& rng, const ModelDims& dims, int num_pids, const AttributeSchema& schema)
    : dims_(dims),
      schema_(schema),
      num_pids_(num_pids),
      backbone_(add_module<Backbone>("backbone", rng, dims.backbone)),
      sffp_(add_module<Sffp>("sffp", rng, dims.sffp_config())),
      branches_(add_module<Branches>("branches", rng, dims.branch_config())),
      jarn_(add_module<Jarn>("jarn", rng, dims.jarn_config(num_pids), schema)) {}

ModelOutput MmflNet::forward(const Var& images) const {
    ModelOutput out;
    StagePyramid stages = backbone_.forward(images);
    auto fused = sffp_.forward(stages);
    out.x_g = fused.x_g;
    out.x_part = fused.x_part;
    out.bundle = branches_.forward(out.x_g, out.x_part);
    out.heads = jarn_.forward(
        {out.bundle.z_g, out.bundle.z_ph_flat, out.bundle.z_pv_flat, out.bundle.z_la_flat});
    out.embedding = Jarn::inference_embedding(out.heads, /*normalize=*/true);
    return out;
}

}  // namespace mmfl
