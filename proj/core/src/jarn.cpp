#include "mmfl/jarn.hpp"

namespace mmfl {

AttributeSchema AttributeSchema::default_schema() {
    return {{
        {"Slv-Len", {"Short Sleeves", "Sleeveless", "Half Sleeves", "Long Sleeves"}},
        {"Collar", {"Round Collar", "Lapel", "V Collar", "Stand Collar"}},
        {"Fabric", {"Cotton", "Denim", "Leather", "Knit", "Chiffon", "Other"}},
        {"Fitness", {"Slim", "Regular", "Loose", "Oversize"}},
    }};
}

int AttributeSchema::type_index(const std::string& name) const {
    for (std::size_t i = 0; i < types.size(); ++i)
        if (types[i].name == name) return static_cast<int>(i);
    return -1;
}

AttributeHead::AttributeHead(Rng& rng, int in_dim, int hidden, int num_values)
    : fc1_(add_module<Linear>("fc1", rng, in_dim, hidden)),
      fc2_(add_module<Linear>("fc2", rng, hidden, num_values)) {}

Var AttributeHead::forward(const Var& descriptor) const {
    return log_softmax_rows(fc2_.forward(relu(fc1_.forward(descriptor))));
}

PidHead::PidHead(Rng& rng, int in_dim, int hidden, int num_pids)
    : fc_(add_module<Linear>("fc", rng, in_dim, hidden)),
      cls_(add_module<Linear>("cls", rng, hidden, num_pids, /*bias=*/false)),
      bn_(add_module<BatchNorm>("bn", hidden)) {}

PidHead::Out PidHead::forward(const Var& descriptor) const {
    Var hidden = bn_.forward(fc_.forward(descriptor));
    return {hidden, cls_.forward(hidden)};
}

JarnBranchHead::JarnBranchHead(Rng& rng, int in_dim, const AttributeSchema& schema,
                               int attr_hidden, int pid_hidden, int num_pids)
    : pid_(add_module<PidHead>("pid", rng, in_dim, pid_hidden, num_pids)) {
    for (const auto& type : schema.types)
        attr_.push_back(&add_module<AttributeHead>("attr." + type.name, rng, in_dim, attr_hidden,
                                                   static_cast<int>(type.values.size())));
}

JarnBranchHead::Out JarnBranchHead::forward(const Var& descriptor) const {
    Out out;
    for (const auto* head : attr_) out.attr_logp.push_back(head->forward(descriptor));
    auto pid = pid_.forward(descriptor);
    out.bn_hidden = pid.bn_hidden;
    out.pid_logits = pid.logits;
    return out;
}

Jarn::Jarn(Rng& rng, const JarnConfig& cfg, const AttributeSchema& schema) : cfg_(cfg) {
    require(cfg.num_pids >= 1, "jarn: num_pids must be positive");
    static const char* names[4] = {"gf", "phf", "pvf", "ldf"};
    for (int i = 0; i < 4; ++i)
        heads_[static_cast<std::size_t>(i)] = &add_module<JarnBranchHead>(
            names[i], rng, cfg.branch_dims[static_cast<std::size_t>(i)], schema, cfg.attr_hidden,
            cfg.pid_hidden, cfg.num_pids);
}

Jarn::Out Jarn::forward(const std::array<Var, 4>& descriptors) const {
    Out out;
    for (int i = 0; i < 4; ++i)
        out.branches[static_cast<std::size_t>(i)] =
            heads_[static_cast<std::size_t>(i)]->forward(descriptors[static_cast<std::size_t>(i)]);
    return out;
}

Var Jarn::inference_embedding(const Out& out, bool normalize) {
    Var cat = concat_dim1({out.branches[0].bn_hidden, out.branches[1].bn_hidden,
                           out.branches[2].bn_hidden, out.branches[3].bn_hidden});
    return normalize ? l2_normalize_rows(cat) : cat;
}

}  // namespace mmfl
