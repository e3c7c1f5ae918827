#pragma once

#include "mmfl/backbone.hpp"
#include "mmfl/branches.hpp"
#include "mmfl/jarn.hpp"
#include "mmfl/sffp.hpp"

namespace mmfl {

// Named size presets for the whole network.
struct ModelDims {
    std::string name = "full";
    int image_size = 320;
    BackboneConfig backbone;
    int pyramid = 256;
    int bifpn_repeats = 2;
    int lift = 512;
    int gc_ratio = 16;
    int embed = 256;
    int part_dim = 128;
    int lras_width = 256;
    int lras_k = 4;
    int attr_hidden = 256;
    int pid_hidden = 768;

    static ModelDims full();
    static ModelDims tiny();
    static ModelDims preset(const std::string& name);

    int metric_dim() const { return 4 * embed; }
    int embedding_dim() const { return 4 * pid_hidden; }
    SffpConfig sffp_config() const;
    BranchConfig branch_config() const;
    JarnConfig jarn_config(int num_pids) const;
};

struct ModelOutput {
    Var x_g, x_part;
    EmbeddingBundle bundle;
    Jarn::Out heads;
    Var embedding;  // (B, 4*pid_hidden), L2-normalized
};

class MmflNet : public Module {
public:
    MmflNet(Rng& rng, const ModelDims& dims, int num_pids,
            const AttributeSchema& schema = AttributeSchema::default_schema());

    ModelOutput forward(const Var& images) const;

    const ModelDims& dims() const { return dims_; }
    const AttributeSchema& schema() const { return schema_; }
    int num_pids() const { return num_pids_; }
    const Backbone& backbone() const { return backbone_; }
    const Sffp& sffp() const { return sffp_; }
    const Branches& branches() const { return branches_; }
    const Jarn& jarn() const { return jarn_; }

private:
    ModelDims dims_;
    AttributeSchema schema_;
    int num_pids_;
    Backbone& backbone_;
    Sffp& sffp_;
    Branches& branches_;
    Jarn& jarn_;
};

}  // namespace mmfl
