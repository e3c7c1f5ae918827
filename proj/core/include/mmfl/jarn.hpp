#pragma once

#include <array>
#include <string>

#include "mmfl/branches.hpp"
#include "mmfl/nn.hpp"

namespace mmfl {

// Attribute taxonomy: named types, each with a fixed closed set of values.
struct AttributeSchema {
    struct Type {
        std::string name;
        std::vector<std::string> values;
    };
    std::vector<Type> types;

    static AttributeSchema default_schema();

    int num_types() const { return static_cast<int>(types.size()); }
    int total_values() const {
        int n = 0;
        for (const auto& t : types) n += static_cast<int>(t.values.size());
        return n;
    }
    int type_index(const std::string& name) const;
};

// Two-layer classifier emitting per-type log-probabilities.
class AttributeHead : public Module {
public:
    AttributeHead(Rng& rng, int in_dim, int hidden, int num_values);
    Var forward(const Var& descriptor) const;  // (B, num_values) log-probs

private:
    Linear &fc1_, &fc2_;
};

// FC -> BN -> classifier; the post-BN hidden vector doubles as the branch's
// contribution to the inference embedding.
class PidHead : public Module {
public:
    PidHead(Rng& rng, int in_dim, int hidden, int num_pids);
    struct Out {
        Var bn_hidden;  // (B, hidden)
        Var logits;     // (B, num_pids)
    };
    Out forward(const Var& descriptor) const;

private:
    Linear &fc_, &cls_;
    BatchNorm& bn_;
};

struct JarnConfig {
    std::array<int, 4> branch_dims{512, 1024, 1024, 1024};  // GF, PHF, PVF, LDF inputs
    int attr_hidden = 256;
    int pid_hidden = 768;
    int num_pids = 0;
};

class JarnBranchHead : public Module {
public:
    JarnBranchHead(Rng& rng, int in_dim, const AttributeSchema& schema, int attr_hidden,
                   int pid_hidden, int num_pids);
    struct Out {
        std::vector<Var> attr_logp;  // one per schema type
        Var bn_hidden;
        Var pid_logits;
    };
    Out forward(const Var& descriptor) const;

private:
    std::vector<AttributeHead*> attr_;
    PidHead& pid_;
};

class Jarn : public Module {
public:
    Jarn(Rng& rng, const JarnConfig& cfg, const AttributeSchema& schema);

    struct Out {
        std::array<JarnBranchHead::Out, 4> branches;  // GF, PHF, PVF, LDF order
    };
    Out forward(const std::array<Var, 4>& descriptors) const;

    // Concatenated post-BN hiddens in fixed branch order, optionally unit-norm.
    static Var inference_embedding(const Out& out, bool normalize = true);

    const JarnConfig& config() const { return cfg_; }

private:
    JarnConfig cfg_;
    std::array<JarnBranchHead*, 4> heads_{};
};

}  // namespace mmfl
