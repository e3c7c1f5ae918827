#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "mmfl/ops.hpp"
#include "mmfl/rng.hpp"

namespace mmfl {

// A parameter reference: the Var plus whether weight decay applies to it.
// Decay is restricted to conv/linear weight matrices; biases, normalization
// affines and fusion-weight scalars are excluded.
struct ParamRef {
    std::string name;
    Var var;
    bool decay = false;
};

struct BufferRef {
    std::string name;
    Tensor* tensor = nullptr;
};

// Base class for all network blocks. Parameters, persistent buffers and child
// modules are registered by name; traversal order is registration order, which
// makes parameter enumeration (and therefore optimizer state and checkpoints)
// deterministic.
class Module {
public:
    virtual ~Module() = default;
    Module() = default;
    Module(const Module&) = delete;
    Module& operator=(const Module&) = delete;

    void set_training(bool on) {
        training_ = on;
        for (auto& [name, child] : children_) child->set_training(on);
    }
    bool training() const { return training_; }

    void collect_parameters(const std::string& prefix, std::vector<ParamRef>& out) const {
        for (const auto& p : params_)
            out.push_back({prefix.empty() ? p.name : prefix + "." + p.name, p.var, p.decay});
        for (const auto& [name, child] : children_)
            child->collect_parameters(prefix.empty() ? name : prefix + "." + name, out);
    }

    void collect_buffers(const std::string& prefix, std::vector<BufferRef>& out) const {
        for (const auto& b : buffers_)
            out.push_back({prefix.empty() ? b.first : prefix + "." + b.first, b.second.get()});
        for (const auto& [name, child] : children_)
            child->collect_buffers(prefix.empty() ? name : prefix + "." + name, out);
    }

    std::vector<ParamRef> parameters() const {
        std::vector<ParamRef> out;
        collect_parameters("", out);
        return out;
    }

    std::vector<BufferRef> buffers() const {
        std::vector<BufferRef> out;
        collect_buffers("", out);
        return out;
    }

    std::int64_t num_parameters() const {
        std::int64_t n = 0;
        for (const auto& p : parameters()) n += p.var.value().numel();
        return n;
    }

    void zero_grad() {
        for (auto& p : parameters()) p.var.zero_grad();
    }

protected:
    Var add_param(const std::string& name, Tensor init, bool decay) {
        Var v(std::move(init), /*requires_grad=*/true);
        params_.push_back({name, v, decay});
        return v;
    }

    Tensor& add_buffer(const std::string& name, Tensor init) {
        buffers_.emplace_back(name, std::make_unique<Tensor>(std::move(init)));
        return *buffers_.back().second;
    }

    template <typename M, typename... Args>
    M& add_module(const std::string& name, Args&&... args) {
        auto m = std::make_unique<M>(std::forward<Args>(args)...);
        M& ref = *m;
        children_.emplace_back(name, std::move(m));
        return ref;
    }

private:
    struct ParamEntry {
        std::string name;
        Var var;
        bool decay;
    };
    bool training_ = true;
    std::vector<ParamEntry> params_;
    std::vector<std::pair<std::string, std::unique_ptr<Tensor>>> buffers_;
    std::vector<std::pair<std::string, std::unique_ptr<Module>>> children_;
};

// He-normal fan-in initialization, the default for all conv/linear weights.
inline Tensor kaiming_normal(Rng& rng, std::vector<int> shape, int fan_in) {
    Tensor t(std::move(shape));
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.normal(0.0, stddev);
    return t;
}

class Conv2d : public Module {
public:
    Conv2d(Rng& rng, int in_ch, int out_ch, int k, int stride = 1, int pad = 0,
           int dilation = 1, int groups = 1, bool bias = true)
        : stride_(stride), pad_(pad), dilation_(dilation), groups_(groups) {
        const int fan_in = (in_ch / groups) * k * k;
        weight_ = add_param("weight", kaiming_normal(rng, {out_ch, in_ch / groups, k, k}, fan_in),
                            /*decay=*/true);
        if (bias) bias_ = add_param("bias", Tensor::zeros({out_ch}), /*decay=*/false);
    }

    Var forward(const Var& x) const {
        return conv2d(x, weight_, bias_, stride_, pad_, dilation_, groups_);
    }

    Var weight() const { return weight_; }

private:
    Var weight_, bias_;
    int stride_, pad_, dilation_, groups_;
};

class Linear : public Module {
public:
    Linear(Rng& rng, int in_dim, int out_dim, bool bias = true) {
        weight_ = add_param("weight", kaiming_normal(rng, {out_dim, in_dim}, in_dim),
                            /*decay=*/true);
        if (bias) bias_ = add_param("bias", Tensor::zeros({out_dim}), /*decay=*/false);
    }

    Var forward(const Var& x) const { return linear(x, weight_, bias_); }

private:
    Var weight_, bias_;
};

// Works on (B,C,H,W) and (B,C); batch statistics in training mode, running
// statistics in eval mode.
class BatchNorm : public Module {
public:
    explicit BatchNorm(int ch, double momentum = 0.1, double eps = 1e-5)
        : momentum_(momentum), eps_(eps) {
        gamma_ = add_param("weight", Tensor::full({ch}, 1.0), /*decay=*/false);
        beta_ = add_param("bias", Tensor::zeros({ch}), /*decay=*/false);
        running_mean_ = &add_buffer("running_mean", Tensor::zeros({ch}));
        running_var_ = &add_buffer("running_var", Tensor::full({ch}, 1.0));
    }

    Var forward(const Var& x) const {
        return batch_norm(x, gamma_, beta_, *running_mean_, *running_var_, training(), momentum_,
                          eps_);
    }

private:
    Var gamma_, beta_;
    Tensor* running_mean_;
    Tensor* running_var_;
    double momentum_, eps_;
};

class InstanceNorm : public Module {
public:
    explicit InstanceNorm(int ch, double eps = 1e-5) : eps_(eps) {
        gamma_ = add_param("weight", Tensor::full({ch}, 1.0), /*decay=*/false);
        beta_ = add_param("bias", Tensor::zeros({ch}), /*decay=*/false);
    }

    Var forward(const Var& x) const { return instance_norm(x, gamma_, beta_, eps_); }

private:
    Var gamma_, beta_;
    double eps_;
};

class LayerNorm : public Module {
public:
    explicit LayerNorm(int dim, double eps = 1e-5) : eps_(eps) {
        gamma_ = add_param("weight", Tensor::full({dim}, 1.0), /*decay=*/false);
        beta_ = add_param("bias", Tensor::zeros({dim}), /*decay=*/false);
    }

    Var forward(const Var& x) const { return layer_norm_rows(x, gamma_, beta_, eps_); }

private:
    Var gamma_, beta_;
    double eps_;
};

// Split-channel normalization: instance norm on the first half of the
// channels, batch norm on the second half, concatenated back together.
class InstanceBatchNorm : public Module {
public:
    explicit InstanceBatchNorm(int ch)
        : half_(ch / 2),
          in_(add_module<InstanceNorm>("instance", ch / 2)),
          bn_(add_module<BatchNorm>("batch", ch - ch / 2)) {
        require(ch >= 2, "InstanceBatchNorm: needs at least 2 channels");
    }

    Var forward(const Var& x) const {
        Var a = in_.forward(slice_dim1(x, 0, half_));
        Var b = bn_.forward(slice_dim1(x, half_, x.shape()[1]));
        return concat_dim1({a, b});
    }

private:
    int half_;
    InstanceNorm& in_;
    BatchNorm& bn_;
};

// conv -> BN -> ReLU, the standard reduction block (conv carries no bias since
// BN absorbs it).
class ConvBnRelu : public Module {
public:
    ConvBnRelu(Rng& rng, int in_ch, int out_ch, int k, int stride = 1, int pad = 0,
               int dilation = 1)
        : conv_(add_module<Conv2d>("conv", rng, in_ch, out_ch, k, stride, pad, dilation, 1,
                                   /*bias=*/false)),
          bn_(add_module<BatchNorm>("bn", out_ch)) {}

    Var forward(const Var& x) const { return relu(bn_.forward(conv_.forward(x))); }

private:
    Conv2d& conv_;
    BatchNorm& bn_;
};

// linear -> BN -> ReLU for flat descriptors.
class LinearBnRelu : public Module {
public:
    LinearBnRelu(Rng& rng, int in_dim, int out_dim)
        : fc_(add_module<Linear>("fc", rng, in_dim, out_dim, /*bias=*/false)),
          bn_(add_module<BatchNorm>("bn", out_dim)) {}

    Var forward(const Var& x) const { return relu(bn_.forward(fc_.forward(x))); }

private:
    Linear& fc_;
    BatchNorm& bn_;
};

}  // namespace mmfl
