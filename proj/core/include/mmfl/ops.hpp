#pragma once

#include <cstdint>
#include <vector>

#include "mmfl/autograd.hpp"

namespace mmfl {

// Analytic multiply-accumulate counter for conv/linear ops. Enabled only
// while profiling; see report_model_stats.
struct MacCounter {
    static void enable(bool on);
    static bool enabled();
    static void add(std::uint64_t macs);
    static std::uint64_t count();
    static void reset();
};

// ---- elementwise ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var add_scalar(const Var& a, double s);
Var scale(const Var& a, double s);
Var relu(const Var& a);
Var sigmoid(const Var& a);
Var swish(const Var& a);  // x * sigmoid(x)

// Multiply / divide a tensor by a single-element Var (graph-tracked scalar).
Var mul_scalarvar(const Var& x, const Var& s);
Var div_scalarvar(const Var& x, const Var& s);
Var add_scalarvars(const std::vector<Var>& xs);  // sum of 1-element Vars

// ---- reductions / shape ----
Var sum_all(const Var& a);
Var mean_all(const Var& a);
Var reshape(const Var& a, std::vector<int> shape);
Var flatten2d(const Var& a);  // (B, ...) -> (B, prod(rest))
Var concat_dim1(const std::vector<Var>& xs);
Var slice_dim1(const Var& x, int c0, int c1);

// ---- linear algebra ----
Var matmul(const Var& a, const Var& b);                     // (M,K) x (K,N)
Var linear(const Var& x, const Var& w, const Var& b);       // x:(B,I) w:(O,I) b:(O)|undefined

// ---- convolution ----
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad,
           int dilation = 1, int groups = 1);
// Depthwise 1-d conv across the channel axis of (B,C) with odd kernel k,
// zero-padded; w holds the k taps shared by every channel.
Var conv1d_channels(const Var& x, const Var& w);

// ---- pooling / resampling ----
Var max_pool2d(const Var& x, int k, int stride, int pad);
Var avg_pool2d(const Var& x, int k, int stride);
Var adaptive_avg_pool2d(const Var& x, int oh, int ow);
Var adaptive_max_pool2d(const Var& x, int oh, int ow);
Var global_avg_pool(const Var& x);  // (B,C,H,W) -> (B,C)
Var global_max_pool(const Var& x);
Var upsample_nearest2x(const Var& x);

// ---- normalization ----
Var batch_norm(const Var& x, const Var& gamma, const Var& beta, Tensor& running_mean,
               Tensor& running_var, bool training, double momentum, double eps);
Var instance_norm(const Var& x, const Var& gamma, const Var& beta, double eps);
Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta, double eps);
Var l2_normalize_rows(const Var& x, double eps = 1e-12);

// ---- softmax family ----
Var softmax_rows(const Var& x);
Var log_softmax_rows(const Var& x);

// ---- broadcast helpers ----
Var mul_channel_gate(const Var& x, const Var& g);      // (B,C,H,W) * (B,C)
Var add_channel_broadcast(const Var& x, const Var& v); // (B,C,H,W) + (B,C)
Var spatial_sum(const Var& x);                         // (B,C,H,W) -> (B,C)
// context[b,c] = sum_j x[b,c,j] * alpha[b,j], x viewed as (B,C,H*W)
Var attention_pool(const Var& x, const Var& alpha);

// Per selected channel s: out[b, i*C + c] = mean_hw (1 + m[b,idx[b][i]]) * t[b,c]
Var local_descriptor_gather(const Var& trunk, const Var& mask,
                            const std::vector<std::vector<int>>& indices);

// (B,C,H,W) -> (B,C) slice at one spatial position.
Var select_position(const Var& x, int h, int w);

}  // namespace mmfl
