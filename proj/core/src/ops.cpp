#include "mmfl/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "mmfl/gemm.hpp"

namespace mmfl {

namespace {

thread_local bool g_mac_enabled = false;
thread_local std::uint64_t g_mac_count = 0;

// Accumulate f(i) into the parent's gradient without a temporary tensor.
template <typename F>
void accum_fn(const std::shared_ptr<Node>& p, std::int64_t n, F f) {
    if (!p || !p->requires_grad) return;
    double* g = p->grad_buffer().data();
    for (std::int64_t i = 0; i < n; ++i) g[i] += f(i);
}

// Flatten trailing dims: interpret tensor as (d0, d1, rest).
std::int64_t trailing_size(const std::vector<int>& s, std::size_t from) {
    std::int64_t n = 1;
    for (std::size_t i = from; i < s.size(); ++i) n *= s[i];
    return n;
}

}  // namespace

void MacCounter::enable(bool on) { g_mac_enabled = on; }
bool MacCounter::enabled() { return g_mac_enabled; }
void MacCounter::add(std::uint64_t macs) {
    if (g_mac_enabled) g_mac_count += macs;
}
std::uint64_t MacCounter::count() { return g_mac_count; }
void MacCounter::reset() { g_mac_count = 0; }

// ---------------------------------------------------------------- elementwise

Var add(const Var& a, const Var& b) {
    require(a.value().same_shape(b.value()),
            "add: shape mismatch " + Tensor::shape_str(a.shape()) + " vs " +
                Tensor::shape_str(b.shape()));
    Tensor out = a.value();
    const double* bd = b.value().data();
    double* od = out.data();
    const std::int64_t n = out.numel();
    for (std::int64_t i = 0; i < n; ++i) od[i] += bd[i];
    auto an = a.node(), bn = b.node();
    return make_op(std::move(out), {an, bn}, [an, bn](Node& nd) {
        accumulate(an, nd.grad);
        accumulate(bn, nd.grad);
    });
}

Var sub(const Var& a, const Var& b) {
    require(a.value().same_shape(b.value()), "sub: shape mismatch");
    Tensor out = a.value();
    const double* bd = b.value().data();
    double* od = out.data();
    const std::int64_t n = out.numel();
    for (std::int64_t i = 0; i < n; ++i) od[i] -= bd[i];
    auto an = a.node(), bn = b.node();
    return make_op(std::move(out), {an, bn}, [an, bn](Node& nd) {
        accumulate(an, nd.grad);
        const double* g = nd.grad.data();
        accum_fn(bn, nd.grad.numel(), [&](std::int64_t i) { return -g[i]; });
    });
}

Var mul(const Var& a, const Var& b) {
    require(a.value().same_shape(b.value()), "mul: shape mismatch");
    const std::int64_t n = a.value().numel();
    Tensor out(a.shape());
    const double* ad = a.value().data();
    const double* bd = b.value().data();
    double* od = out.data();
    for (std::int64_t i = 0; i < n; ++i) od[i] = ad[i] * bd[i];
    auto an = a.node(), bn = b.node();
    return make_op(std::move(out), {an, bn}, [an, bn, n](Node& nd) {
        const double* g = nd.grad.data();
        const double* av = an->value.data();
        const double* bv = bn->value.data();
        accum_fn(an, n, [&](std::int64_t i) { return g[i] * bv[i]; });
        accum_fn(bn, n, [&](std::int64_t i) { return g[i] * av[i]; });
    });
}

Var add_scalar(const Var& a, double s) {
    Tensor out = a.value();
    double* od = out.data();
    const std::int64_t n = out.numel();
    for (std::int64_t i = 0; i < n; ++i) od[i] += s;
    auto an = a.node();
    return make_op(std::move(out), {an}, [an](Node& nd) { accumulate(an, nd.grad); });
}

Var scale(const Var& a, double s) {
    Tensor out = a.value();
    double* od = out.data();
    const std::int64_t n = out.numel();
    for (std::int64_t i = 0; i < n; ++i) od[i] *= s;
    auto an = a.node();
    return make_op(std::move(out), {an}, [an, s](Node& nd) {
        const double* g = nd.grad.data();
        accum_fn(an, nd.grad.numel(), [&](std::int64_t i) { return g[i] * s; });
    });
}

Var relu(const Var& a) {
    Tensor out = a.value();
    double* od = out.data();
    const std::int64_t n = out.numel();
    for (std::int64_t i = 0; i < n; ++i) od[i] = od[i] > 0.0 ? od[i] : 0.0;
    auto an = a.node();
    return make_op(std::move(out), {an}, [an, n](Node& nd) {
        const double* g = nd.grad.data();
        const double* x = an->value.data();
        accum_fn(an, n, [&](std::int64_t i) { return x[i] > 0.0 ? g[i] : 0.0; });
    });
}

Var sigmoid(const Var& a) {
    const std::int64_t n = a.value().numel();
    Tensor out(a.shape());
    const double* x = a.value().data();
    double* od = out.data();
    for (std::int64_t i = 0; i < n; ++i) od[i] = 1.0 / (1.0 + std::exp(-x[i]));
    auto an = a.node();
    return make_op(std::move(out), {an}, [an, n](Node& nd) {
        const double* g = nd.grad.data();
        const double* y = nd.value.data();
        accum_fn(an, n, [&](std::int64_t i) { return g[i] * y[i] * (1.0 - y[i]); });
    });
}

Var swish(const Var& a) {
    const std::int64_t n = a.value().numel();
    Tensor out(a.shape());
    const double* x = a.value().data();
    double* od = out.data();
    for (std::int64_t i = 0; i < n; ++i) od[i] = x[i] / (1.0 + std::exp(-x[i]));
    auto an = a.node();
    return make_op(std::move(out), {an}, [an, n](Node& nd) {
        const double* g = nd.grad.data();
        const double* x2 = an->value.data();
        accum_fn(an, n, [&](std::int64_t i) {
            double s = 1.0 / (1.0 + std::exp(-x2[i]));
            return g[i] * s * (1.0 + x2[i] * (1.0 - s));
        });
    });
}

Var mul_scalarvar(const Var& x, const Var& s) {
    require(s.value().numel() == 1, "mul_scalarvar: scalar operand must have 1 element");
    const double sv = s.value()[0];
    const std::int64_t n = x.value().numel();
    Tensor out = x.value();
    double* od = out.data();
    for (std::int64_t i = 0; i < n; ++i) od[i] *= sv;
    auto xn = x.node(), sn = s.node();
    return make_op(std::move(out), {xn, sn}, [xn, sn, sv, n](Node& nd) {
        const double* g = nd.grad.data();
        accum_fn(xn, n, [&](std::int64_t i) { return g[i] * sv; });
        if (sn && sn->requires_grad) {
            const double* xv = xn->value.data();
            double acc = 0.0;
            for (std::int64_t i = 0; i < n; ++i) acc += g[i] * xv[i];
            sn->grad_buffer()[0] += acc;
        }
    });
}

Var div_scalarvar(const Var& x, const Var& s) {
    require(s.value().numel() == 1, "div_scalarvar: scalar operand must have 1 element");
    const double sv = s.value()[0];
    require(sv != 0.0, "div_scalarvar: division by zero");
    const std::int64_t n = x.value().numel();
    Tensor out = x.value();
    double* od = out.data();
    for (std::int64_t i = 0; i < n; ++i) od[i] /= sv;
    auto xn = x.node(), sn = s.node();
    return make_op(std::move(out), {xn, sn}, [xn, sn, sv, n](Node& nd) {
        const double* g = nd.grad.data();
        const double* y = nd.value.data();
        accum_fn(xn, n, [&](std::int64_t i) { return g[i] / sv; });
        if (sn && sn->requires_grad) {
            double acc = 0.0;
            for (std::int64_t i = 0; i < n; ++i) acc += g[i] * y[i];
            sn->grad_buffer()[0] += -acc / sv;
        }
    });
}

Var add_scalarvars(const std::vector<Var>& xs) {
    require(!xs.empty(), "add_scalarvars: empty input");
    double total = 0.0;
    std::vector<std::shared_ptr<Node>> parents;
    for (const auto& x : xs) {
        require(x.value().numel() == 1, "add_scalarvars: all inputs must be scalars");
        total += x.value()[0];
        parents.push_back(x.node());
    }
    auto ps = parents;
    return make_op(Tensor::scalar(total), std::move(parents), [ps](Node& nd) {
        for (const auto& p : ps)
            if (p && p->requires_grad) p->grad_buffer()[0] += nd.grad[0];
    });
}

// ---------------------------------------------------------------- reductions

Var sum_all(const Var& a) {
    const double* x = a.value().data();
    const std::int64_t n = a.value().numel();
    double s = 0.0;
    for (std::int64_t i = 0; i < n; ++i) s += x[i];
    auto an = a.node();
    return make_op(Tensor::scalar(s), {an}, [an, n](Node& nd) {
        const double g = nd.grad[0];
        accum_fn(an, n, [&](std::int64_t) { return g; });
    });
}

Var mean_all(const Var& a) {
    const std::int64_t n = a.value().numel();
    require(n > 0, "mean_all: empty tensor");
    return scale(sum_all(a), 1.0 / static_cast<double>(n));
}

Var reshape(const Var& a, std::vector<int> shape) {
    Tensor out = a.value().reshaped(std::move(shape));
    auto an = a.node();
    return make_op(std::move(out), {an}, [an](Node& nd) { accumulate(an, nd.grad); });
}

Var flatten2d(const Var& a) {
    require(a.value().ndim() >= 2, "flatten2d: need at least 2 dims");
    int b = a.shape()[0];
    std::int64_t rest = trailing_size(a.shape(), 1);
    return reshape(a, {b, static_cast<int>(rest)});
}

Var concat_dim1(const std::vector<Var>& xs) {
    require(!xs.empty(), "concat_dim1: empty input");
    const auto& s0 = xs[0].shape();
    require(s0.size() >= 2, "concat_dim1: need at least 2 dims");
    int b = s0[0];
    std::int64_t inner = trailing_size(s0, 2);
    int ctotal = 0;
    for (const auto& x : xs) {
        const auto& s = x.shape();
        require(s.size() == s0.size() && s[0] == b && trailing_size(s, 2) == inner,
                "concat_dim1: incompatible shapes");
        ctotal += s[1];
    }
    std::vector<int> oshape = s0;
    oshape[1] = ctotal;
    Tensor out(oshape);
    std::vector<std::shared_ptr<Node>> parents;
    std::vector<int> chans;
    for (const auto& x : xs) {
        parents.push_back(x.node());
        chans.push_back(x.shape()[1]);
    }
    double* od = out.data();
    for (int bi = 0; bi < b; ++bi) {
        std::int64_t off = static_cast<std::int64_t>(bi) * ctotal * inner;
        for (std::size_t k = 0; k < xs.size(); ++k) {
            const double* xd = xs[k].value().data() + static_cast<std::int64_t>(bi) * chans[k] * inner;
            std::copy(xd, xd + static_cast<std::int64_t>(chans[k]) * inner, od + off);
            off += static_cast<std::int64_t>(chans[k]) * inner;
        }
    }
    auto ps = parents;
    return make_op(std::move(out), std::move(parents),
                   [ps, chans, b, inner, ctotal](Node& nd) {
                       const double* g = nd.grad.data();
                       for (int bi = 0; bi < b; ++bi) {
                           std::int64_t off = static_cast<std::int64_t>(bi) * ctotal * inner;
                           for (std::size_t k = 0; k < ps.size(); ++k) {
                               std::int64_t len = static_cast<std::int64_t>(chans[k]) * inner;
                               if (ps[k] && ps[k]->requires_grad) {
                                   double* pg = ps[k]->grad_buffer().data() +
                                                static_cast<std::int64_t>(bi) * len;
                                   for (std::int64_t i = 0; i < len; ++i) pg[i] += g[off + i];
                               }
                               off += len;
                           }
                       }
                   });
}

Var slice_dim1(const Var& x, int c0, int c1) {
    const auto& s = x.shape();
    require(s.size() >= 2, "slice_dim1: need at least 2 dims");
    require(0 <= c0 && c0 < c1 && c1 <= s[1], "slice_dim1: bad channel range");
    int b = s[0], c = s[1], w = c1 - c0;
    std::int64_t inner = trailing_size(s, 2);
    std::vector<int> oshape = s;
    oshape[1] = w;
    Tensor out(oshape);
    const double* xd = x.value().data();
    double* od = out.data();
    for (int bi = 0; bi < b; ++bi) {
        const double* src = xd + (static_cast<std::int64_t>(bi) * c + c0) * inner;
        std::copy(src, src + static_cast<std::int64_t>(w) * inner,
                  od + static_cast<std::int64_t>(bi) * w * inner);
    }
    auto xn = x.node();
    return make_op(std::move(out), {xn}, [xn, b, c, c0, w, inner](Node& nd) {
        if (!xn || !xn->requires_grad) return;
        const double* g = nd.grad.data();
        double* pg = xn->grad_buffer().data();
        for (int bi = 0; bi < b; ++bi) {
            double* dst = pg + (static_cast<std::int64_t>(bi) * c + c0) * inner;
            const double* src = g + static_cast<std::int64_t>(bi) * w * inner;
            for (std::int64_t i = 0; i < static_cast<std::int64_t>(w) * inner; ++i) dst[i] += src[i];
        }
    });
}

// ------------------------------------------------------------- linear algebra

Var matmul(const Var& a, const Var& b) {
    require(a.value().ndim() == 2 && b.value().ndim() == 2, "matmul: need 2-d operands");
    const std::int64_t M = a.shape()[0], K = a.shape()[1], N = b.shape()[1];
    require(b.shape()[0] == K, "matmul: inner dimensions differ");
    Tensor out({static_cast<int>(M), static_cast<int>(N)});
    gemm_nn(M, K, N, a.value().data(), b.value().data(), out.data());
    MacCounter::add(static_cast<std::uint64_t>(M) * K * N);
    auto an = a.node(), bn = b.node();
    return make_op(std::move(out), {an, bn}, [an, bn, M, K, N](Node& nd) {
        const double* g = nd.grad.data();
        if (an && an->requires_grad)
            gemm_nt(M, N, K, g, bn->value.data(), an->grad_buffer().data());
        if (bn && bn->requires_grad)
            gemm_tn(K, M, N, an->value.data(), g, bn->grad_buffer().data());
    });
}

Var linear(const Var& x, const Var& w, const Var& b) {
    require(x.value().ndim() == 2 && w.value().ndim() == 2, "linear: need 2-d x and w");
    const std::int64_t B = x.shape()[0], I = x.shape()[1], O = w.shape()[0];
    require(w.shape()[1] == I, "linear: weight shape " + Tensor::shape_str(w.shape()) +
                                   " does not match input " + Tensor::shape_str(x.shape()));
    Tensor out({static_cast<int>(B), static_cast<int>(O)});
    gemm_nt(B, I, O, x.value().data(), w.value().data(), out.data());
    MacCounter::add(static_cast<std::uint64_t>(B) * I * O);
    if (b.defined()) {
        require(b.value().numel() == O, "linear: bias size mismatch");
        double* od = out.data();
        const double* bd = b.value().data();
        for (std::int64_t i = 0; i < B; ++i)
            for (std::int64_t o = 0; o < O; ++o) od[i * O + o] += bd[o];
    }
    auto xn = x.node(), wn = w.node(), bn = b.defined() ? b.node() : nullptr;
    return make_op(std::move(out), {xn, wn, bn}, [xn, wn, bn, B, I, O](Node& nd) {
        const double* g = nd.grad.data();
        if (xn && xn->requires_grad)
            gemm_nn(B, O, I, g, wn->value.data(), xn->grad_buffer().data());
        if (wn && wn->requires_grad)
            gemm_tn(O, B, I, g, xn->value.data(), wn->grad_buffer().data());
        if (bn && bn->requires_grad) {
            double* bg = bn->grad_buffer().data();
            for (std::int64_t i = 0; i < B; ++i)
                for (std::int64_t o = 0; o < O; ++o) bg[o] += g[i * O + o];
        }
    });
}

// ---------------------------------------------------------------- convolution

namespace {

struct ConvDims {
    int B, Cin, H, W, Cout, k, stride, pad, dil, groups, OH, OW;
    std::int64_t ckk;  // per-group im2col rows
};

ConvDims conv_dims(const Var& x, const Var& w, int stride, int pad, int dil, int groups) {
    require(x.value().ndim() == 4, "conv2d: input must be (B,C,H,W)");
    require(w.value().ndim() == 4, "conv2d: weight must be (Cout,Cin/g,k,k)");
    require(stride >= 1 && dil >= 1 && groups >= 1 && pad >= 0, "conv2d: bad hyperparameters");
    ConvDims d{};
    d.B = x.shape()[0];
    d.Cin = x.shape()[1];
    d.H = x.shape()[2];
    d.W = x.shape()[3];
    d.Cout = w.shape()[0];
    d.k = w.shape()[2];
    require(w.shape()[3] == d.k, "conv2d: only square kernels supported");
    d.stride = stride;
    d.pad = pad;
    d.dil = dil;
    d.groups = groups;
    require(d.Cin % groups == 0 && d.Cout % groups == 0,
            "conv2d: channels not divisible by groups");
    require(w.shape()[1] == d.Cin / groups, "conv2d: weight channel dim mismatch");
    int span = dil * (d.k - 1) + 1;
    d.OH = (d.H + 2 * pad - span) / stride + 1;
    d.OW = (d.W + 2 * pad - span) / stride + 1;
    require(d.OH > 0 && d.OW > 0, "conv2d: output would be empty for input " +
                                      Tensor::shape_str(x.shape()));
    d.ckk = static_cast<std::int64_t>(d.Cin / groups) * d.k * d.k;
    return d;
}

// Fill cols (ckk x OH*OW) for one image and one channel group.
void im2col(const double* x, const ConvDims& d, int cg0, double* cols) {
    const std::int64_t ohw = static_cast<std::int64_t>(d.OH) * d.OW;
    const int cpg = d.Cin / d.groups;
    for (int c = 0; c < cpg; ++c) {
        const double* xc = x + static_cast<std::int64_t>(cg0 + c) * d.H * d.W;
        for (int ki = 0; ki < d.k; ++ki) {
            for (int kj = 0; kj < d.k; ++kj) {
                double* row = cols + ((static_cast<std::int64_t>(c) * d.k + ki) * d.k + kj) * ohw;
                for (int oh = 0; oh < d.OH; ++oh) {
                    int ih = oh * d.stride - d.pad + ki * d.dil;
                    double* out = row + static_cast<std::int64_t>(oh) * d.OW;
                    if (ih < 0 || ih >= d.H) {
                        std::fill(out, out + d.OW, 0.0);
                        continue;
                    }
                    const double* xrow = xc + static_cast<std::int64_t>(ih) * d.W;
                    int iw = -d.pad + kj * d.dil;
                    for (int ow = 0; ow < d.OW; ++ow, iw += d.stride)
                        out[ow] = (iw >= 0 && iw < d.W) ? xrow[iw] : 0.0;
                }
            }
        }
    }
}

// Scatter-add cols gradient back into the input gradient.
void col2im(const double* cols, const ConvDims& d, int cg0, double* dx) {
    const std::int64_t ohw = static_cast<std::int64_t>(d.OH) * d.OW;
    const int cpg = d.Cin / d.groups;
    for (int c = 0; c < cpg; ++c) {
        double* xc = dx + static_cast<std::int64_t>(cg0 + c) * d.H * d.W;
        for (int ki = 0; ki < d.k; ++ki) {
            for (int kj = 0; kj < d.k; ++kj) {
                const double* row = cols + ((static_cast<std::int64_t>(c) * d.k + ki) * d.k + kj) * ohw;
                for (int oh = 0; oh < d.OH; ++oh) {
                    int ih = oh * d.stride - d.pad + ki * d.dil;
                    if (ih < 0 || ih >= d.H) continue;
                    double* xrow = xc + static_cast<std::int64_t>(ih) * d.W;
                    const double* in = row + static_cast<std::int64_t>(oh) * d.OW;
                    int iw = -d.pad + kj * d.dil;
                    for (int ow = 0; ow < d.OW; ++ow, iw += d.stride)
                        if (iw >= 0 && iw < d.W) xrow[iw] += in[ow];
                }
            }
        }
    }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad, int dilation,
           int groups) {
    ConvDims d = conv_dims(x, w, stride, pad, dilation, groups);
    const std::int64_t ohw = static_cast<std::int64_t>(d.OH) * d.OW;
    const int cpg_out = d.Cout / d.groups;
    Tensor out({d.B, d.Cout, d.OH, d.OW});
    std::vector<double> cols(static_cast<std::size_t>(d.ckk * ohw));
    const double* xd = x.value().data();
    const double* wd = w.value().data();
    double* od = out.data();
    for (int bi = 0; bi < d.B; ++bi) {
        const double* xb = xd + static_cast<std::int64_t>(bi) * d.Cin * d.H * d.W;
        double* ob = od + static_cast<std::int64_t>(bi) * d.Cout * ohw;
        for (int g = 0; g < d.groups; ++g) {
            im2col(xb, d, g * (d.Cin / d.groups), cols.data());
            gemm_nn(cpg_out, d.ckk, ohw, wd + static_cast<std::int64_t>(g) * cpg_out * d.ckk,
                    cols.data(), ob + static_cast<std::int64_t>(g) * cpg_out * ohw);
        }
    }
    MacCounter::add(static_cast<std::uint64_t>(d.B) * d.Cout * ohw * d.ckk);
    if (b.defined()) {
        require(b.value().numel() == d.Cout, "conv2d: bias size mismatch");
        const double* bd = b.value().data();
        for (int bi = 0; bi < d.B; ++bi)
            for (int c = 0; c < d.Cout; ++c) {
                double* oc = od + (static_cast<std::int64_t>(bi) * d.Cout + c) * ohw;
                const double bv = bd[c];
                for (std::int64_t i = 0; i < ohw; ++i) oc[i] += bv;
            }
    }
    auto xn = x.node(), wn = w.node(), bn = b.defined() ? b.node() : nullptr;
    return make_op(std::move(out), {xn, wn, bn}, [xn, wn, bn, d](Node& nd) {
        const std::int64_t ohw = static_cast<std::int64_t>(d.OH) * d.OW;
        const int cpg_out = d.Cout / d.groups;
        const double* g = nd.grad.data();
        std::vector<double> cols(static_cast<std::size_t>(d.ckk * ohw));
        std::vector<double> dcols;
        const bool need_dx = xn && xn->requires_grad;
        const bool need_dw = wn && wn->requires_grad;
        if (need_dx) dcols.resize(static_cast<std::size_t>(d.ckk * ohw));
        for (int bi = 0; bi < d.B; ++bi) {
            const double* xb = xn->value.data() + static_cast<std::int64_t>(bi) * d.Cin * d.H * d.W;
            const double* gb = g + static_cast<std::int64_t>(bi) * d.Cout * ohw;
            for (int gi = 0; gi < d.groups; ++gi) {
                const int cg0 = gi * (d.Cin / d.groups);
                const double* gout = gb + static_cast<std::int64_t>(gi) * cpg_out * ohw;
                if (need_dw) {
                    im2col(xb, d, cg0, cols.data());
                    gemm_nt(cpg_out, ohw, d.ckk, gout, cols.data(),
                            wn->grad_buffer().data() +
                                static_cast<std::int64_t>(gi) * cpg_out * d.ckk);
                }
                if (need_dx) {
                    std::fill(dcols.begin(), dcols.end(), 0.0);
                    gemm_tn(d.ckk, cpg_out, ohw,
                            wn->value.data() + static_cast<std::int64_t>(gi) * cpg_out * d.ckk,
                            gout, dcols.data());
                    col2im(dcols.data(), d, cg0,
                           xn->grad_buffer().data() +
                               static_cast<std::int64_t>(bi) * d.Cin * d.H * d.W);
                }
            }
        }
        if (bn && bn->requires_grad) {
            double* bg = bn->grad_buffer().data();
            for (int bi = 0; bi < d.B; ++bi)
                for (int c = 0; c < d.Cout; ++c) {
                    const double* gc = g + (static_cast<std::int64_t>(bi) * d.Cout + c) * ohw;
                    double acc = 0.0;
                    for (std::int64_t i = 0; i < ohw; ++i) acc += gc[i];
                    bg[c] += acc;
                }
        }
    });
}

Var conv1d_channels(const Var& x, const Var& w) {
    require(x.value().ndim() == 2, "conv1d_channels: input must be (B,C)");
    require(w.value().ndim() == 1 && w.value().numel() % 2 == 1,
            "conv1d_channels: kernel must be 1-d with odd length");
    const int B = x.shape()[0], C = x.shape()[1];
    const int k = static_cast<int>(w.value().numel());
    const int h = k / 2;
    Tensor out({B, C});
    const double* xd = x.value().data();
    const double* wd = w.value().data();
    double* od = out.data();
    for (int b = 0; b < B; ++b) {
        const double* xr = xd + static_cast<std::int64_t>(b) * C;
        double* orow = od + static_cast<std::int64_t>(b) * C;
        for (int c = 0; c < C; ++c) {
            double s = 0.0;
            for (int j = 0; j < k; ++j) {
                int i = c + j - h;
                if (i >= 0 && i < C) s += wd[j] * xr[i];
            }
            orow[c] = s;
        }
    }
    MacCounter::add(static_cast<std::uint64_t>(B) * C * k);
    auto xn = x.node(), wn = w.node();
    return make_op(std::move(out), {xn, wn}, [xn, wn, B, C, k, h](Node& nd) {
        const double* g = nd.grad.data();
        if (xn && xn->requires_grad) {
            double* xg = xn->grad_buffer().data();
            const double* wd2 = wn->value.data();
            for (int b = 0; b < B; ++b)
                for (int c = 0; c < C; ++c) {
                    const double gv = g[static_cast<std::int64_t>(b) * C + c];
                    for (int j = 0; j < k; ++j) {
                        int i = c + j - h;
                        if (i >= 0 && i < C) xg[static_cast<std::int64_t>(b) * C + i] += wd2[j] * gv;
                    }
                }
        }
        if (wn && wn->requires_grad) {
            double* wg = wn->grad_buffer().data();
            const double* xd2 = xn->value.data();
            for (int b = 0; b < B; ++b)
                for (int c = 0; c < C; ++c) {
                    const double gv = g[static_cast<std::int64_t>(b) * C + c];
                    for (int j = 0; j < k; ++j) {
                        int i = c + j - h;
                        if (i >= 0 && i < C) wg[j] += gv * xd2[static_cast<std::int64_t>(b) * C + i];
                    }
                }
        }
    });
}

// -------------------------------------------------------------------- pooling

Var max_pool2d(const Var& x, int k, int stride, int pad) {
    require(x.value().ndim() == 4, "max_pool2d: input must be (B,C,H,W)");
    require(pad < k, "max_pool2d: pad must be < kernel");
    const int B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    const int OH = (H + 2 * pad - k) / stride + 1;
    const int OW = (W + 2 * pad - k) / stride + 1;
    require(OH > 0 && OW > 0, "max_pool2d: output would be empty");
    Tensor out({B, C, OH, OW});
    auto argmax = std::make_shared<std::vector<std::int32_t>>(
        static_cast<std::size_t>(B) * C * OH * OW);
    const double* xd = x.value().data();
    double* od = out.data();
    std::int64_t oi = 0;
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
            const double* xc = xd + (static_cast<std::int64_t>(b) * C + c) * H * W;
            for (int oh = 0; oh < OH; ++oh)
                for (int ow = 0; ow < OW; ++ow, ++oi) {
                    double best = -std::numeric_limits<double>::infinity();
                    int bestIdx = -1;
                    for (int i = 0; i < k; ++i) {
                        int ih = oh * stride - pad + i;
                        if (ih < 0 || ih >= H) continue;
                        for (int j = 0; j < k; ++j) {
                            int iw = ow * stride - pad + j;
                            if (iw < 0 || iw >= W) continue;
                            double v = xc[static_cast<std::int64_t>(ih) * W + iw];
                            if (v > best) {
                                best = v;
                                bestIdx = ih * W + iw;
                            }
                        }
                    }
                    od[oi] = best;
                    (*argmax)[static_cast<std::size_t>(oi)] = bestIdx;
                }
        }
    auto xn = x.node();
    const std::int64_t chw = static_cast<std::int64_t>(H) * W;
    const std::int64_t ohw = static_cast<std::int64_t>(OH) * OW;
    return make_op(std::move(out), {xn}, [xn, argmax, B, C, chw, ohw](Node& nd) {
        if (!xn || !xn->requires_grad) return;
        const double* g = nd.grad.data();
        double* xg = xn->grad_buffer().data();
        std::int64_t oi = 0;
        for (int b = 0; b < B; ++b)
            for (int c = 0; c < C; ++c) {
                double* xc = xg + (static_cast<std::int64_t>(b) * C + c) * chw;
                for (std::int64_t i = 0; i < ohw; ++i, ++oi)
                    xc[(*argmax)[static_cast<std::size_t>(oi)]] += g[oi];
            }
    });
}

Var avg_pool2d(const Var& x, int k, int stride) {
    require(x.value().ndim() == 4, "avg_pool2d: input must be (B,C,H,W)");
    const int B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    const int OH = (H - k) / stride + 1;
    const int OW = (W - k) / stride + 1;
    require(OH > 0 && OW > 0, "avg_pool2d: output would be empty");
    Tensor out({B, C, OH, OW});
    const double inv = 1.0 / (static_cast<double>(k) * k);
    const double* xd = x.value().data();
    double* od = out.data();
    std::int64_t oi = 0;
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
            const double* xc = xd + (static_cast<std::int64_t>(b) * C + c) * H * W;
            for (int oh = 0; oh < OH; ++oh)
                for (int ow = 0; ow < OW; ++ow, ++oi) {
                    double s = 0.0;
                    for (int i = 0; i < k; ++i)
                        for (int j = 0; j < k; ++j)
                            s += xc[static_cast<std::int64_t>(oh * stride + i) * W + ow * stride + j];
                    od[oi] = s * inv;
                }
        }
    auto xn = x.node();
    return make_op(std::move(out), {xn}, [xn, B, C, H, W, OH, OW, k, stride, inv](Node& nd) {
        if (!xn || !xn->requires_grad) return;
        const double* g = nd.grad.data();
        double* xg = xn->grad_buffer().data();
        std::int64_t oi = 0;
        for (int b = 0; b < B; ++b)
            for (int c = 0; c < C; ++c) {
                double* xc = xg + (static_cast<std::int64_t>(b) * C + c) * H * W;
                for (int oh = 0; oh < OH; ++oh)
                    for (int ow = 0; ow < OW; ++ow, ++oi) {
                        const double gv = g[oi] * inv;
                        for (int i = 0; i < k; ++i)
                            for (int j = 0; j < k; ++j)
                                xc[static_cast<std::int64_t>(oh * stride + i) * W + ow * stride + j] += gv;
                    }
            }
    });
}

namespace {
inline int adaptive_start(int i, int in, int out) { return (i * in) / out; }
inline int adaptive_end(int i, int in, int out) { return ((i + 1) * in + out - 1) / out; }
}  // namespace

Var adaptive_avg_pool2d(const Var& x, int oh, int ow) {
    require(x.value().ndim() == 4, "adaptive_avg_pool2d: input must be (B,C,H,W)");
    const int B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    require(oh >= 1 && ow >= 1 && oh <= H && ow <= W, "adaptive_avg_pool2d: bad output size");
    Tensor out({B, C, oh, ow});
    const double* xd = x.value().data();
    double* od = out.data();
    std::int64_t oi = 0;
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
            const double* xc = xd + (static_cast<std::int64_t>(b) * C + c) * H * W;
            for (int i = 0; i < oh; ++i) {
                const int h0 = adaptive_start(i, H, oh), h1 = adaptive_end(i, H, oh);
                for (int j = 0; j < ow; ++j, ++oi) {
                    const int w0 = adaptive_start(j, W, ow), w1 = adaptive_end(j, W, ow);
                    double s = 0.0;
                    for (int hh = h0; hh < h1; ++hh)
                        for (int ww = w0; ww < w1; ++ww) s += xc[static_cast<std::int64_t>(hh) * W + ww];
                    od[oi] = s / (static_cast<double>(h1 - h0) * (w1 - w0));
                }
            }
        }
    auto xn = x.node();
    return make_op(std::move(out), {xn}, [xn, B, C, H, W, oh, ow](Node& nd) {
        if (!xn || !xn->requires_grad) return;
        const double* g = nd.grad.data();
        double* xg = xn->grad_buffer().data();
        std::int64_t oi = 0;
        for (int b = 0; b < B; ++b)
            for (int c = 0; c < C; ++c) {
                double* xc = xg + (static_cast<std::int64_t>(b) * C + c) * H * W;
                for (int i = 0; i < oh; ++i) {
                    const int h0 = adaptive_start(i, H, oh), h1 = adaptive_end(i, H, oh);
                    for (int j = 0; j < ow; ++j, ++oi) {
                        const int w0 = adaptive_start(j, W, ow), w1 = adaptive_end(j, W, ow);
                        const double gv = g[oi] / (static_cast<double>(h1 - h0) * (w1 - w0));
                        for (int hh = h0; hh < h1; ++hh)
                            for (int ww = w0; ww < w1; ++ww)
                                xc[static_cast<std::int64_t>(hh) * W + ww] += gv;
                    }
                }
            }
    });
}

Var adaptive_max_pool2d(const Var& x, int oh, int ow) {
    require(x.value().ndim() == 4, "adaptive_max_pool2d: input must be (B,C,H,W)");
    const int B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    require(oh >= 1 && ow >= 1 && oh <= H && ow <= W, "adaptive_max_pool2d: bad output size");
    Tensor out({B, C, oh, ow});
    auto argmax = std::make_shared<std::vector<std::int32_t>>(
        static_cast<std::size_t>(B) * C * oh * ow);
    const double* xd = x.value().data();
    double* od = out.data();
    std::int64_t oi = 0;
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
            const double* xc = xd + (static_cast<std::int64_t>(b) * C + c) * H * W;
            for (int i = 0; i < oh; ++i) {
                const int h0 = adaptive_start(i, H, oh), h1 = adaptive_end(i, H, oh);
                for (int j = 0; j < ow; ++j, ++oi) {
                    const int w0 = adaptive_start(j, W, ow), w1 = adaptive_end(j, W, ow);
                    double best = -std::numeric_limits<double>::infinity();
                    int bestIdx = -1;
                    for (int hh = h0; hh < h1; ++hh)
                        for (int ww = w0; ww < w1; ++ww) {
                            double v = xc[static_cast<std::int64_t>(hh) * W + ww];
                            if (v > best) {
                                best = v;
                                bestIdx = hh * W + ww;
                            }
                        }
                    od[oi] = best;
                    (*argmax)[static_cast<std::size_t>(oi)] = bestIdx;
                }
            }
        }
    auto xn = x.node();
    const std::int64_t chw = static_cast<std::int64_t>(H) * W;
    const std::int64_t ohw = static_cast<std::int64_t>(oh) * ow;
    return make_op(std::move(out), {xn}, [xn, argmax, B, C, chw, ohw](Node& nd) {
        if (!xn || !xn->requires_grad) return;
        const double* g = nd.grad.data();
        double* xg = xn->grad_buffer().data();
        std::int64_t oi = 0;
        for (int b = 0; b < B; ++b)
            for (int c = 0; c < C; ++c) {
                double* xc = xg + (static_cast<std::int64_t>(b) * C + c) * chw;
                for (std::int64_t i = 0; i < ohw; ++i, ++oi)
                    xc[(*argmax)[static_cast<std::size_t>(oi)]] += g[oi];
            }
    });
}

Var global_avg_pool(const Var& x) {
    require(x.value().ndim() == 4, "global_avg_pool: input must be (B,C,H,W)");
    const int B = x.shape()[0], C = x.shape()[1];
    const std::int64_t S = static_cast<std::int64_t>(x.shape()[2]) * x.shape()[3];
    Tensor out({B, C});
    const double* xd = x.value().data();
    double* od = out.data();
    for (std::int64_t bc = 0; bc < static_cast<std::int64_t>(B) * C; ++bc) {
        const double* xc = xd + bc * S;
        double s = 0.0;
        for (std::int64_t i = 0; i < S; ++i) s += xc[i];
        od[bc] = s / static_cast<double>(S);
    }
    auto xn = x.node();
    return make_op(std::move(out), {xn}, [xn, B, C, S](Node& nd) {
        if (!xn || !xn->requires_grad) return;
        const double* g = nd.grad.data();
        double* xg = xn->grad_buffer().data();
        for (std::int64_t bc = 0; bc < static_cast<std::int64_t>(B) * C; ++bc) {
            const double gv = g[bc] / static_cast<double>(S);
            double* xc = xg + bc * S;
            for (std::int64_t i = 0; i < S; ++i) xc[i] += gv;
        }
    });
}

Var global_max_pool(const Var& x) {
    require(x.value().ndim() == 4, "global_max_pool: input must be (B,C,H,W)");
    return reshape(adaptive_max_pool2d(x, 1, 1), {x.shape()[0], x.shape()[1]});
}

Var upsample_nearest2x(const Var& x) {
    require(x.value().ndim() == 4, "upsample_nearest2x: input must be (B,C,H,W)");
    const int B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    Tensor out({B, C, 2 * H, 2 * W});
    const double* xd = x.value().data();
    double* od = out.data();
    for (std::int64_t bc = 0; bc < static_cast<std::int64_t>(B) * C; ++bc) {
        const double* xc = xd + bc * H * W;
        double* oc = od + bc * 4 * H * W;
        for (int h = 0; h < H; ++h) {
            double* r0 = oc + static_cast<std::int64_t>(2 * h) * 2 * W;
            double* r1 = r0 + 2 * W;
            const double* xr = xc + static_cast<std::int64_t>(h) * W;
            for (int w = 0; w < W; ++w) {
                r0[2 * w] = r0[2 * w + 1] = xr[w];
                r1[2 * w] = r1[2 * w + 1] = xr[w];
            }
        }
    }
    auto xn = x.node();
    return make_op(std::move(out), {xn}, [xn, B, C, H, W](Node& nd) {
        if (!xn || !xn->requires_grad) return;
        const double* g = nd.grad.data();
        double* xg = xn->grad_buffer().data();
        for (std::int64_t bc = 0; bc < static_cast<std::int64_t>(B) * C; ++bc) {
            double* xc = xg + bc * H * W;
            const double* gc = g + bc * 4 * H * W;
            for (int h = 0; h < H; ++h) {
                const double* r0 = gc + static_cast<std::int64_t>(2 * h) * 2 * W;
                const double* r1 = r0 + 2 * W;
                double* xr = xc + static_cast<std::int64_t>(h) * W;
                for (int w = 0; w < W; ++w)
                    xr[w] += r0[2 * w] + r0[2 * w + 1] + r1[2 * w] + r1[2 * w + 1];
            }
        }
    });
}

// -------------------------------------------------------------- normalization

namespace {

// Shared normalization backward for groups of n elements sharing one mean/std:
// dx = (e - mean(e) - xhat * mean(e * xhat)) / sigma, with e = dy * gamma.
struct NormStats {
    std::vector<double> mean, inv_std;
};

}  // namespace

Var batch_norm(const Var& x, const Var& gamma, const Var& beta, Tensor& running_mean,
               Tensor& running_var, bool training, double momentum, double eps) {
    const int nd = x.value().ndim();
    require(nd == 2 || nd == 4, "batch_norm: input must be (B,C) or (B,C,H,W)");
    const int B = x.shape()[0], C = x.shape()[1];
    const std::int64_t S = nd == 4 ? static_cast<std::int64_t>(x.shape()[2]) * x.shape()[3] : 1;
    const std::int64_t n = static_cast<std::int64_t>(B) * S;
    require(gamma.value().numel() == C && beta.value().numel() == C,
            "batch_norm: affine parameter size mismatch");
    require(running_mean.numel() == C && running_var.numel() == C,
            "batch_norm: running stat size mismatch");

    auto stats = std::make_shared<NormStats>();
    stats->mean.resize(static_cast<std::size_t>(C));
    stats->inv_std.resize(static_cast<std::size_t>(C));
    const double* xd = x.value().data();
    if (training) {
        require(n > 1, "batch_norm: training needs more than one sample per channel");
        for (int c = 0; c < C; ++c) {
            double m = 0.0;
            for (int b = 0; b < B; ++b) {
                const double* xc = xd + (static_cast<std::int64_t>(b) * C + c) * S;
                for (std::int64_t i = 0; i < S; ++i) m += xc[i];
            }
            m /= static_cast<double>(n);
            double v = 0.0;
            for (int b = 0; b < B; ++b) {
                const double* xc = xd + (static_cast<std::int64_t>(b) * C + c) * S;
                for (std::int64_t i = 0; i < S; ++i) {
                    const double dv = xc[i] - m;
                    v += dv * dv;
                }
            }
            v /= static_cast<double>(n);
            stats->mean[c] = m;
            stats->inv_std[c] = 1.0 / std::sqrt(v + eps);
            const double unbiased = v * static_cast<double>(n) / static_cast<double>(n - 1);
            running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * m;
            running_var[c] = (1.0 - momentum) * running_var[c] + momentum * unbiased;
        }
    } else {
        for (int c = 0; c < C; ++c) {
            stats->mean[c] = running_mean[c];
            stats->inv_std[c] = 1.0 / std::sqrt(running_var[c] + eps);
        }
    }

    Tensor out(x.shape());
    double* od = out.data();
    const double* gd = gamma.value().data();
    const double* bd = beta.value().data();
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
            const double* xc = xd + (static_cast<std::int64_t>(b) * C + c) * S;
            double* oc = od + (static_cast<std::int64_t>(b) * C + c) * S;
            const double m = stats->mean[c], is = stats->inv_std[c], ga = gd[c], be = bd[c];
            for (std::int64_t i = 0; i < S; ++i) oc[i] = ga * (xc[i] - m) * is + be;
        }

    auto xn = x.node(), gn = gamma.node(), bn = beta.node();
    return make_op(std::move(out), {xn, gn, bn},
                   [xn, gn, bn, stats, B, C, S, n, training](Node& ndn) {
                       const double* g = ndn.grad.data();
                       const double* xd2 = xn->value.data();
                       const double* gd2 = gn->value.data();
                       for (int c = 0; c < C; ++c) {
                           const double m = stats->mean[c], is = stats->inv_std[c];
                           double sum_dy = 0.0, sum_dy_xhat = 0.0;
                           for (int b = 0; b < B; ++b) {
                               const double* gc = g + (static_cast<std::int64_t>(b) * C + c) * S;
                               const double* xc = xd2 + (static_cast<std::int64_t>(b) * C + c) * S;
                               for (std::int64_t i = 0; i < S; ++i) {
                                   sum_dy += gc[i];
                                   sum_dy_xhat += gc[i] * (xc[i] - m) * is;
                               }
                           }
                           if (gn && gn->requires_grad) gn->grad_buffer()[c] += sum_dy_xhat;
                           if (bn && bn->requires_grad) bn->grad_buffer()[c] += sum_dy;
                           if (xn && xn->requires_grad) {
                               double* xg = xn->grad_buffer().data();
                               const double ga = gd2[c];
                               if (training) {
                                   const double mean_dy = sum_dy / static_cast<double>(n);
                                   const double mean_dyx = sum_dy_xhat / static_cast<double>(n);
                                   for (int b = 0; b < B; ++b) {
                                       const double* gc = g + (static_cast<std::int64_t>(b) * C + c) * S;
                                       const double* xc = xd2 + (static_cast<std::int64_t>(b) * C + c) * S;
                                       double* xgc = xg + (static_cast<std::int64_t>(b) * C + c) * S;
                                       for (std::int64_t i = 0; i < S; ++i) {
                                           const double xhat = (xc[i] - m) * is;
                                           xgc[i] += ga * is * (gc[i] - mean_dy - xhat * mean_dyx);
                                       }
                                   }
                               } else {
                                   for (int b = 0; b < B; ++b) {
                                       const double* gc = g + (static_cast<std::int64_t>(b) * C + c) * S;
                                       double* xgc = xg + (static_cast<std::int64_t>(b) * C + c) * S;
                                       for (std::int64_t i = 0; i < S; ++i) xgc[i] += ga * is * gc[i];
                                   }
                               }
                           }
                       }
                   });
}

Var instance_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
    require(x.value().ndim() == 4, "instance_norm: input must be (B,C,H,W)");
    const int B = x.shape()[0], C = x.shape()[1];
    const std::int64_t S = static_cast<std::int64_t>(x.shape()[2]) * x.shape()[3];
    require(gamma.value().numel() == C && beta.value().numel() == C,
            "instance_norm: affine parameter size mismatch");
    auto stats = std::make_shared<NormStats>();
    stats->mean.resize(static_cast<std::size_t>(B) * C);
    stats->inv_std.resize(static_cast<std::size_t>(B) * C);
    const double* xd = x.value().data();
    Tensor out(x.shape());
    double* od = out.data();
    const double* gd = gamma.value().data();
    const double* bd = beta.value().data();
    for (std::int64_t bc = 0; bc < static_cast<std::int64_t>(B) * C; ++bc) {
        const double* xc = xd + bc * S;
        double m = 0.0;
        for (std::int64_t i = 0; i < S; ++i) m += xc[i];
        m /= static_cast<double>(S);
        double v = 0.0;
        for (std::int64_t i = 0; i < S; ++i) {
            const double dv = xc[i] - m;
            v += dv * dv;
        }
        v /= static_cast<double>(S);
        const double is = 1.0 / std::sqrt(v + eps);
        stats->mean[static_cast<std::size_t>(bc)] = m;
        stats->inv_std[static_cast<std::size_t>(bc)] = is;
        const int c = static_cast<int>(bc % C);
        double* oc = od + bc * S;
        for (std::int64_t i = 0; i < S; ++i) oc[i] = gd[c] * (xc[i] - m) * is + bd[c];
    }
    auto xn = x.node(), gn = gamma.node(), bn = beta.node();
    return make_op(std::move(out), {xn, gn, bn}, [xn, gn, bn, stats, B, C, S](Node& ndn) {
        const double* g = ndn.grad.data();
        const double* xd2 = xn->value.data();
        const double* gd2 = gn->value.data();
        for (std::int64_t bc = 0; bc < static_cast<std::int64_t>(B) * C; ++bc) {
            const int c = static_cast<int>(bc % C);
            const double m = stats->mean[static_cast<std::size_t>(bc)];
            const double is = stats->inv_std[static_cast<std::size_t>(bc)];
            const double* gc = g + bc * S;
            const double* xc = xd2 + bc * S;
            double sum_dy = 0.0, sum_dy_xhat = 0.0;
            for (std::int64_t i = 0; i < S; ++i) {
                sum_dy += gc[i];
                sum_dy_xhat += gc[i] * (xc[i] - m) * is;
            }
            if (gn && gn->requires_grad) gn->grad_buffer()[c] += sum_dy_xhat;
            if (bn && bn->requires_grad) bn->grad_buffer()[c] += sum_dy;
            if (xn && xn->requires_grad) {
                double* xgc = xn->grad_buffer().data() + bc * S;
                const double ga = gd2[c];
                const double mean_dy = sum_dy / static_cast<double>(S);
                const double mean_dyx = sum_dy_xhat / static_cast<double>(S);
                for (std::int64_t i = 0; i < S; ++i) {
                    const double xhat = (xc[i] - m) * is;
                    xgc[i] += ga * is * (gc[i] - mean_dy - xhat * mean_dyx);
                }
            }
        }
    });
}

Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta, double eps) {
    require(x.value().ndim() == 2, "layer_norm_rows: input must be (N,D)");
    const int N = x.shape()[0], D = x.shape()[1];
    require(gamma.value().numel() == D && beta.value().numel() == D,
            "layer_norm_rows: affine parameter size mismatch");
    auto stats = std::make_shared<NormStats>();
    stats->mean.resize(static_cast<std::size_t>(N));
    stats->inv_std.resize(static_cast<std::size_t>(N));
    const double* xd = x.value().data();
    const double* gd = gamma.value().data();
    const double* bd = beta.value().data();
    Tensor out({N, D});
    double* od = out.data();
    for (int r = 0; r < N; ++r) {
        const double* xr = xd + static_cast<std::int64_t>(r) * D;
        double m = 0.0;
        for (int j = 0; j < D; ++j) m += xr[j];
        m /= D;
        double v = 0.0;
        for (int j = 0; j < D; ++j) {
            const double dv = xr[j] - m;
            v += dv * dv;
        }
        v /= D;
        const double is = 1.0 / std::sqrt(v + eps);
        stats->mean[static_cast<std::size_t>(r)] = m;
        stats->inv_std[static_cast<std::size_t>(r)] = is;
        double* orow = od + static_cast<std::int64_t>(r) * D;
        for (int j = 0; j < D; ++j) orow[j] = gd[j] * (xr[j] - m) * is + bd[j];
    }
    auto xn = x.node(), gn = gamma.node(), bn = beta.node();
    return make_op(std::move(out), {xn, gn, bn}, [xn, gn, bn, stats, N, D](Node& ndn) {
        const double* g = ndn.grad.data();
        const double* xd2 = xn->value.data();
        const double* gd2 = gn->value.data();
        for (int r = 0; r < N; ++r) {
            const double m = stats->mean[static_cast<std::size_t>(r)];
            const double is = stats->inv_std[static_cast<std::size_t>(r)];
            const double* gr = g + static_cast<std::int64_t>(r) * D;
            const double* xr = xd2 + static_cast<std::int64_t>(r) * D;
            double sum_e = 0.0, sum_e_xhat = 0.0;
            for (int j = 0; j < D; ++j) {
                const double e = gr[j] * gd2[j];
                const double xhat = (xr[j] - m) * is;
                sum_e += e;
                sum_e_xhat += e * xhat;
                if (gn && gn->requires_grad) gn->grad_buffer()[j] += gr[j] * xhat;
                if (bn && bn->requires_grad) bn->grad_buffer()[j] += gr[j];
            }
            if (xn && xn->requires_grad) {
                double* xgr = xn->grad_buffer().data() + static_cast<std::int64_t>(r) * D;
                const double mean_e = sum_e / D;
                const double mean_ex = sum_e_xhat / D;
                for (int j = 0; j < D; ++j) {
                    const double e = gr[j] * gd2[j];
                    const double xhat = (xr[j] - m) * is;
                    xgr[j] += is * (e - mean_e - xhat * mean_ex);
                }
            }
        }
    });
}

Var l2_normalize_rows(const Var& x, double eps) {
    require(x.value().ndim() == 2, "l2_normalize_rows: input must be (N,D)");
    const int N = x.shape()[0], D = x.shape()[1];
    auto norms = std::make_shared<std::vector<double>>(static_cast<std::size_t>(N));
    const double* xd = x.value().data();
    Tensor out({N, D});
    double* od = out.data();
    for (int r = 0; r < N; ++r) {
        const double* xr = xd + static_cast<std::int64_t>(r) * D;
        double s = 0.0;
        for (int j = 0; j < D; ++j) s += xr[j] * xr[j];
        double norm = std::sqrt(s);
        if (norm < eps) norm = eps;
        (*norms)[static_cast<std::size_t>(r)] = norm;
        double* orow = od + static_cast<std::int64_t>(r) * D;
        for (int j = 0; j < D; ++j) orow[j] = xr[j] / norm;
    }
    auto xn = x.node();
    return make_op(std::move(out), {xn}, [xn, norms, N, D](Node& ndn) {
        if (!xn || !xn->requires_grad) return;
        const double* g = ndn.grad.data();
        const double* y = ndn.value.data();
        double* xg = xn->grad_buffer().data();
        for (int r = 0; r < N; ++r) {
            const double* gr = g + static_cast<std::int64_t>(r) * D;
            const double* yr = y + static_cast<std::int64_t>(r) * D;
            double dot = 0.0;
            for (int j = 0; j < D; ++j) dot += gr[j] * yr[j];
            const double inv = 1.0 / (*norms)[static_cast<std::size_t>(r)];
            double* xgr = xg + static_cast<std::int64_t>(r) * D;
            for (int j = 0; j < D; ++j) xgr[j] += (gr[j] - yr[j] * dot) * inv;
        }
    });
}

// ------------------------------------------------------------- softmax family

Var softmax_rows(const Var& x) {
    require(x.value().ndim() == 2, "softmax_rows: input must be (N,D)");
    const int N = x.shape()[0], D = x.shape()[1];
    Tensor out({N, D});
    const double* xd = x.value().data();
    double* od = out.data();
    for (int r = 0; r < N; ++r) {
        const double* xr = xd + static_cast<std::int64_t>(r) * D;
        double* orow = od + static_cast<std::int64_t>(r) * D;
        double mx = xr[0];
        for (int j = 1; j < D; ++j) mx = std::max(mx, xr[j]);
        double s = 0.0;
        for (int j = 0; j < D; ++j) {
            orow[j] = std::exp(xr[j] - mx);
            s += orow[j];
        }
        for (int j = 0; j < D; ++j) orow[j] /= s;
    }
    auto xn = x.node();
    return make_op(std::move(out), {xn}, [xn, N, D](Node& ndn) {
        if (!xn || !xn->requires_grad) return;
        const double* g = ndn.grad.data();
        const double* y = ndn.value.data();
        double* xg = xn->grad_buffer().data();
        for (int r = 0; r < N; ++r) {
            const double* gr = g + static_cast<std::int64_t>(r) * D;
            const double* yr = y + static_cast<std::int64_t>(r) * D;
            double dot = 0.0;
            for (int j = 0; j < D; ++j) dot += gr[j] * yr[j];
            double* xgr = xg + static_cast<std::int64_t>(r) * D;
            for (int j = 0; j < D; ++j) xgr[j] += yr[j] * (gr[j] - dot);
        }
    });
}

Var log_softmax_rows(const Var& x) {
    require(x.value().ndim() == 2, "log_softmax_rows: input must be (N,D)");
    const int N = x.shape()[0], D = x.shape()[1];
    Tensor out({N, D});
    const double* xd = x.value().data();
    double* od = out.data();
    for (int r = 0; r < N; ++r) {
        const double* xr = xd + static_cast<std::int64_t>(r) * D;
        double* orow = od + static_cast<std::int64_t>(r) * D;
        double mx = xr[0];
        for (int j = 1; j < D; ++j) mx = std::max(mx, xr[j]);
        double s = 0.0;
        for (int j = 0; j < D; ++j) s += std::exp(xr[j] - mx);
        const double lse = mx + std::log(s);
        for (int j = 0; j < D; ++j) orow[j] = xr[j] - lse;
    }
    auto xn = x.node();
    return make_op(std::move(out), {xn}, [xn, N, D](Node& ndn) {
        if (!xn || !xn->requires_grad) return;
        const double* g = ndn.grad.data();
        const double* y = ndn.value.data();
        double* xg = xn->grad_buffer().data();
        for (int r = 0; r < N; ++r) {
            const double* gr = g + static_cast<std::int64_t>(r) * D;
            const double* yr = y + static_cast<std::int64_t>(r) * D;
            double gsum = 0.0;
            for (int j = 0; j < D; ++j) gsum += gr[j];
            double* xgr = xg + static_cast<std::int64_t>(r) * D;
            for (int j = 0; j < D; ++j) xgr[j] += gr[j] - std::exp(yr[j]) * gsum;
        }
    });
}

// ---------------------------------------------------------- broadcast helpers

Var mul_channel_gate(const Var& x, const Var& g) {
    require(x.value().ndim() == 4 && g.value().ndim() == 2, "mul_channel_gate: need (B,C,H,W) and (B,C)");
    const int B = x.shape()[0], C = x.shape()[1];
    require(g.shape()[0] == B && g.shape()[1] == C, "mul_channel_gate: gate shape mismatch");
    const std::int64_t S = static_cast<std::int64_t>(x.shape()[2]) * x.shape()[3];
    Tensor out(x.shape());
    const double* xd = x.value().data();
    const double* gd = g.value().data();
    double* od = out.data();
    for (std::int64_t bc = 0; bc < static_cast<std::int64_t>(B) * C; ++bc) {
        const double gv = gd[bc];
        const double* xc = xd + bc * S;
        double* oc = od + bc * S;
        for (std::int64_t i = 0; i < S; ++i) oc[i] = xc[i] * gv;
    }
    auto xn = x.node(), gn = g.node();
    return make_op(std::move(out), {xn, gn}, [xn, gn, B, C, S](Node& ndn) {
        const double* gr = ndn.grad.data();
        for (std::int64_t bc = 0; bc < static_cast<std::int64_t>(B) * C; ++bc) {
            const double* gc = gr + bc * S;
            if (xn && xn->requires_grad) {
                const double gv = gn->value.data()[bc];
                double* xgc = xn->grad_buffer().data() + bc * S;
                for (std::int64_t i = 0; i < S; ++i) xgc[i] += gc[i] * gv;
            }
            if (gn && gn->requires_grad) {
                const double* xc = xn->value.data() + bc * S;
                double acc = 0.0;
                for (std::int64_t i = 0; i < S; ++i) acc += gc[i] * xc[i];
                gn->grad_buffer().data()[bc] += acc;
            }
        }
    });
}

Var add_channel_broadcast(const Var& x, const Var& v) {
    require(x.value().ndim() == 4 && v.value().ndim() == 2, "add_channel_broadcast: need (B,C,H,W) and (B,C)");
    const int B = x.shape()[0], C = x.shape()[1];
    require(v.shape()[0] == B && v.shape()[1] == C, "add_channel_broadcast: shape mismatch");
    const std::int64_t S = static_cast<std::int64_t>(x.shape()[2]) * x.shape()[3];
    Tensor out = x.value();
    const double* vd = v.value().data();
    double* od = out.data();
    for (std::int64_t bc = 0; bc < static_cast<std::int64_t>(B) * C; ++bc) {
        const double vv = vd[bc];
        double* oc = od + bc * S;
        for (std::int64_t i = 0; i < S; ++i) oc[i] += vv;
    }
    auto xn = x.node(), vn = v.node();
    return make_op(std::move(out), {xn, vn}, [xn, vn, B, C, S](Node& ndn) {
        const double* g = ndn.grad.data();
        accumulate(xn, ndn.grad);
        if (vn && vn->requires_grad) {
            double* vg = vn->grad_buffer().data();
            for (std::int64_t bc = 0; bc < static_cast<std::int64_t>(B) * C; ++bc) {
                const double* gc = g + bc * S;
                double acc = 0.0;
                for (std::int64_t i = 0; i < S; ++i) acc += gc[i];
                vg[bc] += acc;
            }
        }
    });
}

Var spatial_sum(const Var& x) {
    require(x.value().ndim() == 4, "spatial_sum: input must be (B,C,H,W)");
    const int B = x.shape()[0], C = x.shape()[1];
    const std::int64_t S = static_cast<std::int64_t>(x.shape()[2]) * x.shape()[3];
    Tensor out({B, C});
    const double* xd = x.value().data();
    double* od = out.data();
    for (std::int64_t bc = 0; bc < static_cast<std::int64_t>(B) * C; ++bc) {
        const double* xc = xd + bc * S;
        double s = 0.0;
        for (std::int64_t i = 0; i < S; ++i) s += xc[i];
        od[bc] = s;
    }
    auto xn = x.node();
    return make_op(std::move(out), {xn}, [xn, B, C, S](Node& ndn) {
        if (!xn || !xn->requires_grad) return;
        const double* g = ndn.grad.data();
        double* xg = xn->grad_buffer().data();
        for (std::int64_t bc = 0; bc < static_cast<std::int64_t>(B) * C; ++bc) {
            const double gv = g[bc];
            double* xc = xg + bc * S;
            for (std::int64_t i = 0; i < S; ++i) xc[i] += gv;
        }
    });
}

Var attention_pool(const Var& x, const Var& alpha) {
    require(x.value().ndim() == 4 && alpha.value().ndim() == 2,
            "attention_pool: need (B,C,H,W) and (B,H*W)");
    const int B = x.shape()[0], C = x.shape()[1];
    const std::int64_t S = static_cast<std::int64_t>(x.shape()[2]) * x.shape()[3];
    require(alpha.shape()[0] == B && alpha.shape()[1] == S, "attention_pool: weight shape mismatch");
    Tensor out({B, C});
    const double* xd = x.value().data();
    const double* ad = alpha.value().data();
    double* od = out.data();
    for (int b = 0; b < B; ++b) {
        const double* ab = ad + static_cast<std::int64_t>(b) * S;
        for (int c = 0; c < C; ++c) {
            const double* xc = xd + (static_cast<std::int64_t>(b) * C + c) * S;
            double s = 0.0;
            for (std::int64_t i = 0; i < S; ++i) s += xc[i] * ab[i];
            od[static_cast<std::int64_t>(b) * C + c] = s;
        }
    }
    auto xn = x.node(), an = alpha.node();
    return make_op(std::move(out), {xn, an}, [xn, an, B, C, S](Node& ndn) {
        const double* g = ndn.grad.data();
        for (int b = 0; b < B; ++b) {
            const double* gb = g + static_cast<std::int64_t>(b) * C;
            if (xn && xn->requires_grad) {
                const double* ab = an->value.data() + static_cast<std::int64_t>(b) * S;
                for (int c = 0; c < C; ++c) {
                    double* xgc = xn->grad_buffer().data() + (static_cast<std::int64_t>(b) * C + c) * S;
                    const double gv = gb[c];
                    for (std::int64_t i = 0; i < S; ++i) xgc[i] += gv * ab[i];
                }
            }
            if (an && an->requires_grad) {
                double* ag = an->grad_buffer().data() + static_cast<std::int64_t>(b) * S;
                for (int c = 0; c < C; ++c) {
                    const double* xc = xn->value.data() + (static_cast<std::int64_t>(b) * C + c) * S;
                    const double gv = gb[c];
                    for (std::int64_t i = 0; i < S; ++i) ag[i] += gv * xc[i];
                }
            }
        }
    });
}

Var select_position(const Var& x, int h, int w) {
    require(x.value().ndim() == 4, "select_position: input must be (B,C,H,W)");
    const int B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    require(0 <= h && h < H && 0 <= w && w < W, "select_position: position out of range");
    const std::int64_t S = static_cast<std::int64_t>(H) * W;
    const std::int64_t off = static_cast<std::int64_t>(h) * W + w;
    Tensor out({B, C});
    const double* xd = x.value().data();
    double* od = out.data();
    for (std::int64_t bc = 0; bc < static_cast<std::int64_t>(B) * C; ++bc) od[bc] = xd[bc * S + off];
    auto xn = x.node();
    return make_op(std::move(out), {xn}, [xn, B, C, S, off](Node& nd) {
        if (!xn || !xn->requires_grad) return;
        const double* g = nd.grad.data();
        double* xg = xn->grad_buffer().data();
        for (std::int64_t bc = 0; bc < static_cast<std::int64_t>(B) * C; ++bc)
            xg[bc * S + off] += g[bc];
    });
}

Var local_descriptor_gather(const Var& trunk, const Var& mask,
                            const std::vector<std::vector<int>>& indices) {
    require(trunk.value().ndim() == 4 && mask.value().ndim() == 4,
            "local_descriptor_gather: need (B,C,H,W) inputs");
    const int B = trunk.shape()[0], C = trunk.shape()[1];
    const int H = trunk.shape()[2], W = trunk.shape()[3];
    const int Cm = mask.shape()[1];
    require(mask.shape()[0] == B && mask.shape()[2] == H && mask.shape()[3] == W,
            "local_descriptor_gather: mask spatial shape mismatch");
    require(static_cast<int>(indices.size()) == B, "local_descriptor_gather: indices batch mismatch");
    const int K = static_cast<int>(indices[0].size());
    const std::int64_t S = static_cast<std::int64_t>(H) * W;
    for (const auto& row : indices) {
        require(static_cast<int>(row.size()) == K, "local_descriptor_gather: ragged indices");
        for (int idx : row) require(0 <= idx && idx < Cm, "local_descriptor_gather: index out of range");
    }
    Tensor out({B, K * C});
    const double* td = trunk.value().data();
    const double* md = mask.value().data();
    double* od = out.data();
    const double inv = 1.0 / static_cast<double>(S);
    for (int b = 0; b < B; ++b)
        for (int i = 0; i < K; ++i) {
            const double* mc = md + (static_cast<std::int64_t>(b) * Cm + indices[b][i]) * S;
            for (int c = 0; c < C; ++c) {
                const double* tc = td + (static_cast<std::int64_t>(b) * C + c) * S;
                double s = 0.0;
                for (std::int64_t j = 0; j < S; ++j) s += (1.0 + mc[j]) * tc[j];
                od[(static_cast<std::int64_t>(b) * K + i) * C + c] = s * inv;
            }
        }
    auto tn = trunk.node(), mn = mask.node();
    auto idx = indices;
    return make_op(std::move(out), {tn, mn}, [tn, mn, idx, B, C, Cm, S, K, inv](Node& ndn) {
        const double* g = ndn.grad.data();
        for (int b = 0; b < B; ++b)
            for (int i = 0; i < K; ++i) {
                const double* gr = g + (static_cast<std::int64_t>(b) * K + i) * C;
                const std::int64_t moff = (static_cast<std::int64_t>(b) * Cm + idx[b][i]) * S;
                if (tn && tn->requires_grad) {
                    const double* mc = mn->value.data() + moff;
                    for (int c = 0; c < C; ++c) {
                        double* tg = tn->grad_buffer().data() + (static_cast<std::int64_t>(b) * C + c) * S;
                        const double gv = gr[c] * inv;
                        for (std::int64_t j = 0; j < S; ++j) tg[j] += gv * (1.0 + mc[j]);
                    }
                }
                if (mn && mn->requires_grad) {
                    double* mg = mn->grad_buffer().data() + moff;
                    for (int c = 0; c < C; ++c) {
                        const double* tc = tn->value.data() + (static_cast<std::int64_t>(b) * C + c) * S;
                        const double gv = gr[c] * inv;
                        for (std::int64_t j = 0; j < S; ++j) mg[j] += gv * tc[j];
                    }
                }
            }
    });
}

}  // namespace mmfl
