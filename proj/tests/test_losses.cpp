#include <cmath>
#include <vector>

#include "doctest.h"
#include "grad_check.hpp"
#include "mmfl/losses.hpp"
#include "mmfl/ops.hpp"
#include "mmfl/rng.hpp"

using namespace mmfl;
using mmfl_test::grad_check;

namespace {

Tensor random_tensor(Rng& rng, std::vector<int> shape, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

Var random_var(Rng& rng, std::vector<int> shape, double lo = -1.0, double hi = 1.0) {
    return Var(random_tensor(rng, std::move(shape), lo, hi), true);
}

double euclid(const Tensor& f, int i, int j) {
    double s = 0.0;
    for (int k = 0; k < f.dim(1); ++k) {
        const double d = f.at(i, k) - f.at(j, k);
        s += d * d;
    }
    return std::sqrt(s);
}

// Literal batch-hard oracle: per anchor, farthest same-pid row and nearest
// other-pid row by full pairwise scan, hinge at the margin, summed.
double trihard_oracle(const Tensor& f, const std::vector<int>& pids, double margin) {
    const int B = f.dim(0);
    double total = 0.0;
    for (int i = 0; i < B; ++i) {
        double dp = -1.0, dn = -1.0;
        for (int j = 0; j < B; ++j) {
            if (j == i) continue;
            const double d = euclid(f, i, j);
            if (pids[j] == pids[i])
                dp = std::max(dp, d);
            else
                dn = dn < 0.0 ? d : std::min(dn, d);
        }
        total += std::max(0.0, dp - dn + margin);
    }
    return total;
}

// Row-wise log-softmax computed independently of the library op.
std::vector<double> logsoftmax_row(const Tensor& z, int row) {
    const int K = z.dim(1);
    double zmax = z.at(row, 0);
    for (int k = 1; k < K; ++k) zmax = std::max(zmax, z.at(row, k));
    double lse = 0.0;
    for (int k = 0; k < K; ++k) lse += std::exp(z.at(row, k) - zmax);
    lse = std::log(lse) + zmax;
    std::vector<double> lp(static_cast<std::size_t>(K));
    for (int k = 0; k < K; ++k) lp[static_cast<std::size_t>(k)] = z.at(row, k) - lse;
    return lp;
}

// PK batch layout used throughout: `groups` classes, `per` rows each.
std::vector<int> pk_pids(int groups, int per) {
    std::vector<int> pids;
    for (int g = 0; g < groups; ++g)
        for (int s = 0; s < per; ++s) pids.push_back(g);
    return pids;
}

}  // namespace

TEST_CASE("trihard: identical features give one margin per anchor") {
    // Every distance is zero, so each of the 4 anchors contributes exactly m.
    Tensor f({4, 3});
    for (std::int64_t i = 0; i < f.numel(); ++i) f[i] = 0.7;
    const Var loss = trihard_loss(Var(f), pk_pids(2, 2), 0.3);
    CHECK(loss.value()[0] == doctest::Approx(1.2).epsilon(1e-12));
}

TEST_CASE("trihard: well-separated clusters satisfy the margin") {
    // Two tight clusters 10 apart: dp ~ 0, dn ~ 10, hinge inactive everywhere.
    Rng rng(11);
    Tensor f({6, 4});
    for (int i = 0; i < 6; ++i)
        for (int k = 0; k < 4; ++k) f.at(i, k) = (i < 3 ? 0.0 : 10.0) + rng.uniform(-0.1, 0.1);
    const Var loss = trihard_loss(Var(f), pk_pids(2, 3), 0.3);
    CHECK(loss.value()[0] == 0.0);
}

TEST_CASE("trihard: matches brute-force oracle on random batches") {
    Rng rng(23);
    for (int trial = 0; trial < 100; ++trial) {
        const Tensor f = random_tensor(rng, {6, 8}, -2.0, 2.0);
        const auto pids = pk_pids(3, 2);
        const Var loss = trihard_loss(Var(f), pids, 0.3);
        CHECK(std::abs(loss.value()[0] - trihard_oracle(f, pids, 0.3)) <= 1e-6);
    }
}

TEST_CASE("trihard: zero exactly when every anchor margin is satisfied") {
    Rng rng(37);
    int zeros = 0;
    for (int trial = 0; trial < 200; ++trial) {
        // Two clusters with sweep-varying spread so both outcomes occur.
        const double spread = rng.uniform(0.02, 1.5);
        Tensor f({6, 4});
        for (int i = 0; i < 6; ++i)
            for (int k = 0; k < 4; ++k)
                f.at(i, k) = (i < 3 ? -1.0 : 1.0) + rng.uniform(-spread, spread);
        const auto pids = pk_pids(2, 3);
        const double loss = trihard_loss(Var(f), pids, 0.3).value()[0];
        bool all_satisfied = true;
        for (int i = 0; i < 6; ++i) {
            double dp = -1.0, dn = -1.0;
            for (int j = 0; j < 6; ++j) {
                if (j == i) continue;
                const double d = euclid(f, i, j);
                if (pids[j] == pids[i])
                    dp = std::max(dp, d);
                else
                    dn = dn < 0.0 ? d : std::min(dn, d);
            }
            if (dp - dn + 0.3 > 0.0) all_satisfied = false;
        }
        CHECK((loss == 0.0) == all_satisfied);
        if (loss == 0.0) ++zeros;
    }
    CHECK(zeros > 0);  // the sweep must exercise both sides
    CHECK(zeros < 200);
}

TEST_CASE("trihard: input validation") {
    Rng rng(5);
    const Tensor f = random_tensor(rng, {4, 3});
    CHECK_THROWS_AS(trihard_loss(Var(f), {1, 1, 1, 1}, 0.3), ShapeError);     // one class
    CHECK_THROWS_AS(trihard_loss(Var(f), {0, 0, 1, 2}, 0.3), ShapeError);     // lone anchors
    CHECK_THROWS_AS(trihard_loss(Var(f), {0, 0, 1}, 0.3), ShapeError);        // pid count
    CHECK_THROWS_AS(trihard_loss(Var(f), {0, 0, 1, 1}, -0.1), ShapeError);    // margin
    CHECK_THROWS_AS(trihard_loss(Var(random_tensor(rng, {4, 3, 2})), {0, 0, 1, 1}, 0.3),
                    ShapeError);
}

TEST_CASE("trihard: invariant to positive scaling after row normalization") {
    Rng rng(41);
    const Tensor f = random_tensor(rng, {6, 8}, -2.0, 2.0);
    const auto pids = pk_pids(3, 2);
    const double base = trihard_loss(l2_normalize_rows(Var(f)), pids, 0.3).value()[0];
    for (double c : {0.1, 3.0, 1000.0}) {
        Tensor g = f;
        for (std::int64_t i = 0; i < g.numel(); ++i) g[i] *= c;
        const double scaled = trihard_loss(l2_normalize_rows(Var(g)), pids, 0.3).value()[0];
        CHECK(std::abs(scaled - base) <= 1e-12);
    }
}

TEST_CASE("trihard: gradient check") {
    Rng rng(53);
    Var f = random_var(rng, {6, 4}, -1.0, 1.0);
    grad_check([&] { return trihard_loss(f, pk_pids(3, 2), 0.3); }, {f}, 1e-5);
}

TEST_CASE("center: zero when features sit on their centers") {
    Rng rng(7);
    const Tensor c = random_tensor(rng, {3, 5});
    Tensor f({4, 5});
    const std::vector<int> pids{2, 0, 2, 1};
    for (int i = 0; i < 4; ++i)
        for (int k = 0; k < 5; ++k) f.at(i, k) = c.at(pids[static_cast<std::size_t>(i)], k);
    CHECK(center_loss(Var(f), pids, Var(c)).value()[0] == 0.0);
}

TEST_CASE("center: half squared distance to the assigned center") {
    Tensor f({1, 2});
    f.at(0, 0) = 3.0;
    f.at(0, 1) = 4.0;
    const Tensor c = Tensor::zeros({1, 2});
    CHECK(center_loss(Var(f), {0}, Var(c)).value()[0] == doctest::Approx(12.5).epsilon(1e-12));
}

TEST_CASE("center: matches direct oracle on random batches") {
    Rng rng(61);
    for (int trial = 0; trial < 50; ++trial) {
        const Tensor f = random_tensor(rng, {5, 6}, -2.0, 2.0);
        const Tensor c = random_tensor(rng, {4, 6}, -2.0, 2.0);
        std::vector<int> pids;
        for (int i = 0; i < 5; ++i) pids.push_back(rng.uniform_int(0, 3));
        double expect = 0.0;
        for (int i = 0; i < 5; ++i)
            for (int k = 0; k < 6; ++k) {
                const double d = f.at(i, k) - c.at(pids[static_cast<std::size_t>(i)], k);
                expect += 0.5 * d * d;
            }
        CHECK(std::abs(center_loss(Var(f), pids, Var(c)).value()[0] - expect) <= 1e-6);
    }
}

TEST_CASE("center: rejects a pid without a center row") {
    Rng rng(3);
    const Var f = Var(random_tensor(rng, {2, 4}));
    const Var c = Var(random_tensor(rng, {3, 4}));
    CHECK_THROWS_AS(center_loss(f, {0, 3}, c), ShapeError);
    CHECK_THROWS_AS(center_loss(f, {-1, 0}, c), ShapeError);
    CHECK_THROWS_AS(center_loss(f, {0}, c), ShapeError);
    CHECK_THROWS_AS(center_loss(f, {0, 1}, Var(random_tensor(rng, {3, 5}))), ShapeError);
}

TEST_CASE("center: gradient check for features and centers") {
    Rng rng(67);
    Var f = random_var(rng, {4, 5});
    Var c = random_var(rng, {3, 5});
    grad_check([&] { return center_loss(f, {1, 0, 2, 1}, c); }, {f, c}, 1e-5);
}

TEST_CASE("lsr: smoothed target distribution against hand-built oracle") {
    // K=4, eps=0.1 puts 0.925 on the target value and 0.025 elsewhere.
    Rng rng(71);
    const Tensor z = random_tensor(rng, {2, 4}, -2.0, 2.0);
    const std::vector<int> targets{2, 0};
    double expect = 0.0;
    for (int i = 0; i < 2; ++i) {
        const auto lp = logsoftmax_row(z, i);
        for (int k = 0; k < 4; ++k) {
            const double q = k == targets[static_cast<std::size_t>(i)] ? 0.925 : 0.025;
            expect -= q * lp[static_cast<std::size_t>(k)];
        }
    }
    expect /= 2.0;
    CHECK(lsr_loss(Var(z), targets, 0.1).value()[0] == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("lsr: uniform logits cost log K for any smoothing") {
    Tensor z({3, 5});
    for (std::int64_t i = 0; i < z.numel(); ++i) z[i] = 1.7;
    for (double eps : {0.0, 0.1, 0.5, 0.9}) {
        const double loss = lsr_loss(Var(z), {0, 2, 4}, eps).value()[0];
        CHECK(loss == doctest::Approx(std::log(5.0)).epsilon(1e-12));
    }
}

TEST_CASE("lsr: equals the smoothed mixture of target and uniform cross-entropy") {
    Rng rng(73);
    for (int trial = 0; trial < 1000; ++trial) {
        const int K = rng.uniform_int(2, 7);
        const Tensor z = random_tensor(rng, {1, K}, -3.0, 3.0);
        const int t = rng.uniform_int(0, K - 1);
        const double eps = rng.uniform(0.0, 0.9);
        const auto lp = logsoftmax_row(z, 0);
        double uniform = 0.0;
        for (int k = 0; k < K; ++k) uniform -= lp[static_cast<std::size_t>(k)] / K;
        const double expect =
            (1.0 - eps) * -lp[static_cast<std::size_t>(t)] + eps * uniform;
        CHECK(std::abs(lsr_loss(Var(z), {t}, eps).value()[0] - expect) <= 1e-6);
    }
}

TEST_CASE("lsr: masked rows are excluded from the mean") {
    Rng rng(79);
    const Tensor z = random_tensor(rng, {3, 4}, -2.0, 2.0);
    Tensor kept({2, 4});
    for (int k = 0; k < 4; ++k) {
        kept.at(0, k) = z.at(0, k);
        kept.at(1, k) = z.at(2, k);
    }
    const double masked = lsr_loss(Var(z), {1, -1, 3}, 0.1).value()[0];
    const double direct = lsr_loss(Var(kept), {1, 3}, 0.1).value()[0];
    CHECK(masked == doctest::Approx(direct).epsilon(1e-12));
}

TEST_CASE("lsr: fully masked batch yields a detached zero") {
    Rng rng(83);
    Var z = random_var(rng, {2, 4});
    const Var loss = lsr_loss(z, {-1, -1}, 0.1);
    CHECK(loss.value()[0] == 0.0);
    CHECK_FALSE(loss.node()->requires_grad);
}

TEST_CASE("lsr: input validation") {
    Rng rng(2);
    const Var z = Var(random_tensor(rng, {2, 4}));
    CHECK_THROWS_AS(lsr_loss(z, {0, 4}, 0.1), ShapeError);       // target out of range
    CHECK_THROWS_AS(lsr_loss(z, {0, -2}, 0.1), ShapeError);      // bad sentinel
    CHECK_THROWS_AS(lsr_loss(z, {0}, 0.1), ShapeError);          // target count
    CHECK_THROWS_AS(lsr_loss(z, {0, 1}, 1.0), ShapeError);       // smoothing range
    CHECK_THROWS_AS(lsr_loss(z, {0, 1}, -0.1), ShapeError);
    CHECK_THROWS_AS(lsr_loss(Var(random_tensor(rng, {2, 1})), {0, 0}, 0.1), ShapeError);
}

TEST_CASE("lsr: gradient check") {
    Rng rng(89);
    Var z = random_var(rng, {3, 5}, -2.0, 2.0);
    grad_check([&] { return lsr_loss(z, {4, -1, 0}, 0.1); }, {z}, 1e-5);
}

TEST_CASE("ce: a dominant logit drives the loss to zero") {
    Tensor z({1, 3});
    z.at(0, 0) = 30.0;
    z.at(0, 1) = 0.0;
    z.at(0, 2) = 0.0;
    CHECK(ce_loss(Var(z), {0}).value()[0] < 1e-12);
}

TEST_CASE("ce: uniform logits cost log K") {
    Tensor z = Tensor::zeros({2, 6});
    CHECK(ce_loss(Var(z), {0, 5}).value()[0] == doctest::Approx(std::log(6.0)).epsilon(1e-12));
}

TEST_CASE("ce: equals label smoothing with zero smoothing") {
    Rng rng(97);
    for (int trial = 0; trial < 100; ++trial) {
        const Tensor z = random_tensor(rng, {4, 5}, -3.0, 3.0);
        std::vector<int> targets;
        for (int i = 0; i < 4; ++i) targets.push_back(rng.uniform_int(0, 4));
        const double a = ce_loss(Var(z), targets).value()[0];
        const double b = lsr_loss(Var(z), targets, 0.0).value()[0];
        CHECK(std::abs(a - b) <= 1e-9);
    }
}

TEST_CASE("ce: input validation") {
    Rng rng(13);
    const Var z = Var(random_tensor(rng, {2, 4}));
    CHECK_THROWS_AS(ce_loss(z, {0, 4}), ShapeError);
    CHECK_THROWS_AS(ce_loss(z, {0, -1}), ShapeError);  // no masking in plain ce
    CHECK_THROWS_AS(ce_loss(z, {0}), ShapeError);
}

TEST_CASE("ce: gradient check") {
    Rng rng(101);
    Var z = random_var(rng, {3, 4}, -2.0, 2.0);
    grad_check([&] { return ce_loss(z, {1, 3, 0}); }, {z}, 1e-5);
}

TEST_CASE("lsr: idempotent over log-softmax inputs") {
    // Attribute heads emit log-probabilities; renormalizing them inside the
    // loss must change neither the value nor the gradient.
    Rng rng(103);
    const Tensor z = random_tensor(rng, {3, 5}, -2.0, 2.0);
    const std::vector<int> targets{0, 4, 2};

    Var raw(z, true);
    Var direct = lsr_loss(raw, targets, 0.1);
    direct.backward();
    const Tensor g_direct = raw.grad();

    Var raw2(z, true);
    Var through = lsr_loss(log_softmax_rows(raw2), targets, 0.1);
    through.backward();

    CHECK(std::abs(direct.value()[0] - through.value()[0]) <= 1e-12);
    for (std::int64_t i = 0; i < g_direct.numel(); ++i)
        CHECK(std::abs(g_direct[i] - raw2.grad()[i]) <= 1e-12);
}

TEST_CASE("total: literal weighted combination") {
    // Unit components with default weights: 1 + 1 + 1.5*1 + 0.0005*1.
    Tensor one({1});
    one[0] = 1.0;
    const TotalLoss t =
        total_loss(Var(one), Var(one), Var(one), Var(one), LossWeights{});
    CHECK(t.value.value()[0] == doctest::Approx(3.5005).epsilon(1e-12));
    CHECK(t.report.lsr == 1.0);
    CHECK(t.report.ce == 1.0);
    CHECK(t.report.triplet == 1.0);
    CHECK(t.report.center == 1.0);
    CHECK(t.report.total == doctest::Approx(3.5005).epsilon(1e-12));
}

TEST_CASE("total: zero metric weights reduce to the classification terms") {
    Rng rng(107);
    Tensor a({1}), b({1}), c({1}), d({1});
    a[0] = rng.uniform(0.0, 2.0);
    b[0] = rng.uniform(0.0, 2.0);
    c[0] = rng.uniform(0.0, 2.0);
    d[0] = rng.uniform(0.0, 2.0);
    LossWeights w;
    w.gamma_triplet = 0.0;
    w.beta_center = 0.0;
    const TotalLoss t = total_loss(Var(a), Var(b), Var(c), Var(d), w);
    CHECK(t.value.value()[0] == doctest::Approx(a[0] + b[0]).epsilon(1e-12));
}

TEST_CASE("total: gradient check through the composed objective") {
    Rng rng(109);
    Var f = random_var(rng, {6, 4}, -1.0, 1.0);
    Var centers = random_var(rng, {3, 4});
    Var logits = random_var(rng, {6, 5}, -2.0, 2.0);
    const auto pids = pk_pids(3, 2);
    const std::vector<int> targets{1, 0, 4, 2, 3, 1};
    auto fn = [&] {
        return total_loss(lsr_loss(logits, targets, 0.1), ce_loss(logits, targets),
                          trihard_loss(f, pids, 0.3), center_loss(f, pids, centers),
                          LossWeights{})
            .value;
    };
    grad_check(fn, {f, centers, logits}, 1e-5);
}

TEST_CASE("losses are non-negative on random inputs") {
    Rng rng(113);
    for (int trial = 0; trial < 50; ++trial) {
        const Tensor f = random_tensor(rng, {4, 6}, -2.0, 2.0);
        const Tensor c = random_tensor(rng, {2, 6}, -2.0, 2.0);
        const Tensor z = random_tensor(rng, {4, 5}, -3.0, 3.0);
        const auto pids = pk_pids(2, 2);
        std::vector<int> targets;
        for (int i = 0; i < 4; ++i) targets.push_back(rng.uniform_int(0, 4));
        CHECK(trihard_loss(Var(f), pids, 0.3).value()[0] >= 0.0);
        CHECK(center_loss(Var(f), pids, Var(c)).value()[0] >= 0.0);
        CHECK(lsr_loss(Var(z), targets, 0.1).value()[0] >= 0.0);
        CHECK(ce_loss(Var(z), targets).value()[0] >= 0.0);
    }
}

TEST_CASE("attribute loss: mean of per-branch per-type smoothed terms") {
    Rng rng(127);
    const AttributeSchema schema = AttributeSchema::default_schema();
    const int T = schema.num_types();
    Jarn::Out heads;
    std::vector<std::vector<int>> attr_targets(static_cast<std::size_t>(T));
    for (int t = 0; t < T; ++t) {
        const int K = static_cast<int>(schema.types[static_cast<std::size_t>(t)].values.size());
        for (int i = 0; i < 3; ++i)
            attr_targets[static_cast<std::size_t>(t)].push_back(
                i == 1 ? -1 : rng.uniform_int(0, K - 1));
    }
    double expect = 0.0;
    for (int br = 0; br < 4; ++br)
        for (int t = 0; t < T; ++t) {
            const int K =
                static_cast<int>(schema.types[static_cast<std::size_t>(t)].values.size());
            const Tensor z = random_tensor(rng, {3, K}, -2.0, 2.0);
            heads.branches[static_cast<std::size_t>(br)].attr_logp.push_back(Var(z));
            expect +=
                lsr_loss(Var(z), attr_targets[static_cast<std::size_t>(t)], 0.1).value()[0];
        }
    expect /= 4.0 * T;
    const Var loss = attribute_loss(heads, attr_targets, 0.1);
    CHECK(loss.value()[0] == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("pid loss: mean of the four identity cross-entropies") {
    Rng rng(131);
    Jarn::Out heads;
    const std::vector<int> pids{3, 0, 1};
    double expect = 0.0;
    for (int br = 0; br < 4; ++br) {
        const Tensor z = random_tensor(rng, {3, 5}, -2.0, 2.0);
        heads.branches[static_cast<std::size_t>(br)].pid_logits = Var(z);
        expect += ce_loss(Var(z), pids).value()[0];
    }
    expect /= 4.0;
    CHECK(pid_loss(heads, pids).value()[0] == doctest::Approx(expect).epsilon(1e-12));
}
