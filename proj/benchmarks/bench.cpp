#include <benchmark/benchmark.h>

#include "mmfl/eval.hpp"
#include "mmfl/losses.hpp"
#include "mmfl/model.hpp"
#include "mmfl/nn.hpp"

using namespace mmfl;

namespace {

Tensor random_tensor(Rng& rng, std::vector<int> shape) {
    Tensor t(std::move(shape));
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.normal();
    return t;
}

EmbeddingStore random_store(Rng& rng, int n, int dim) {
    EmbeddingStore s;
    s.dim = dim;
    for (int i = 0; i < n; ++i) {
        double norm = 0.0;
        std::vector<float> row(static_cast<std::size_t>(dim));
        for (auto& v : row) {
            v = static_cast<float>(rng.normal());
            norm += static_cast<double>(v) * v;
        }
        norm = std::sqrt(norm);
        for (auto& v : row) v = static_cast<float>(v / norm);
        s.matrix.insert(s.matrix.end(), row.begin(), row.end());
        s.ids.push_back(i % 8);
        s.domains.push_back(Domain::shop);
        s.paths.push_back("");
    }
    s.normalized = true;
    return s;
}

void BM_Conv2dForward(benchmark::State& state) {
    const int ch = static_cast<int>(state.range(0));
    Rng rng(1);
    Conv2d conv(rng, ch, ch, 3, 1, 1);
    const Tensor x = random_tensor(rng, {1, ch, 32, 32});
    NoGradGuard guard;
    for (auto _ : state) benchmark::DoNotOptimize(conv.forward(Var(x)).value().data());
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(ch) * ch * 9 * 32 *
                            32);
}
BENCHMARK(BM_Conv2dForward)->Arg(16)->Arg(64);

void BM_LinearForward(benchmark::State& state) {
    const int dim = static_cast<int>(state.range(0));
    Rng rng(2);
    Linear fc(rng, dim, dim);
    const Tensor x = random_tensor(rng, {8, dim});
    NoGradGuard guard;
    for (auto _ : state) benchmark::DoNotOptimize(fc.forward(Var(x)).value().data());
    state.SetItemsProcessed(state.iterations() * 8 * static_cast<std::int64_t>(dim) * dim);
}
BENCHMARK(BM_LinearForward)->Arg(256)->Arg(1024);

void BM_TinyModelForward(benchmark::State& state) {
    Rng rng(3);
    MmflNet model(rng, ModelDims::tiny(), 20);
    model.set_training(false);
    const Tensor x = random_tensor(rng, {1, 3, 64, 64});
    NoGradGuard guard;
    for (auto _ : state)
        benchmark::DoNotOptimize(model.forward(Var(x)).embedding.value().data());
}
BENCHMARK(BM_TinyModelForward);

void BM_TrihardLoss(benchmark::State& state) {
    const int B = static_cast<int>(state.range(0));
    Rng rng(4);
    const Tensor f = random_tensor(rng, {B, 256});
    std::vector<int> pids;
    for (int i = 0; i < B; ++i) pids.push_back(i / 4);
    for (auto _ : state) {
        Var features(f, /*requires_grad=*/true);
        Var loss = trihard_loss(features, pids, 0.3);
        loss.backward();
        benchmark::DoNotOptimize(features.grad().data());
    }
}
BENCHMARK(BM_TrihardLoss)->Arg(32)->Arg(64);

void BM_DistanceMatrix(benchmark::State& state) {
    const int n = static_cast<int>(state.range(0));
    Rng rng(5);
    const EmbeddingStore q = random_store(rng, n, 128);
    const EmbeddingStore g = random_store(rng, 4 * n, 128);
    for (auto _ : state) benchmark::DoNotOptimize(distance_matrix(q, g).data());
    state.SetItemsProcessed(state.iterations() * n * 4 * n * 128);
}
BENCHMARK(BM_DistanceMatrix)->Arg(64)->Arg(256);

void BM_CmcMap(benchmark::State& state) {
    const int n = static_cast<int>(state.range(0));
    Rng rng(6);
    const EmbeddingStore q = random_store(rng, n, 64);
    const EmbeddingStore g = random_store(rng, 4 * n, 64);
    const Tensor d = distance_matrix(q, g);
    for (auto _ : state) benchmark::DoNotOptimize(compute_cmc_map(d, q.ids, g.ids).mAP);
}
BENCHMARK(BM_CmcMap)->Arg(64)->Arg(256);

void BM_Rerank(benchmark::State& state) {
    const int g_size = static_cast<int>(state.range(0));
    Rng rng(7);
    const EmbeddingStore q = random_store(rng, 8, 64);
    const EmbeddingStore g = random_store(rng, g_size, 64);
    for (auto _ : state)
        benchmark::DoNotOptimize(k_reciprocal_rerank(q, g, 6, 2, 0.3).data());
}
BENCHMARK(BM_Rerank)->Arg(32)->Arg(64);

}  // namespace

BENCHMARK_MAIN();
