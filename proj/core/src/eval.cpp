#include "mmfl/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <set>

#include "mmfl/ops.hpp"
#include "mmfl/rng.hpp"

namespace mmfl {

namespace {

// Ascending argsort with ties broken by lower index.
std::vector<int> argsort(const double* values, int n) {
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return values[a] < values[b]; });
    return order;
}

double cosine_distance(const float* a, const float* b, int dim) {
    double dot = 0.0;
    for (int d = 0; d < dim; ++d) dot += static_cast<double>(a[d]) * b[d];
    return 1.0 - dot;
}

}  // namespace

EmbeddingStore extract_embeddings(MmflNet& model, const std::vector<ImageRecord>& records,
                                  const LoaderConfig& cfg) {
    std::string missing;
    int missing_count = 0;
    for (const auto& r : records)
        if (!std::filesystem::exists(r.image_path)) {
            missing += (missing_count++ ? ", " : "") + r.image_path;
        }
    require(missing_count == 0, "missing image files: " + missing);

    EmbeddingStore store;
    store.dim = model.dims().embedding_dim();
    store.normalized = true;

    const bool was_training = model.training();
    model.set_training(false);
    {
        NoGradGuard guard;
        for (const auto& r : records) {
            Image img = read_image(r.image_path);
            if (r.has_bbox) img = crop(img, r.bbox[0], r.bbox[1], r.bbox[2], r.bbox[3]);
            img = pad_resize(img, cfg.image_size, cfg.pad_fill);
            Tensor batch({1, 3, cfg.image_size, cfg.image_size});
            copy_into_batch(img, batch, 0);
            const ModelOutput out = model.forward(Var(std::move(batch)));
            const Tensor& emb = out.embedding.value();
            require(emb.dim(1) == store.dim, "unexpected embedding width");
            for (int d = 0; d < store.dim; ++d)
                store.matrix.push_back(static_cast<float>(emb.at(0, d)));
            store.ids.push_back(r.pid);
            store.domains.push_back(r.domain);
            store.paths.push_back(r.image_path);
        }
    }
    model.set_training(was_training);
    return store;
}

Tensor distance_matrix(const EmbeddingStore& query, const EmbeddingStore& gallery) {
    require(query.dim == gallery.dim, "distance_matrix: embedding widths differ");
    require(query.normalized && gallery.normalized,
            "distance_matrix: stores must hold unit-norm rows");
    const int Q = query.count(), G = gallery.count();
    Tensor d({Q, G});
    for (int i = 0; i < Q; ++i)
        for (int j = 0; j < G; ++j)
            d.at(i, j) = cosine_distance(query.row(i), gallery.row(j), query.dim);
    return d;
}

double EvalResult::acc_at(int k) const {
    if (cmc.empty()) return 0.0;
    const int idx = std::min(static_cast<int>(cmc.size()), std::max(1, k)) - 1;
    return cmc[static_cast<std::size_t>(idx)];
}

EvalResult compute_cmc_map(const Tensor& distmat, const std::vector<int>& query_pids,
                           const std::vector<int>& gallery_pids) {
    require(distmat.ndim() == 2, "compute_cmc_map: distance matrix must be 2-d");
    const int Q = distmat.dim(0), G = distmat.dim(1);
    require(static_cast<int>(query_pids.size()) == Q, "compute_cmc_map: query pid count");
    require(static_cast<int>(gallery_pids.size()) == G, "compute_cmc_map: gallery pid count");
    require(G >= 1, "compute_cmc_map: empty gallery");

    EvalResult result;
    result.cmc.assign(static_cast<std::size_t>(G), 0.0);
    for (int q = 0; q < Q; ++q) {
        const bool has_match = std::find(gallery_pids.begin(), gallery_pids.end(),
                                         query_pids[static_cast<std::size_t>(q)]) !=
                               gallery_pids.end();
        if (!has_match) {
            ++result.skipped_queries;
            continue;
        }
        const auto order = argsort(distmat.data() + static_cast<std::int64_t>(q) * G, G);
        double ap = 0.0;
        int hits = 0;
        bool found = false;
        for (int rank = 0; rank < G; ++rank) {
            const bool relevant =
                gallery_pids[static_cast<std::size_t>(order[static_cast<std::size_t>(rank)])] ==
                query_pids[static_cast<std::size_t>(q)];
            if (relevant) {
                ++hits;
                ap += static_cast<double>(hits) / (rank + 1);
                if (!found) {
                    for (int k = rank; k < G; ++k) result.cmc[static_cast<std::size_t>(k)] += 1.0;
                    found = true;
                }
            }
        }
        result.per_query_ap.push_back(ap / hits);
    }

    const int evaluated = Q - result.skipped_queries;
    if (evaluated > 0) {
        for (auto& c : result.cmc) c /= evaluated;
        result.mAP = std::accumulate(result.per_query_ap.begin(), result.per_query_ap.end(), 0.0) /
                     evaluated;
    }
    return result;
}

namespace {

// k-nearest rows of `row` under the full distance matrix, self included
// (distance 0 ranks it first), ties toward the lower index.
std::vector<int> top_neighbors(const Tensor& dist, int row, int k) {
    const auto order = argsort(dist.data() + static_cast<std::int64_t>(row) * dist.dim(1),
                               dist.dim(1));
    return {order.begin(), order.begin() + k};
}

std::vector<int> reciprocal_neighbors(const Tensor& dist, int row, int k) {
    const auto forward = top_neighbors(dist, row, k + 1);
    std::vector<int> out;
    for (int j : forward) {
        const auto back = top_neighbors(dist, j, k + 1);
        if (std::find(back.begin(), back.end(), row) != back.end()) out.push_back(j);
    }
    return out;
}

}  // namespace

Tensor k_reciprocal_rerank(const EmbeddingStore& query, const EmbeddingStore& gallery,
                           int k1, int k2, double lambda) {
    const int Q = query.count(), G = gallery.count();
    if (k1 <= k2 || k2 < 1) throw ConfigError("rerank: need k1 > k2 >= 1");
    if (k1 >= G) throw ConfigError("rerank: k1 must be smaller than the gallery size");
    require(lambda >= 0.0 && lambda <= 1.0, "rerank: lambda must lie in [0,1]");
    require(query.dim == gallery.dim, "rerank: embedding widths differ");

    // Joint set: queries first, then gallery rows.
    const int N = Q + G;
    const int dim = query.dim;
    std::vector<const float*> rows(static_cast<std::size_t>(N));
    for (int i = 0; i < Q; ++i) rows[static_cast<std::size_t>(i)] = query.row(i);
    for (int j = 0; j < G; ++j) rows[static_cast<std::size_t>(Q + j)] = gallery.row(j);
    Tensor dist({N, N});
    for (int i = 0; i < N; ++i)
        for (int j = 0; j < N; ++j)
            dist.at(i, j) = cosine_distance(rows[static_cast<std::size_t>(i)],
                                            rows[static_cast<std::size_t>(j)], dim);

    // Sparse membership weights over expanded k-reciprocal sets.
    Tensor V({N, N});
    const int half = static_cast<int>(std::lround(k1 / 2.0));
    for (int i = 0; i < N; ++i) {
        const auto recip = reciprocal_neighbors(dist, i, k1);
        std::set<int> expanded(recip.begin(), recip.end());
        for (int cand : recip) {
            const auto cand_recip = reciprocal_neighbors(dist, cand, half);
            int overlap = 0;
            for (int c : cand_recip)
                if (std::find(recip.begin(), recip.end(), c) != recip.end()) ++overlap;
            if (overlap > 2.0 / 3.0 * static_cast<double>(cand_recip.size()))
                expanded.insert(cand_recip.begin(), cand_recip.end());
        }
        double total = 0.0;
        for (int j : expanded) total += std::exp(-dist.at(i, j));
        for (int j : expanded) V.at(i, j) = std::exp(-dist.at(i, j)) / total;
    }

    // Local query expansion: average the membership rows of the k2 nearest.
    if (k2 > 1) {
        Tensor Vq({N, N});
        for (int i = 0; i < N; ++i) {
            const auto near = top_neighbors(dist, i, k2);
            for (int j : near)
                for (int c = 0; c < N; ++c) Vq.at(i, c) += V.at(j, c) / k2;
        }
        V = std::move(Vq);
    }

    // Jaccard over weights: rows sum to 1, so sum(max) = 2 - sum(min).
    Tensor out({Q, G});
    for (int q = 0; q < Q; ++q)
        for (int g = 0; g < G; ++g) {
            double mins = 0.0;
            for (int c = 0; c < N; ++c) mins += std::min(V.at(q, c), V.at(Q + g, c));
            const double jaccard = 1.0 - mins / (2.0 - mins);
            out.at(q, g) = lambda * dist.at(q, Q + g) + (1.0 - lambda) * jaccard;
        }
    return out;
}

namespace {

double sq_euclid(const float* a, const float* b, int dim) {
    double s = 0.0;
    for (int d = 0; d < dim; ++d) {
        const double diff = static_cast<double>(a[d]) - b[d];
        s += diff * diff;
    }
    return s;
}

}  // namespace

RetrievalIndex build_index(const EmbeddingStore& store, int n_clusters, std::uint64_t seed) {
    const int N = store.count(), dim = store.dim;
    if (n_clusters < 1 || n_clusters > N)
        throw ConfigError("build_index: n_clusters must lie in [1, " + std::to_string(N) + "]");

    RetrievalIndex index;
    index.store = store;
    index.n_clusters = n_clusters;
    index.centroids.assign(static_cast<std::size_t>(n_clusters) * dim, 0.0f);
    index.assignments.assign(static_cast<std::size_t>(N), 0);

    // Farthest-point seeding: random first pick, then maximize the distance
    // to the nearest chosen centre (ties toward the lower row).
    Rng rng(seed);
    std::vector<int> seeds{rng.uniform_int(0, N - 1)};
    std::vector<double> nearest(static_cast<std::size_t>(N),
                                std::numeric_limits<double>::infinity());
    while (static_cast<int>(seeds.size()) < n_clusters) {
        for (int i = 0; i < N; ++i)
            nearest[static_cast<std::size_t>(i)] =
                std::min(nearest[static_cast<std::size_t>(i)],
                         sq_euclid(store.row(i), store.row(seeds.back()), dim));
        int best = -1;
        for (int i = 0; i < N; ++i)
            if (best < 0 || nearest[static_cast<std::size_t>(i)] >
                                nearest[static_cast<std::size_t>(best)])
                best = i;
        seeds.push_back(best);
    }
    for (int c = 0; c < n_clusters; ++c)
        for (int d = 0; d < dim; ++d)
            index.centroids[static_cast<std::size_t>(c) * dim + d] =
                store.row(seeds[static_cast<std::size_t>(c)])[d];

    for (int iter = 0; iter < 100; ++iter) {
        // Assignment step.
        bool changed = iter == 0;
        double inertia = 0.0;
        for (int i = 0; i < N; ++i) {
            int best = 0;
            double best_d = sq_euclid(store.row(i), index.centroids.data(), dim);
            for (int c = 1; c < n_clusters; ++c) {
                const double d =
                    sq_euclid(store.row(i), index.centroids.data() +
                                                static_cast<std::size_t>(c) * dim, dim);
                if (d < best_d) {
                    best_d = d;
                    best = c;
                }
            }
            inertia += best_d;
            if (index.assignments[static_cast<std::size_t>(i)] != best) {
                index.assignments[static_cast<std::size_t>(i)] = best;
                changed = true;
            }
        }
        index.inertia_trace.push_back(inertia);
        if (!changed) break;

        // Update step; empty clusters keep their previous centroid.
        std::vector<double> sums(static_cast<std::size_t>(n_clusters) * dim, 0.0);
        std::vector<int> counts(static_cast<std::size_t>(n_clusters), 0);
        for (int i = 0; i < N; ++i) {
            const int c = index.assignments[static_cast<std::size_t>(i)];
            ++counts[static_cast<std::size_t>(c)];
            for (int d = 0; d < dim; ++d)
                sums[static_cast<std::size_t>(c) * dim + d] += store.row(i)[d];
        }
        for (int c = 0; c < n_clusters; ++c)
            if (counts[static_cast<std::size_t>(c)] > 0)
                for (int d = 0; d < dim; ++d)
                    index.centroids[static_cast<std::size_t>(c) * dim + d] =
                        static_cast<float>(sums[static_cast<std::size_t>(c) * dim + d] /
                                           counts[static_cast<std::size_t>(c)]);
    }
    return index;
}

std::vector<QueryHit> query_index(const RetrievalIndex& index,
                                  const std::vector<float>& embedding, int top_k, int probe) {
    const int dim = index.store.dim;
    require(static_cast<int>(embedding.size()) == dim, "query_index: embedding width mismatch");
    require(probe >= 1 && probe <= index.n_clusters,
            "query_index: probe must lie in [1, n_clusters]");
    require(top_k >= 1, "query_index: top_k must be positive");

    std::vector<double> cd(static_cast<std::size_t>(index.n_clusters));
    for (int c = 0; c < index.n_clusters; ++c)
        cd[static_cast<std::size_t>(c)] = sq_euclid(
            embedding.data(), index.centroids.data() + static_cast<std::size_t>(c) * dim, dim);
    const auto cluster_order = argsort(cd.data(), index.n_clusters);
    std::set<int> probed(cluster_order.begin(), cluster_order.begin() + probe);

    std::vector<QueryHit> hits;
    for (int i = 0; i < index.store.count(); ++i)
        if (probed.count(index.assignments[static_cast<std::size_t>(i)]))
            hits.push_back({i, cosine_distance(embedding.data(), index.store.row(i), dim)});
    std::stable_sort(hits.begin(), hits.end(), [](const QueryHit& a, const QueryHit& b) {
        return a.distance != b.distance ? a.distance < b.distance : a.row < b.row;
    });
    if (static_cast<int>(hits.size()) > top_k) hits.resize(static_cast<std::size_t>(top_k));
    return hits;
}

AttributeMetrics attribute_metrics(const std::vector<Tensor>& scores,
                                   const std::vector<std::vector<int>>& targets,
                                   const AttributeSchema& schema, std::vector<int> ks) {
    require(static_cast<int>(scores.size()) == schema.num_types(),
            "attribute_metrics: one score matrix per type");
    require(targets.size() == scores.size(), "attribute_metrics: one target list per type");

    AttributeMetrics metrics;
    metrics.ks = ks;
    for (int t = 0; t < schema.num_types(); ++t) {
        const Tensor& score = scores[static_cast<std::size_t>(t)];
        const auto& target = targets[static_cast<std::size_t>(t)];
        const int J = static_cast<int>(schema.types[static_cast<std::size_t>(t)].values.size());
        require(score.ndim() == 2 && score.dim(1) == J,
                "attribute_metrics: scores must be (N, value count)");
        require(static_cast<int>(target.size()) == score.dim(0),
                "attribute_metrics: score/target length mismatch");

        AttributeMetrics::PerType m;
        m.name = schema.types[static_cast<std::size_t>(t)].name;
        m.confusion.assign(static_cast<std::size_t>(J) * J, 0);
        m.topk.assign(ks.size(), 0.0);

        for (int i = 0; i < score.dim(0); ++i) {
            const int y = target[static_cast<std::size_t>(i)];
            if (y == -1) continue;
            require(y >= 0 && y < J, "attribute_metrics: target outside the schema");
            ++m.evaluated;
            // Descending score order, ties toward the lower value index.
            std::vector<double> neg(static_cast<std::size_t>(J));
            for (int j = 0; j < J; ++j) neg[static_cast<std::size_t>(j)] = -score.at(i, j);
            const auto order = argsort(neg.data(), J);
            m.confusion[static_cast<std::size_t>(y) * J + order[0]] += 1;
            const int rank = static_cast<int>(
                std::find(order.begin(), order.end(), y) - order.begin());
            for (std::size_t k = 0; k < ks.size(); ++k)
                if (rank < ks[k]) m.topk[k] += 1.0;
        }

        if (m.evaluated > 0) {
            int correct = 0;
            for (int j = 0; j < J; ++j) correct += m.confusion[static_cast<std::size_t>(j) * J + j];
            m.top1 = static_cast<double>(correct) / m.evaluated;
            for (auto& v : m.topk) v /= m.evaluated;
            for (int j = 0; j < J; ++j) {
                int tp = m.confusion[static_cast<std::size_t>(j) * J + j];
                int actual = 0, predicted = 0;
                for (int o = 0; o < J; ++o) {
                    actual += m.confusion[static_cast<std::size_t>(j) * J + o];
                    predicted += m.confusion[static_cast<std::size_t>(o) * J + j];
                }
                const double prec = predicted > 0 ? static_cast<double>(tp) / predicted : 0.0;
                const double rec = actual > 0 ? static_cast<double>(tp) / actual : 0.0;
                const double f1 = prec + rec > 0 ? 2.0 * prec * rec / (prec + rec) : 0.0;
                m.macro_precision += prec / J;
                m.macro_recall += rec / J;
                m.macro_f1 += f1 / J;
            }
        }
        metrics.types.push_back(std::move(m));
    }
    return metrics;
}

ModelStats report_model_stats(const ModelDims& dims, int num_pids, int latency_runs,
                              std::uint64_t seed) {
    Rng rng(seed);
    MmflNet model(rng, dims, num_pids);
    model.set_training(false);

    ModelStats stats;
    stats.parameter_count = model.num_parameters();
    stats.latency_runs = latency_runs;

    Tensor input({1, 3, dims.image_size, dims.image_size});
    for (std::int64_t i = 0; i < input.numel(); ++i) input[i] = rng.uniform();

    NoGradGuard guard;
    MacCounter::reset();
    MacCounter::enable(true);
    model.forward(Var(input));
    MacCounter::enable(false);
    stats.macs = static_cast<std::int64_t>(MacCounter::count());

    std::vector<double> times;
    model.forward(Var(input));  // warm-up
    for (int run = 0; run < latency_runs; ++run) {
        const auto t0 = std::chrono::steady_clock::now();
        model.forward(Var(input));
        const auto t1 = std::chrono::steady_clock::now();
        times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    if (!times.empty()) {
        std::sort(times.begin(), times.end());
        stats.median_latency_ms = times[times.size() / 2];
    }
    return stats;
}

}  // namespace mmfl
