#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mmfl/data.hpp"
#include "mmfl/model.hpp"
#include "mmfl/serialize.hpp"

namespace mmfl {

// One unit-norm inference embedding per record, in manifest order. The model
// runs in evaluation mode; images get bbox crop + pad_resize only.
EmbeddingStore extract_embeddings(MmflNet& model, const std::vector<ImageRecord>& records,
                                  const LoaderConfig& cfg);

// Pairwise 1 - cosine similarity, entries in [0,2]. Both stores unit-norm.
Tensor distance_matrix(const EmbeddingStore& query, const EmbeddingStore& gallery);

struct EvalResult {
    double mAP = 0.0;
    std::vector<double> cmc;           // Acc@k, k = 1..gallery size
    std::vector<double> per_query_ap;  // evaluated queries, in query order
    int skipped_queries = 0;           // queries with no gallery match

    double acc_at(int k) const;  // clamped to the end of the curve
};

// Single-query protocol: rank gallery ascending by distance (ties by gallery
// index), AP = mean precision at each relevant rank, mAP = mean over queries.
EvalResult compute_cmc_map(const Tensor& distmat, const std::vector<int>& query_pids,
                           const std::vector<int>& gallery_pids);

// k-reciprocal neighborhood re-ranking: blends the original cosine distance
// with a Jaccard distance over expanded reciprocal neighbor sets.
Tensor k_reciprocal_rerank(const EmbeddingStore& query, const EmbeddingStore& gallery,
                           int k1 = 20, int k2 = 6, double lambda = 0.3);

struct RetrievalIndex {
    EmbeddingStore store;
    int n_clusters = 0;
    std::vector<float> centroids;      // n_clusters x dim
    std::vector<int> assignments;      // row -> cluster
    std::vector<double> inertia_trace; // per Lloyd iteration, non-increasing
    int probe_clusters = 3;
};

// Seeded farthest-point init then Lloyd iterations to an assignment fixpoint
// (at most 100 rounds). Ties break toward the lower index everywhere.
RetrievalIndex build_index(const EmbeddingStore& store, int n_clusters, std::uint64_t seed);

struct QueryHit {
    int row;          // gallery row in the indexed store
    double distance;  // 1 - cosine
};

// Scan the `probe` nearest clusters, rank candidates exactly by cosine.
std::vector<QueryHit> query_index(const RetrievalIndex& index,
                                  const std::vector<float>& embedding, int top_k, int probe);

struct AttributeMetrics {
    struct PerType {
        std::string name;
        std::vector<int> confusion;  // J x J row-major, rows = actual
        int evaluated = 0;           // rows with a known target
        double top1 = 0.0;
        double macro_precision = 0.0, macro_recall = 0.0, macro_f1 = 0.0;
        std::vector<double> topk;    // aligned with `ks`
    };
    std::vector<PerType> types;
    std::vector<int> ks;
};

// scores[t] is (N, J_t) per-type class scores; targets[t] holds N labels with
// -1 meaning unknown (excluded). Macro metrics treat 0/0 as 0.
AttributeMetrics attribute_metrics(const std::vector<Tensor>& scores,
                                   const std::vector<std::vector<int>>& targets,
                                   const AttributeSchema& schema,
                                   std::vector<int> ks = {1, 2});

struct ModelStats {
    std::int64_t parameter_count = 0;
    std::int64_t macs = 0;           // one-image forward multiply-adds
    double median_latency_ms = 0.0;  // single-image forward, eval mode
    int latency_runs = 0;
};

ModelStats report_model_stats(const ModelDims& dims, int num_pids, int latency_runs = 50,
                              std::uint64_t seed = 0);

}  // namespace mmfl
