#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mmfl/data.hpp"
#include "mmfl/tensor.hpp"

namespace mmfl {

// Row-major float32 embedding matrix plus per-row retrieval metadata.
struct EmbeddingStore {
    int dim = 0;
    std::vector<float> matrix;  // count x dim
    std::vector<int> ids;       // pids
    std::vector<Domain> domains;
    std::vector<std::string> paths;
    bool normalized = false;

    int count() const { return dim == 0 ? 0 : static_cast<int>(matrix.size()) / dim; }
    const float* row(int i) const { return matrix.data() + static_cast<std::size_t>(i) * dim; }
    float* row(int i) { return matrix.data() + static_cast<std::size_t>(i) * dim; }
};

// Binary container: "MMFLEMB1", u32 dim, u64 count, count*dim little-endian
// f32 rows. Per-row metadata lives beside it in <path>.meta.jsonl.
void save_embeddings(const std::string& path, const EmbeddingStore& store);
EmbeddingStore load_embeddings(const std::string& path);

// Full training state: named f64 tensors (parameters, buffers, centers,
// optimizer slots), epoch counter, RNG state, and the config snapshot.
struct Checkpoint {
    std::uint32_t version = 1;
    int epoch = 0;
    std::string config_json;
    std::string rng_state;
    std::map<std::string, Tensor> tensors;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace mmfl
