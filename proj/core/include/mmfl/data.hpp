#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mmfl/image.hpp"
#include "mmfl/jarn.hpp"
#include "mmfl/tensor.hpp"

namespace mmfl {

enum class Domain { consumer, shop };
enum class Split { train, query, gallery };

std::string to_string(Domain d);
std::string to_string(Split s);
Domain domain_from_string(const std::string& s);
Split split_from_string(const std::string& s);

struct ImageRecord {
    std::string image_path;
    int pid = -1;
    Domain domain = Domain::consumer;
    Split split = Split::train;
    std::map<std::string, int> attributes;  // type name -> value index
    bool has_bbox = false;
    std::array<int, 4> bbox{};  // x, y, w, h in pixels
};

// JSON-lines manifest IO. Loading validates attribute names/values against
// the schema and reports malformed lines by line number.
std::vector<ImageRecord> load_manifest(const std::string& path, const AttributeSchema& schema);
void write_manifest(const std::string& path, const std::vector<ImageRecord>& records);

// Retrieval precondition: every query pid must have a shop-domain gallery row.
void validate_retrieval_splits(const std::vector<ImageRecord>& records);

std::vector<ImageRecord> filter_split(const std::vector<ImageRecord>& records, Split split);

struct TripletBatch {
    Tensor images;  // (B, 3, H, W)
    std::vector<int> pids;
    std::vector<Domain> domains;
    std::vector<std::vector<int>> attribute_targets;  // per schema type, length B, -1 missing
    int num_identities = 0;       // P+1
    int images_per_identity = 0;  // 2K
    bool with_replacement = false;
};

// Draws identity/record index plans; image loading happens separately so the
// plan stays cheap and the whole epoch is reproducible from (seed, epoch).
class PkSampler {
public:
    struct BatchPlan {
        std::vector<int> record_indices;  // 2(P+1)K rows into the record list
        std::vector<int> pids;
        bool with_replacement = false;
    };

    PkSampler(const std::vector<ImageRecord>& records, int p, int k, std::uint64_t seed);

    std::vector<BatchPlan> epoch_plan(int epoch) const;
    int batches_per_epoch() const;
    int num_identities() const { return static_cast<int>(pids_.size()); }
    int p() const { return p_; }
    int k() const { return k_; }

private:
    int p_, k_;
    std::uint64_t seed_;
    std::vector<int> pids_;  // eligible identities, ascending
    std::map<int, std::vector<int>> consumer_, shop_;  // pid -> record indices
};

struct LoaderConfig {
    int image_size = 320;
    bool augment = false;
    AugmentConfig augment_config;
    std::array<float, 3> pad_fill{};
};

// Materialize one planned batch: read, (optionally) augment, pad to square.
// Per-slot transforms derive from seed_combine(seed, slot).
TripletBatch load_batch(const std::vector<ImageRecord>& records,
                        const PkSampler::BatchPlan& plan, const AttributeSchema& schema,
                        const LoaderConfig& cfg, std::uint64_t seed);

struct MixedBatch {
    Tensor images;  // (B,3,H,W): lambda*x + (1-lambda)*x[perm]
    std::vector<int> partner;  // perm, so row i pairs (pids[i], pids[partner[i]])
    double lambda = 1.0;
};

// Deterministic core: caller supplies the mixing weight and the permutation.
MixedBatch mixup_with(const TripletBatch& batch, double lambda,
                      const std::vector<int>& partner);
// Draws lambda ~ Beta(alpha, alpha) and a random pairing from the seed.
MixedBatch mixup(const TripletBatch& batch, double alpha, std::uint64_t seed);

struct SyntheticConfig {
    int num_pids = 20;
    int imgs_per_domain = 4;  // per pid; last of each domain becomes query/gallery
    int image_size = 64;
    std::uint64_t seed = 7;
};

// Procedurally rendered dataset: one striped/shaped pattern per pid, clean
// shop renders vs perturbed consumer renders, attributes derived from the
// pattern. Writes PNGs plus manifest.jsonl under `dir` and returns records.
std::vector<ImageRecord> generate_synthetic_dataset(const std::string& dir,
                                                    const SyntheticConfig& cfg,
                                                    const AttributeSchema& schema);

}  // namespace mmfl
