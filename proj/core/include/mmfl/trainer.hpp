#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mmfl/eval.hpp"
#include "mmfl/losses.hpp"

namespace mmfl {

struct TrainConfig {
    int epochs = 120;
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 5e-4;
    double center_lr = 0.5;
    double center_momentum = 0.9;
    std::vector<int> milestones{50, 100};
    double lr_decay = 0.1;
    int eval_period = 10;
    std::uint64_t seed = 0;
    std::string preset = "full";
    int p = 3;
    int k = 4;
    bool augment = true;
    bool mixup = false;
    double mixup_alpha = 1.0;
    LossWeights loss;

    // Milestones must be strictly increasing and < epochs.
    void validate() const;
};

// lr * decay^(number of milestones <= epoch); requires 0 <= epoch < epochs.
double lr_at(int epoch, const TrainConfig& cfg);

// Adam with bias correction over the model's parameter list. Weight decay is
// folded into the gradient (L2 style) for decay-flagged parameters only, so
// normalization affines, biases and fusion scalars never shrink toward zero.
class Adam {
public:
    Adam(std::vector<ParamRef> params, const TrainConfig& cfg);

    // Applies one update at the given learning rate; parameters whose gradient
    // is absent (never touched by backward) are skipped.
    void step(double lr);

    std::int64_t t() const { return t_; }
    const std::vector<ParamRef>& params() const { return params_; }
    Tensor& m(std::size_t i) { return m_[i]; }
    Tensor& v(std::size_t i) { return v_[i]; }
    void set_t(std::int64_t t) { t_ = t; }

private:
    std::vector<ParamRef> params_;
    std::vector<Tensor> m_, v_;
    double beta1_, beta2_, eps_, weight_decay_;
    std::int64_t t_ = 0;
};

// Momentum SGD over the class-center matrix. The center table enters the total
// loss scaled by beta_center; this optimizer rescales the gradient back to the
// raw center objective and normalizes by (1 + class count in batch), then
// updates only rows whose class appears in the batch.
class CenterSgd {
public:
    CenterSgd(int num_classes, int dim, double lr, double momentum, double loss_scale);

    void step(Var centers, const std::vector<int>& batch_classes);

    Tensor& velocity() { return velocity_; }

private:
    Tensor velocity_;
    double lr_, momentum_, loss_scale_;
};

struct StepReport {
    LossReport losses;
    double lr = 0.0;
    bool mixed = false;
    double mixup_lambda = 1.0;
};

// Step-level machinery shared by fit() and the tests: owns the optimizers and
// the center table, borrows the model.
class Trainer {
public:
    Trainer(const TrainConfig& cfg, MmflNet& model);

    // One optimization step. Classification losses read the mixed images when
    // a MixedBatch is supplied; metric losses always use the raw batch.
    StepReport step(const TripletBatch& batch, double lr,
                    const std::optional<MixedBatch>& mixed = std::nullopt);

    Var centers() const { return centers_; }
    Adam& adam() { return adam_; }
    CenterSgd& center_opt() { return center_opt_; }
    MmflNet& model() { return model_; }

private:
    TrainConfig cfg_;
    MmflNet& model_;
    Var centers_;
    Adam adam_;
    CenterSgd center_opt_;
};

// Full training-state snapshot: parameters, buffers, center table, optimizer
// state, epoch counter and a self-describing config (preset, class count,
// attribute schema) so tools can rebuild the network from the file alone.
Checkpoint snapshot_training(Trainer& trainer, const TrainConfig& cfg, int epochs_done,
                             const Rng& rng);
void restore_training(const Checkpoint& ckpt, Trainer& trainer);

// Rebuild the architecture recorded in a checkpoint and load its weights and
// buffers (optimizer state is ignored).
std::unique_ptr<MmflNet> model_from_checkpoint(const Checkpoint& ckpt);

struct EvalPoint {
    int epoch = 0;
    double map = 0.0;
    double acc1 = 0.0;
    double acc5 = 0.0;
    int skipped_queries = 0;
};

struct FitResult {
    Checkpoint last;
    std::vector<EvalPoint> history;
    double best_map = -1.0;
    int best_epoch = -1;
    std::string run_dir;
};

// Full training procedure over a manifest with train/query/gallery splits:
// PK-sampled epochs, per-epoch LR schedule, periodic retrieval evaluation,
// best-mAP and last checkpoints, JSON-lines step log and metric history, all
// under run_dir. Resuming from a checkpoint reproduces the uninterrupted
// trajectory for the same seed.
FitResult fit(const TrainConfig& cfg, const std::vector<ImageRecord>& records,
              const AttributeSchema& schema, const std::string& run_dir,
              const std::string& resume_from = "");

}  // namespace mmfl
