#include "mmfl/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace mmfl {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void check(bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
}

}  // namespace

void TrainConfig::validate() const {
    check(epochs >= 0, "TrainConfig: epochs must be >= 0");
    check(lr >= 0.0, "TrainConfig: learning rate must be >= 0");
    check(beta1 >= 0.0 && beta1 < 1.0, "TrainConfig: beta1 must be in [0,1)");
    check(beta2 >= 0.0 && beta2 < 1.0, "TrainConfig: beta2 must be in [0,1)");
    check(adam_eps > 0.0, "TrainConfig: adam_eps must be > 0");
    check(weight_decay >= 0.0, "TrainConfig: weight_decay must be >= 0");
    check(center_lr >= 0.0, "TrainConfig: center_lr must be >= 0");
    check(center_momentum >= 0.0 && center_momentum < 1.0,
          "TrainConfig: center_momentum must be in [0,1)");
    check(lr_decay > 0.0, "TrainConfig: lr_decay must be > 0");
    check(eval_period >= 1, "TrainConfig: eval_period must be >= 1");
    check(p >= 1 && k >= 1, "TrainConfig: p and k must be >= 1");
    check(mixup_alpha > 0.0 || !mixup, "TrainConfig: mixup needs alpha > 0");
    for (std::size_t i = 0; i < milestones.size(); ++i) {
        if (i > 0)
            check(milestones[i] > milestones[i - 1],
                  "TrainConfig: milestones must be strictly increasing");
        check(milestones[i] < epochs, "TrainConfig: milestones must be < epochs");
    }
}

double lr_at(int epoch, const TrainConfig& cfg) {
    require(epoch >= 0 && epoch < std::max(cfg.epochs, 1),
            "lr_at: epoch out of range");
    int hits = 0;
    for (int m : cfg.milestones)
        if (m <= epoch) ++hits;
    return cfg.lr * std::pow(cfg.lr_decay, hits);
}

Adam::Adam(std::vector<ParamRef> params, const TrainConfig& cfg)
    : params_(std::move(params)),
      beta1_(cfg.beta1),
      beta2_(cfg.beta2),
      eps_(cfg.adam_eps),
      weight_decay_(cfg.weight_decay) {
    for (const auto& p : params_) {
        m_.push_back(Tensor::zeros(p.var.value().shape()));
        v_.push_back(Tensor::zeros(p.var.value().shape()));
    }
}

void Adam::step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        const Tensor& grad = params_[i].var.grad();
        if (grad.numel() == 0) continue;  // parameter untouched this step
        Tensor& theta = params_[i].var.value();
        Tensor& m = m_[i];
        Tensor& v = v_[i];
        const double wd = params_[i].decay ? weight_decay_ : 0.0;
        for (std::int64_t j = 0; j < theta.numel(); ++j) {
            const double g = grad[j] + wd * theta[j];
            m[j] = beta1_ * m[j] + (1.0 - beta1_) * g;
            v[j] = beta2_ * v[j] + (1.0 - beta2_) * g * g;
            theta[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps_);
        }
    }
}

CenterSgd::CenterSgd(int num_classes, int dim, double lr, double momentum, double loss_scale)
    : velocity_(Tensor::zeros({num_classes, dim})),
      lr_(lr),
      momentum_(momentum),
      loss_scale_(loss_scale) {}

void CenterSgd::step(Var centers, const std::vector<int>& batch_classes) {
    const Tensor& grad = centers.grad();
    if (grad.numel() == 0) return;
    const int dim = centers.value().dim(1);
    std::map<int, int> counts;
    for (int c : batch_classes) ++counts[c];
    const double unscale = loss_scale_ > 0.0 ? 1.0 / loss_scale_ : 1.0;
    for (const auto& [cls, n] : counts) {
        for (int d = 0; d < dim; ++d) {
            const double g = grad.at(cls, d) * unscale / (1.0 + n);
            velocity_.at(cls, d) = momentum_ * velocity_.at(cls, d) + g;
            centers.value().at(cls, d) -= lr_ * velocity_.at(cls, d);
        }
    }
}

Trainer::Trainer(const TrainConfig& cfg, MmflNet& model)
    : cfg_(cfg),
      model_(model),
      centers_(Tensor::zeros({model.num_pids(), model.dims().metric_dim()}),
               /*requires_grad=*/true),
      adam_(model.parameters(), cfg),
      center_opt_(model.num_pids(), model.dims().metric_dim(), cfg.center_lr,
                  cfg.center_momentum, cfg.loss.beta_center) {
    cfg_.validate();
}

StepReport Trainer::step(const TripletBatch& batch, double lr,
                         const std::optional<MixedBatch>& mixed) {
    require(model_.training(), "train_step: model must be in training mode");
    model_.zero_grad();
    centers_.zero_grad();

    const ModelOutput out = model_.forward(Var(batch.images));

    Var lsr, ce;
    double lambda = 1.0;
    if (mixed.has_value()) {
        lambda = mixed->lambda;
        const ModelOutput mout = model_.forward(Var(mixed->images));
        std::vector<int> pid_b;
        for (int j : mixed->partner) pid_b.push_back(batch.pids[static_cast<std::size_t>(j)]);
        std::vector<std::vector<int>> attr_b;
        for (const auto& type_targets : batch.attribute_targets) {
            std::vector<int> permuted;
            for (int j : mixed->partner) permuted.push_back(type_targets[static_cast<std::size_t>(j)]);
            attr_b.push_back(std::move(permuted));
        }
        lsr = add(scale(attribute_loss(mout.heads, batch.attribute_targets, cfg_.loss.smoothing),
                        lambda),
                  scale(attribute_loss(mout.heads, attr_b, cfg_.loss.smoothing), 1.0 - lambda));
        ce = add(scale(pid_loss(mout.heads, batch.pids), lambda),
                 scale(pid_loss(mout.heads, pid_b), 1.0 - lambda));
    } else {
        lsr = attribute_loss(out.heads, batch.attribute_targets, cfg_.loss.smoothing);
        ce = pid_loss(out.heads, batch.pids);
    }

    const Var triplet = trihard_loss(out.bundle.f_metric, batch.pids, cfg_.loss.margin);
    const Var center = center_loss(out.bundle.f_metric, batch.pids, centers_);
    const TotalLoss total = total_loss(lsr, ce, triplet, center, cfg_.loss);

    if (!std::isfinite(total.report.total)) {
        std::ostringstream msg;
        msg << "train_step: non-finite loss (lsr=" << total.report.lsr
            << ", ce=" << total.report.ce << ", triplet=" << total.report.triplet
            << ", center=" << total.report.center << "); batch pids:";
        for (int p : batch.pids) msg << ' ' << p;
        throw std::runtime_error(msg.str());
    }

    total.value.backward();
    adam_.step(lr);
    center_opt_.step(centers_, batch.pids);

    return {total.report, lr, mixed.has_value(), lambda};
}

namespace {

json config_to_json(const TrainConfig& cfg) {
    return json{{"epochs", cfg.epochs},
                {"lr", cfg.lr},
                {"beta1", cfg.beta1},
                {"beta2", cfg.beta2},
                {"adam_eps", cfg.adam_eps},
                {"weight_decay", cfg.weight_decay},
                {"center_lr", cfg.center_lr},
                {"center_momentum", cfg.center_momentum},
                {"milestones", cfg.milestones},
                {"lr_decay", cfg.lr_decay},
                {"eval_period", cfg.eval_period},
                {"seed", cfg.seed},
                {"preset", cfg.preset},
                {"p", cfg.p},
                {"k", cfg.k},
                {"augment", cfg.augment},
                {"mixup", cfg.mixup},
                {"mixup_alpha", cfg.mixup_alpha},
                {"gamma_triplet", cfg.loss.gamma_triplet},
                {"beta_center", cfg.loss.beta_center},
                {"margin", cfg.loss.margin},
                {"smoothing", cfg.loss.smoothing}};
}

const Tensor& ckpt_tensor(const Checkpoint& ckpt, const std::string& name) {
    const auto it = ckpt.tensors.find(name);
    if (it == ckpt.tensors.end()) throw ParseError("checkpoint: missing tensor " + name);
    return it->second;
}

void restore_model_state(const Checkpoint& ckpt, MmflNet& model) {
    for (auto p : model.parameters()) {
        const Tensor& saved = ckpt_tensor(ckpt, "param." + p.name);
        require(saved.shape() == p.var.value().shape(),
                "checkpoint: shape mismatch for " + p.name);
        p.var.value() = saved;
    }
    for (auto b : model.buffers()) *b.tensor = ckpt_tensor(ckpt, "buffer." + b.name);
}

EvalPoint evaluate_model(MmflNet& model, const std::vector<ImageRecord>& query,
                         const std::vector<ImageRecord>& gallery, const LoaderConfig& loader,
                         int epoch) {
    LoaderConfig eval_cfg = loader;
    eval_cfg.augment = false;
    const EmbeddingStore qs = extract_embeddings(model, query, eval_cfg);
    const EmbeddingStore gs = extract_embeddings(model, gallery, eval_cfg);
    const EvalResult r = compute_cmc_map(distance_matrix(qs, gs), qs.ids, gs.ids);
    return {epoch, r.mAP, r.acc_at(1), r.acc_at(5), r.skipped_queries};
}

}  // namespace

Checkpoint snapshot_training(Trainer& trainer, const TrainConfig& cfg, int epochs_done,
                             const Rng& rng) {
    const MmflNet& model = trainer.model();
    Checkpoint ckpt;
    ckpt.epoch = static_cast<std::uint32_t>(epochs_done);
    json config = config_to_json(cfg);
    config["num_classes"] = model.num_pids();
    json schema_json = json::array();
    for (const auto& t : model.schema().types)
        schema_json.push_back({{"name", t.name}, {"values", t.values}});
    config["schema"] = schema_json;
    ckpt.config_json = config.dump();
    ckpt.rng_state = rng.save_state();
    for (const auto& p : model.parameters()) ckpt.tensors["param." + p.name] = p.var.value();
    for (const auto& b : model.buffers()) ckpt.tensors["buffer." + b.name] = *b.tensor;
    ckpt.tensors["centers"] = trainer.centers().value();
    Adam& adam = trainer.adam();
    for (std::size_t i = 0; i < adam.params().size(); ++i) {
        ckpt.tensors["adam.m." + adam.params()[i].name] = adam.m(i);
        ckpt.tensors["adam.v." + adam.params()[i].name] = adam.v(i);
    }
    Tensor t({1});
    t[0] = static_cast<double>(adam.t());
    ckpt.tensors["adam.t"] = t;
    ckpt.tensors["center.velocity"] = trainer.center_opt().velocity();
    return ckpt;
}

void restore_training(const Checkpoint& ckpt, Trainer& trainer) {
    restore_model_state(ckpt, trainer.model());
    trainer.centers().value() = ckpt_tensor(ckpt, "centers");
    Adam& adam = trainer.adam();
    for (std::size_t i = 0; i < adam.params().size(); ++i) {
        adam.m(i) = ckpt_tensor(ckpt, "adam.m." + adam.params()[i].name);
        adam.v(i) = ckpt_tensor(ckpt, "adam.v." + adam.params()[i].name);
    }
    adam.set_t(static_cast<std::int64_t>(ckpt_tensor(ckpt, "adam.t")[0]));
    trainer.center_opt().velocity() = ckpt_tensor(ckpt, "center.velocity");
}

std::unique_ptr<MmflNet> model_from_checkpoint(const Checkpoint& ckpt) {
    json config;
    try {
        config = json::parse(ckpt.config_json);
    } catch (const json::parse_error& e) {
        throw ParseError(std::string("checkpoint: bad config json: ") + e.what());
    }
    if (!config.contains("preset") || !config.contains("num_classes") ||
        !config.contains("schema"))
        throw ParseError("checkpoint: config lacks preset/num_classes/schema");
    AttributeSchema schema;
    for (const auto& t : config.at("schema"))
        schema.types.push_back(
            {t.at("name").get<std::string>(), t.at("values").get<std::vector<std::string>>()});
    const ModelDims dims = ModelDims::preset(config.at("preset").get<std::string>());
    Rng rng(config.value("seed", std::uint64_t{0}));
    auto model = std::make_unique<MmflNet>(rng, dims, config.at("num_classes").get<int>(), schema);
    restore_model_state(ckpt, *model);
    return model;
}

FitResult fit(const TrainConfig& cfg, const std::vector<ImageRecord>& records,
              const AttributeSchema& schema, const std::string& run_dir,
              const std::string& resume_from) {
    cfg.validate();
    validate_retrieval_splits(records);
    std::vector<ImageRecord> train = filter_split(records, Split::train);
    const std::vector<ImageRecord> query = filter_split(records, Split::query);
    const std::vector<ImageRecord> gallery = filter_split(records, Split::gallery);

    // PID classifier heads need contiguous class ids; train labels are remapped
    // in pid order. Evaluation compares raw pids for equality only.
    std::map<int, int> to_class;
    for (const auto& r : train) to_class.emplace(r.pid, 0);
    int next_class = 0;
    for (auto& [pid, cls] : to_class) cls = next_class++;
    for (auto& r : train) r.pid = to_class.at(r.pid);

    const ModelDims dims = ModelDims::preset(cfg.preset);
    Rng rng(cfg.seed);
    MmflNet model(rng, dims, next_class, schema);
    Trainer trainer(cfg, model);

    fs::create_directories(run_dir);
    {
        std::ofstream cfg_out(fs::path(run_dir) / "config.json");
        cfg_out << config_to_json(cfg).dump(2) << '\n';
    }

    int start_epoch = 0;
    if (!resume_from.empty()) {
        const Checkpoint ckpt = load_checkpoint(resume_from);
        const json saved = json::parse(ckpt.config_json);
        check(saved.at("preset").get<std::string>() == cfg.preset,
              "fit: checkpoint preset does not match the requested preset");
        restore_training(ckpt, trainer);
        start_epoch = static_cast<int>(ckpt.epoch);
        check(start_epoch <= cfg.epochs, "fit: checkpoint is past the requested epoch count");
    }

    PkSampler sampler(train, cfg.p, cfg.k, cfg.seed);
    LoaderConfig loader;
    loader.image_size = dims.image_size;
    loader.augment = cfg.augment;

    const auto log_mode = resume_from.empty() ? std::ios::trunc : std::ios::app;
    std::ofstream log(fs::path(run_dir) / "train_log.jsonl", log_mode);
    std::ofstream metrics(fs::path(run_dir) / "metrics.jsonl", log_mode);
    require(log.good() && metrics.good(), "fit: cannot open log files under " + run_dir);

    FitResult result;
    result.run_dir = run_dir;
    for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
        model.set_training(true);
        const double lr = lr_at(epoch, cfg);
        const auto plans = sampler.epoch_plan(epoch);
        const std::uint64_t epoch_seed = seed_combine(cfg.seed, static_cast<std::uint64_t>(epoch));
        for (std::size_t s = 0; s < plans.size(); ++s) {
            const TripletBatch batch =
                load_batch(train, plans[s], schema, loader, seed_combine(epoch_seed, 2 * s));
            std::optional<MixedBatch> mixed;
            if (cfg.mixup) mixed = mixup(batch, cfg.mixup_alpha, seed_combine(epoch_seed, 2 * s + 1));
            const StepReport rep = trainer.step(batch, lr, mixed);
            log << json{{"epoch", epoch},
                        {"step", s},
                        {"lr", lr},
                        {"lsr", rep.losses.lsr},
                        {"ce", rep.losses.ce},
                        {"triplet", rep.losses.triplet},
                        {"center", rep.losses.center},
                        {"total", rep.losses.total}}
                       .dump()
                << '\n';
        }
        const bool last_epoch = epoch + 1 == cfg.epochs;
        if (((epoch + 1) % cfg.eval_period == 0 || last_epoch) && !query.empty()) {
            const EvalPoint pt = evaluate_model(model, query, gallery, loader, epoch);
            result.history.push_back(pt);
            metrics << json{{"epoch", pt.epoch},
                            {"mAP", pt.map},
                            {"acc1", pt.acc1},
                            {"acc5", pt.acc5},
                            {"skipped_queries", pt.skipped_queries}}
                           .dump()
                    << '\n';
            if (pt.map > result.best_map) {
                result.best_map = pt.map;
                result.best_epoch = epoch;
                save_checkpoint((fs::path(run_dir) / "best.ckpt").string(),
                                snapshot_training(trainer, cfg, epoch + 1, rng));
            }
        }
    }

    result.last = snapshot_training(trainer, cfg, cfg.epochs, rng);
    save_checkpoint((fs::path(run_dir) / "last.ckpt").string(), result.last);
    return result;
}

}  // namespace mmfl
