#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "mmfl/config.hpp"
#include "mmfl/eval.hpp"
#include "mmfl/trainer.hpp"

using namespace mmfl;
using nlohmann::json;

namespace {

std::unique_ptr<MmflNet> load_model(const std::string& checkpoint_path) {
    if (!std::filesystem::exists(checkpoint_path))
        throw ParseError("checkpoint not found: " + checkpoint_path);
    return model_from_checkpoint(load_checkpoint(checkpoint_path));
}

LoaderConfig eval_loader(const MmflNet& model) {
    LoaderConfig cfg;
    cfg.image_size = model.dims().image_size;
    cfg.augment = false;
    return cfg;
}

std::vector<int> pids_of(const std::vector<ImageRecord>& records) {
    std::vector<int> out;
    out.reserve(records.size());
    for (const auto& r : records) out.push_back(r.pid);
    return out;
}

void write_text(const std::string& path, const std::string& body) {
    std::ofstream out(path);
    if (!out) throw ParseError("cannot write " + path);
    out << body << '\n';
}

int cmd_train(const std::string& config_path, const std::string& out_dir,
              const std::string& resume, const std::vector<std::string>& overrides) {
    const Config config = Config::resolve(config_path, overrides);
    const std::string manifest = config.text("data.manifest");
    if (manifest.empty())
        throw ConfigError("data.manifest is required (set it in the config file or as "
                          "data.manifest=<path>)");
    const AttributeSchema schema = AttributeSchema::default_schema();
    const auto records = load_manifest(manifest, schema);

    std::filesystem::create_directories(out_dir);
    write_text((std::filesystem::path(out_dir) / "resolved.json").string(), config.snapshot);

    const FitResult result = fit(config.train(), records, schema, out_dir, resume);
    for (const auto& pt : result.history)
        std::printf("epoch %d: mAP=%.4f acc1=%.4f acc5=%.4f\n", pt.epoch, pt.map, pt.acc1,
                    pt.acc5);
    if (result.best_epoch >= 0)
        std::printf("best: mAP=%.4f at epoch %d\n", result.best_map, result.best_epoch);
    std::printf("run dir: %s\n", out_dir.c_str());
    return 0;
}

int cmd_extract(const std::string& checkpoint, const std::string& manifest,
                const std::string& split, const std::string& out_path) {
    auto model = load_model(checkpoint);
    const auto records =
        filter_split(load_manifest(manifest, model->schema()), split_from_string(split));
    const EmbeddingStore store = extract_embeddings(*model, records, eval_loader(*model));
    save_embeddings(out_path, store);
    std::printf("wrote %d x %d embeddings to %s\n", store.count(), store.dim,
                out_path.c_str());
    return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& manifest, bool rerank, int k1,
             int k2, double lambda, const std::string& out_path) {
    auto model = load_model(checkpoint);
    const auto records = load_manifest(manifest, model->schema());
    validate_retrieval_splits(records);
    const auto queries = filter_split(records, Split::query);
    const auto gallery = filter_split(records, Split::gallery);

    const LoaderConfig lcfg = eval_loader(*model);
    const EmbeddingStore qs = extract_embeddings(*model, queries, lcfg);
    const EmbeddingStore gs = extract_embeddings(*model, gallery, lcfg);
    const Tensor dist =
        rerank ? k_reciprocal_rerank(qs, gs, k1, k2, lambda) : distance_matrix(qs, gs);
    const EvalResult res = compute_cmc_map(dist, pids_of(queries), pids_of(gallery));

    std::printf("mAP=%.4f\n", res.mAP);
    for (int k : {1, 10, 20, 50}) std::printf("Acc@%d=%.4f\n", k, res.acc_at(k));
    if (res.skipped_queries > 0)
        std::printf("skipped queries (no gallery match): %d\n", res.skipped_queries);

    if (!out_path.empty()) {
        json report;
        report["mAP"] = res.mAP;
        report["cmc"] = res.cmc;
        report["per_query_ap"] = res.per_query_ap;
        report["skipped_queries"] = res.skipped_queries;
        json acc;
        for (int k : {1, 10, 20, 50}) acc[std::to_string(k)] = res.acc_at(k);
        report["acc"] = acc;
        report["rerank"] = rerank;
        if (rerank) {
            report["k1"] = k1;
            report["k2"] = k2;
            report["lambda"] = lambda;
        }
        write_text(out_path, report.dump(2));
        std::printf("report: %s\n", out_path.c_str());
    }
    return 0;
}

int cmd_index(const std::string& store_path, int clusters, int probe, std::uint64_t seed,
              const std::string& out_path) {
    const EmbeddingStore store = load_embeddings(store_path);
    const RetrievalIndex index = build_index(store, clusters, seed);
    json doc;
    doc["store"] = store_path;
    doc["n_clusters"] = index.n_clusters;
    doc["probe"] = probe > 0 ? probe : std::min(index.probe_clusters, index.n_clusters);
    doc["centroids"] = index.centroids;
    doc["assignments"] = index.assignments;
    doc["inertia_trace"] = index.inertia_trace;
    write_text(out_path, doc.dump());
    std::printf("indexed %d rows into %d clusters (%zu Lloyd iterations) -> %s\n",
                store.count(), index.n_clusters, index.inertia_trace.size(),
                out_path.c_str());
    return 0;
}

RetrievalIndex load_index(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("index not found: " + path);
    json doc;
    try {
        in >> doc;
    } catch (const json::exception& e) {
        throw ParseError("index " + path + ": " + e.what());
    }
    RetrievalIndex index;
    index.store = load_embeddings(doc.at("store").get<std::string>());
    index.n_clusters = doc.at("n_clusters").get<int>();
    index.probe_clusters = doc.at("probe").get<int>();
    index.centroids = doc.at("centroids").get<std::vector<float>>();
    index.assignments = doc.at("assignments").get<std::vector<int>>();
    index.inertia_trace = doc.at("inertia_trace").get<std::vector<double>>();
    return index;
}

int cmd_query(const std::string& index_path, const std::string& image_path,
              const std::string& checkpoint, int row, int top_k, int probe) {
    const RetrievalIndex index = load_index(index_path);
    std::vector<float> embedding;
    if (!image_path.empty()) {
        auto model = load_model(checkpoint);
        ImageRecord rec;
        rec.image_path = image_path;
        const EmbeddingStore one = extract_embeddings(*model, {rec}, eval_loader(*model));
        embedding.assign(one.row(0), one.row(0) + one.dim);
    } else {
        if (row < 0 || row >= index.store.count())
            throw ConfigError("--row out of range (store has " +
                              std::to_string(index.store.count()) + " rows)");
        embedding.assign(index.store.row(row), index.store.row(row) + index.store.dim);
    }
    const int effective_probe = probe > 0 ? probe : index.probe_clusters;
    const auto hits = query_index(index, embedding, top_k, effective_probe);
    for (std::size_t i = 0; i < hits.size(); ++i)
        std::printf("%2zu. row=%d dist=%.6f pid=%d domain=%s %s\n", i + 1, hits[i].row,
                    hits[i].distance, index.store.ids[hits[i].row],
                    to_string(index.store.domains[hits[i].row]).c_str(),
                    index.store.paths[hits[i].row].c_str());
    return 0;
}

int cmd_gen_data(const std::string& out_dir, const SyntheticConfig& cfg) {
    const auto records =
        generate_synthetic_dataset(out_dir, cfg, AttributeSchema::default_schema());
    std::printf("wrote %zu records to %s\n", records.size(),
                (std::filesystem::path(out_dir) / "manifest.jsonl").string().c_str());
    return 0;
}

int cmd_stats(const std::string& preset, int num_pids, int latency_runs) {
    const ModelStats s = report_model_stats(ModelDims::preset(preset), num_pids, latency_runs);
    std::printf("preset: %s  (num_pids=%d)\n", preset.c_str(), num_pids);
    std::printf("parameters: %lld (%.2fM)\n", static_cast<long long>(s.parameter_count),
                s.parameter_count / 1e6);
    std::printf("mult-adds per image: %lld (%.2fG)\n", static_cast<long long>(s.macs),
                s.macs / 1e9);
    if (s.latency_runs > 0)
        std::printf("median forward latency: %.1f ms over %d runs\n", s.median_latency_ms,
                    s.latency_runs);
    return 0;
}

int cmd_metrics_attr(const std::string& checkpoint, const std::string& manifest,
                     const std::string& split, const std::string& out_path) {
    auto model = load_model(checkpoint);
    auto records = load_manifest(manifest, model->schema());
    if (split != "all") records = filter_split(records, split_from_string(split));
    if (records.empty()) throw ConfigError("no records in split \"" + split + "\"");

    const AttributeSchema& schema = model->schema();
    const int n = static_cast<int>(records.size());
    std::vector<Tensor> scores;
    std::vector<std::vector<int>> targets(schema.num_types());
    for (int t = 0; t < schema.num_types(); ++t) {
        scores.emplace_back(
            Tensor::zeros({n, static_cast<int>(schema.types[t].values.size())}));
        targets[t].assign(n, -1);
    }

    const LoaderConfig lcfg = eval_loader(*model);
    model->set_training(false);
    NoGradGuard guard;
    for (int i = 0; i < n; ++i) {
        const auto& r = records[i];
        Image img = read_image(r.image_path);
        if (r.has_bbox) img = crop(img, r.bbox[0], r.bbox[1], r.bbox[2], r.bbox[3]);
        img = pad_resize(img, lcfg.image_size, lcfg.pad_fill);
        Tensor batch({1, 3, lcfg.image_size, lcfg.image_size});
        copy_into_batch(img, batch, 0);
        const ModelOutput out = model->forward(Var(std::move(batch)));
        for (int t = 0; t < schema.num_types(); ++t) {
            // Ensemble: mean of the four branch log-probabilities.
            for (int b = 0; b < 4; ++b) {
                const Tensor& logp = out.heads.branches[b].attr_logp[t].value();
                for (int j = 0; j < logp.dim(1); ++j)
                    scores[t].at(i, j) += logp.at(0, j) / 4.0;
            }
            const auto it = r.attributes.find(schema.types[t].name);
            if (it != r.attributes.end()) targets[t][i] = it->second;
        }
    }

    const AttributeMetrics metrics = attribute_metrics(scores, targets, schema);
    json report;
    for (const auto& type : metrics.types) {
        std::printf("%-12s n=%-4d top1=%.4f macroP=%.4f macroR=%.4f macroF1=%.4f\n",
                    type.name.c_str(), type.evaluated, type.top1, type.macro_precision,
                    type.macro_recall, type.macro_f1);
        json entry;
        entry["evaluated"] = type.evaluated;
        entry["top1"] = type.top1;
        entry["macro_precision"] = type.macro_precision;
        entry["macro_recall"] = type.macro_recall;
        entry["macro_f1"] = type.macro_f1;
        entry["topk"] = type.topk;
        entry["confusion"] = type.confusion;
        report[type.name] = entry;
    }
    if (!out_path.empty()) {
        write_text(out_path, report.dump(2));
        std::printf("report: %s\n", out_path.c_str());
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"mmfl: multi-scale multi-granularity retrieval toolkit"};
    app.require_subcommand(1);

    auto* train = app.add_subcommand("train", "Train a model and write a run directory");
    std::string train_config, train_out = "run", train_resume;
    std::vector<std::string> train_overrides;
    train->add_option("--config", train_config, "JSON config file");
    train->add_option("--out", train_out, "run directory");
    train->add_option("--resume", train_resume, "checkpoint to resume from");
    train->add_option("overrides", train_overrides, "dotted-path overrides (key=value)");

    auto* extract = app.add_subcommand("extract", "Export embeddings for one split");
    std::string ex_ckpt, ex_manifest, ex_split = "gallery", ex_out;
    extract->add_option("--checkpoint", ex_ckpt)->required();
    extract->add_option("--manifest", ex_manifest)->required();
    extract->add_option("--split", ex_split, "train|query|gallery");
    extract->add_option("--out", ex_out)->required();

    auto* eval = app.add_subcommand("eval", "Retrieval evaluation (query vs gallery)");
    std::string ev_ckpt, ev_manifest, ev_out;
    bool ev_rerank = false;
    int ev_k1 = 20, ev_k2 = 6;
    double ev_lambda = 0.3;
    eval->add_option("--checkpoint", ev_ckpt)->required();
    eval->add_option("--manifest", ev_manifest)->required();
    eval->add_flag("--rerank", ev_rerank, "apply k-reciprocal re-ranking");
    eval->add_option("--k1", ev_k1);
    eval->add_option("--k2", ev_k2);
    eval->add_option("--lambda", ev_lambda);
    eval->add_option("--out", ev_out, "JSON report path");

    auto* index = app.add_subcommand("index", "Cluster an embedding store for fast search");
    std::string ix_store, ix_out;
    int ix_clusters = 8, ix_probe = 0;
    std::uint64_t ix_seed = 0;
    index->add_option("--store", ix_store)->required();
    index->add_option("--clusters", ix_clusters);
    index->add_option("--probe", ix_probe, "default probe count stored in the index");
    index->add_option("--seed", ix_seed);
    index->add_option("--out", ix_out)->required();

    auto* query = app.add_subcommand("query", "Rank gallery rows for one query");
    std::string q_index, q_image, q_ckpt;
    int q_row = -1, q_topk = 10, q_probe = 0;
    query->add_option("--index", q_index)->required();
    query->add_option("--image", q_image, "query image (needs --checkpoint)");
    query->add_option("--checkpoint", q_ckpt);
    query->add_option("--row", q_row, "query by store row instead of an image");
    query->add_option("--topk", q_topk);
    query->add_option("--probe", q_probe, "clusters to scan (default: index setting)");

    auto* gen = app.add_subcommand("gen-data", "Render a synthetic retrieval dataset");
    std::string g_out;
    SyntheticConfig g_cfg;
    gen->add_option("--out", g_out)->required();
    gen->add_option("--pids", g_cfg.num_pids);
    gen->add_option("--imgs-per-domain", g_cfg.imgs_per_domain);
    gen->add_option("--image-size", g_cfg.image_size);
    gen->add_option("--seed", g_cfg.seed);

    auto* stats = app.add_subcommand("stats", "Parameter/mult-add/latency report");
    std::string st_preset = "full";
    int st_pids = 1000, st_runs = 10;
    stats->add_option("--preset", st_preset, "full|tiny");
    stats->add_option("--pids", st_pids);
    stats->add_option("--latency-runs", st_runs);

    auto* mattr = app.add_subcommand("metrics-attr", "Attribute prediction metrics");
    std::string ma_ckpt, ma_manifest, ma_split = "all", ma_out;
    mattr->add_option("--checkpoint", ma_ckpt)->required();
    mattr->add_option("--manifest", ma_manifest)->required();
    mattr->add_option("--split", ma_split, "train|query|gallery|all");
    mattr->add_option("--out", ma_out, "JSON report path");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*train) return cmd_train(train_config, train_out, train_resume, train_overrides);
        if (*extract) return cmd_extract(ex_ckpt, ex_manifest, ex_split, ex_out);
        if (*eval) return cmd_eval(ev_ckpt, ev_manifest, ev_rerank, ev_k1, ev_k2, ev_lambda,
                                   ev_out);
        if (*index) return cmd_index(ix_store, ix_clusters, ix_probe, ix_seed, ix_out);
        if (*query) return cmd_query(q_index, q_image, q_ckpt, q_row, q_topk, q_probe);
        if (*gen) return cmd_gen_data(g_out, g_cfg);
        if (*stats) return cmd_stats(st_preset, st_pids, st_runs);
        if (*mattr) return cmd_metrics_attr(ma_ckpt, ma_manifest, ma_split, ma_out);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
