#include "mmfl/config.hpp"

#include <cstdlib>
#include <fstream>

#include "json.hpp"

namespace mmfl {

using nlohmann::json;

namespace {

json default_tree() {
    return json{
        {"model", {{"preset", "full"}}},
        {"data",
         {{"manifest", ""}, {"image_size", 0}, {"augment", true}}},  // 0 = preset's input size
        {"optim",
         {{"lr", 1e-4},
          {"beta1", 0.9},
          {"beta2", 0.999},
          {"eps", 1e-8},
          {"weight_decay", 5e-4},
          {"center_lr", 0.5},
          {"center_momentum", 0.9},
          {"milestones", json::array({50, 100})},
          {"lr_decay", 0.1}}},
        {"loss",
         {{"gamma_triplet", 1.5}, {"beta_center", 0.0005}, {"margin", 0.3}, {"smoothing", 0.1}}},
        {"train",
         {{"epochs", 120},
          {"eval_period", 10},
          {"p", 3},
          {"k", 4},
          {"mixup", false},
          {"mixup_alpha", 1.0},
          {"seed", 0}}},
        {"eval", {{"rerank", false}, {"k1", 20}, {"k2", 6}, {"lambda", 0.3}}},
        {"index", {{"n_clusters", 8}, {"probe", 3}}}};
}

bool same_category(const json& a, const json& b) {
    if (a.is_number() && b.is_number()) return true;
    return a.type() == b.type();
}

// Overlay leaves of src onto dst, rejecting keys absent from the defaults.
void merge_into(json& dst, const json& src, const std::string& prefix,
                std::map<std::string, std::string>& provenance, const std::string& source) {
    if (!src.is_object())
        throw ConfigError("config: expected an object at \"" +
                          (prefix.empty() ? std::string("<root>") : prefix) + "\"");
    for (const auto& [key, value] : src.items()) {
        const std::string dotted = prefix.empty() ? key : prefix + "." + key;
        if (!dst.contains(key)) throw ConfigError("config: unknown key \"" + dotted + "\"");
        json& slot = dst.at(key);
        if (slot.is_object()) {
            merge_into(slot, value, dotted, provenance, source);
        } else {
            if (!same_category(slot, value))
                throw ConfigError("config: key \"" + dotted + "\" expects a " +
                                  std::string(slot.type_name()) + ", got " +
                                  std::string(value.type_name()));
            slot = value;
            provenance[dotted] = source;
        }
    }
}

const json* find_leaf(const json& tree, const std::string& dotted) {
    const json* node = &tree;
    std::size_t start = 0;
    while (true) {
        const std::size_t dot = dotted.find('.', start);
        const std::string part = dotted.substr(start, dot - start);
        if (!node->is_object() || !node->contains(part)) return nullptr;
        node = &node->at(part);
        if (dot == std::string::npos) return node;
        start = dot + 1;
    }
}

void record_default_leaves(const json& tree, const std::string& prefix,
                           std::map<std::string, std::string>& provenance) {
    for (const auto& [key, value] : tree.items()) {
        const std::string dotted = prefix.empty() ? key : prefix + "." + key;
        if (value.is_object())
            record_default_leaves(value, dotted, provenance);
        else
            provenance[dotted] = "default";
    }
}

json parse_snapshot(const std::string& snapshot) { return json::parse(snapshot); }

const json& leaf_or_throw(const json& tree, const std::string& dotted) {
    const json* leaf = find_leaf(tree, dotted);
    if (leaf == nullptr) throw ConfigError("config: unknown key \"" + dotted + "\"");
    return *leaf;
}

}  // namespace

std::string Config::default_snapshot() { return default_tree().dump(2); }

Config Config::resolve(const std::string& file_path, const std::vector<std::string>& overrides) {
    json tree = default_tree();
    Config cfg;
    record_default_leaves(tree, "", cfg.provenance);

    if (!file_path.empty()) {
        std::ifstream in(file_path);
        if (!in) throw ParseError("config: cannot open " + file_path);
        json file;
        try {
            in >> file;
        } catch (const json::parse_error& e) {
            throw ParseError("config: " + file_path + ": " + e.what());
        }
        merge_into(tree, file, "", cfg.provenance, "file");
    }

    for (const std::string& item : overrides) {
        const std::size_t eq = item.find('=');
        if (eq == std::string::npos || eq == 0)
            throw ConfigError("config: override \"" + item + "\" is not key=value");
        const std::string key = item.substr(0, eq);
        const std::string raw = item.substr(eq + 1);
        const json* slot = find_leaf(tree, key);
        if (slot == nullptr || slot->is_object())
            throw ConfigError("config: unknown key \"" + key + "\"");
        json value;
        try {
            value = json::parse(raw);
        } catch (const json::parse_error&) {
            value = raw;  // bare words are strings
        }
        if (!same_category(*slot, value))
            throw ConfigError("config: key \"" + key + "\" expects a " +
                              std::string(slot->type_name()) + ", got \"" + raw + "\"");
        // Rewrite the leaf through its parent path.
        json* node = &tree;
        std::size_t start = 0;
        while (true) {
            const std::size_t dot = key.find('.', start);
            const std::string part = key.substr(start, dot - start);
            if (dot == std::string::npos) {
                node->at(part) = value;
                break;
            }
            node = &node->at(part);
            start = dot + 1;
        }
        cfg.provenance[key] = "override";
    }

    if (const char* env_seed = std::getenv("MMFL_SEED")) {
        try {
            tree.at("train").at("seed") = std::stoull(env_seed);
        } catch (const std::exception&) {
            throw ConfigError("config: MMFL_SEED=\"" + std::string(env_seed) +
                              "\" is not an unsigned integer");
        }
        cfg.provenance["train.seed"] = "env";
    }

    cfg.snapshot = tree.dump(2);
    return cfg;
}

double Config::number(const std::string& dotted_key) const {
    const json tree = parse_snapshot(snapshot);
    const json& leaf = leaf_or_throw(tree, dotted_key);
    if (!leaf.is_number())
        throw ConfigError("config: key \"" + dotted_key + "\" is not a number");
    return leaf.get<double>();
}

bool Config::flag(const std::string& dotted_key) const {
    const json tree = parse_snapshot(snapshot);
    const json& leaf = leaf_or_throw(tree, dotted_key);
    if (!leaf.is_boolean())
        throw ConfigError("config: key \"" + dotted_key + "\" is not a boolean");
    return leaf.get<bool>();
}

std::string Config::text(const std::string& dotted_key) const {
    const json tree = parse_snapshot(snapshot);
    const json& leaf = leaf_or_throw(tree, dotted_key);
    if (!leaf.is_string())
        throw ConfigError("config: key \"" + dotted_key + "\" is not a string");
    return leaf.get<std::string>();
}

std::vector<int> Config::int_list(const std::string& dotted_key) const {
    const json tree = parse_snapshot(snapshot);
    const json& leaf = leaf_or_throw(tree, dotted_key);
    if (!leaf.is_array())
        throw ConfigError("config: key \"" + dotted_key + "\" is not an array");
    return leaf.get<std::vector<int>>();
}

TrainConfig Config::train() const {
    const json tree = parse_snapshot(snapshot);
    TrainConfig cfg;
    cfg.epochs = tree.at("train").at("epochs").get<int>();
    cfg.lr = tree.at("optim").at("lr").get<double>();
    cfg.beta1 = tree.at("optim").at("beta1").get<double>();
    cfg.beta2 = tree.at("optim").at("beta2").get<double>();
    cfg.adam_eps = tree.at("optim").at("eps").get<double>();
    cfg.weight_decay = tree.at("optim").at("weight_decay").get<double>();
    cfg.center_lr = tree.at("optim").at("center_lr").get<double>();
    cfg.center_momentum = tree.at("optim").at("center_momentum").get<double>();
    cfg.milestones = tree.at("optim").at("milestones").get<std::vector<int>>();
    cfg.lr_decay = tree.at("optim").at("lr_decay").get<double>();
    cfg.eval_period = tree.at("train").at("eval_period").get<int>();
    cfg.seed = tree.at("train").at("seed").get<std::uint64_t>();
    cfg.preset = tree.at("model").at("preset").get<std::string>();
    cfg.p = tree.at("train").at("p").get<int>();
    cfg.k = tree.at("train").at("k").get<int>();
    cfg.augment = tree.at("data").at("augment").get<bool>();
    cfg.mixup = tree.at("train").at("mixup").get<bool>();
    cfg.mixup_alpha = tree.at("train").at("mixup_alpha").get<double>();
    cfg.loss.gamma_triplet = tree.at("loss").at("gamma_triplet").get<double>();
    cfg.loss.beta_center = tree.at("loss").at("beta_center").get<double>();
    cfg.loss.margin = tree.at("loss").at("margin").get<double>();
    cfg.loss.smoothing = tree.at("loss").at("smoothing").get<double>();
    return cfg;
}

LoaderConfig Config::loader() const {
    const json tree = parse_snapshot(snapshot);
    LoaderConfig cfg;
    const int configured = tree.at("data").at("image_size").get<int>();
    cfg.image_size = configured > 0
                         ? configured
                         : ModelDims::preset(tree.at("model").at("preset").get<std::string>())
                               .image_size;
    cfg.augment = tree.at("data").at("augment").get<bool>();
    return cfg;
}

}  // namespace mmfl
