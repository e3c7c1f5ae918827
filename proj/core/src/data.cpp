#include "mmfl/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "json.hpp"
#include "mmfl/rng.hpp"

namespace mmfl {

namespace {

using nlohmann::json;

template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
    for (int i = static_cast<int>(v.size()) - 1; i > 0; --i)
        std::swap(v[static_cast<std::size_t>(i)],
                  v[static_cast<std::size_t>(rng.uniform_int(0, i))]);
}

// First `n` elements of a shuffled copy (without replacement), or `n`
// independent draws when the pool is too small.
std::vector<int> draw(const std::vector<int>& pool, int n, Rng& rng, bool& replaced) {
    std::vector<int> out;
    if (static_cast<int>(pool.size()) >= n) {
        std::vector<int> copy = pool;
        shuffle(copy, rng);
        out.assign(copy.begin(), copy.begin() + n);
    } else {
        replaced = true;
        for (int i = 0; i < n; ++i)
            out.push_back(pool[static_cast<std::size_t>(
                rng.uniform_int(0, static_cast<int>(pool.size()) - 1))]);
    }
    return out;
}

}  // namespace

std::string to_string(Domain d) { return d == Domain::consumer ? "consumer" : "shop"; }
std::string to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::query: return "query";
        default: return "gallery";
    }
}

Domain domain_from_string(const std::string& s) {
    if (s == "consumer") return Domain::consumer;
    if (s == "shop") return Domain::shop;
    throw ParseError("unknown domain \"" + s + "\" (expect consumer|shop)");
}

Split split_from_string(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "query") return Split::query;
    if (s == "gallery") return Split::gallery;
    throw ParseError("unknown split \"" + s + "\" (expect train|query|gallery)");
}

std::vector<ImageRecord> load_manifest(const std::string& path, const AttributeSchema& schema) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open manifest: " + path);

    std::vector<ImageRecord> records;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const std::string where = path + " line " + std::to_string(line_no) + ": ";
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw ParseError(where + e.what());
        }
        if (!j.is_object()) throw ParseError(where + "expected a JSON object");
        for (const auto& [key, _] : j.items())
            if (key != "image_path" && key != "pid" && key != "domain" && key != "split" &&
                key != "attributes" && key != "bbox")
                throw ParseError(where + "unknown field \"" + key + "\"");

        ImageRecord r;
        try {
            r.image_path = j.at("image_path").get<std::string>();
            r.pid = j.at("pid").get<int>();
            r.domain = domain_from_string(j.at("domain").get<std::string>());
            r.split = split_from_string(j.at("split").get<std::string>());
        } catch (const json::exception& e) {
            throw ParseError(where + e.what());
        }
        if (r.pid < 0) throw ParseError(where + "pid must be non-negative");

        if (j.contains("attributes")) {
            if (!j["attributes"].is_object())
                throw ParseError(where + "attributes must be an object");
            for (const auto& [name, value] : j["attributes"].items()) {
                const int t = schema.type_index(name);
                if (t < 0)
                    throw ConfigError(where + "unknown attribute type \"" + name + "\"");
                if (!value.is_number_integer())
                    throw ParseError(where + "attribute \"" + name + "\" must be an integer");
                const int v = value.get<int>();
                const int count =
                    static_cast<int>(schema.types[static_cast<std::size_t>(t)].values.size());
                if (v < 0 || v >= count)
                    throw ConfigError(where + "attribute \"" + name + "\" value " +
                                      std::to_string(v) + " outside [0," +
                                      std::to_string(count) + ")");
                r.attributes[name] = v;
            }
        }
        if (j.contains("bbox")) {
            if (!j["bbox"].is_array() || j["bbox"].size() != 4)
                throw ParseError(where + "bbox must be [x, y, w, h]");
            for (int i = 0; i < 4; ++i) {
                if (!j["bbox"][static_cast<std::size_t>(i)].is_number_integer())
                    throw ParseError(where + "bbox entries must be integers");
                r.bbox[static_cast<std::size_t>(i)] =
                    j["bbox"][static_cast<std::size_t>(i)].get<int>();
            }
            if (r.bbox[2] <= 0 || r.bbox[3] <= 0)
                throw ParseError(where + "bbox needs positive width and height");
            r.has_bbox = true;
        }
        records.push_back(std::move(r));
    }
    return records;
}

void write_manifest(const std::string& path, const std::vector<ImageRecord>& records) {
    std::ofstream out(path);
    require(static_cast<bool>(out), "cannot write manifest: " + path);
    for (const auto& r : records) {
        json j;
        j["image_path"] = r.image_path;
        j["pid"] = r.pid;
        j["domain"] = to_string(r.domain);
        j["split"] = to_string(r.split);
        if (!r.attributes.empty()) j["attributes"] = r.attributes;
        if (r.has_bbox) j["bbox"] = r.bbox;
        out << j.dump() << "\n";
    }
}

void validate_retrieval_splits(const std::vector<ImageRecord>& records) {
    std::set<int> gallery_shop;
    for (const auto& r : records)
        if (r.split == Split::gallery && r.domain == Domain::shop) gallery_shop.insert(r.pid);
    for (const auto& r : records)
        if (r.split == Split::query && !gallery_shop.count(r.pid))
            throw ConfigError("query pid " + std::to_string(r.pid) +
                              " has no shop-domain gallery image");
}

std::vector<ImageRecord> filter_split(const std::vector<ImageRecord>& records, Split split) {
    std::vector<ImageRecord> out;
    for (const auto& r : records)
        if (r.split == split) out.push_back(r);
    return out;
}

PkSampler::PkSampler(const std::vector<ImageRecord>& records, int p, int k, std::uint64_t seed)
    : p_(p), k_(k), seed_(seed) {
    if (p < 1 || k < 1) throw ConfigError("pk sampler needs P >= 1 and K >= 1");
    for (int i = 0; i < static_cast<int>(records.size()); ++i) {
        const auto& r = records[static_cast<std::size_t>(i)];
        if (r.split != Split::train) continue;
        (r.domain == Domain::consumer ? consumer_ : shop_)[r.pid].push_back(i);
    }
    for (const auto& [pid, idx] : consumer_)
        if (shop_.count(pid)) pids_.push_back(pid);
    if (static_cast<int>(pids_.size()) < p_ + 1)
        throw ConfigError("pk sampler needs at least " + std::to_string(p_ + 1) +
                          " pids with train images in both domains, found " +
                          std::to_string(pids_.size()));
}

int PkSampler::batches_per_epoch() const {
    const int group = p_ + 1;
    return (static_cast<int>(pids_.size()) + group - 1) / group;
}

std::vector<PkSampler::BatchPlan> PkSampler::epoch_plan(int epoch) const {
    Rng rng(seed_combine(seed_, static_cast<std::uint64_t>(epoch)));
    std::vector<int> order = pids_;
    shuffle(order, rng);

    std::vector<BatchPlan> plans;
    const int group = p_ + 1;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(group)) {
        BatchPlan plan;
        for (std::size_t i = start; i < std::min(order.size(), start + group); ++i)
            plan.pids.push_back(order[i]);
        while (static_cast<int>(plan.pids.size()) < group) {
            // Short tail: top up with identities not already in this batch.
            const int extra =
                order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(order.size()) - 1))];
            if (std::find(plan.pids.begin(), plan.pids.end(), extra) == plan.pids.end())
                plan.pids.push_back(extra);
        }
        for (int pid : plan.pids) {
            const auto c = draw(consumer_.at(pid), k_, rng, plan.with_replacement);
            const auto s = draw(shop_.at(pid), k_, rng, plan.with_replacement);
            plan.record_indices.insert(plan.record_indices.end(), c.begin(), c.end());
            plan.record_indices.insert(plan.record_indices.end(), s.begin(), s.end());
        }
        plans.push_back(std::move(plan));
    }
    return plans;
}

TripletBatch load_batch(const std::vector<ImageRecord>& records,
                        const PkSampler::BatchPlan& plan, const AttributeSchema& schema,
                        const LoaderConfig& cfg, std::uint64_t seed) {
    const int B = static_cast<int>(plan.record_indices.size());
    require(B > 0, "load_batch: empty plan");
    require(B % static_cast<int>(plan.pids.size()) == 0, "load_batch: ragged plan");

    TripletBatch batch;
    batch.images = Tensor({B, 3, cfg.image_size, cfg.image_size});
    batch.attribute_targets.assign(static_cast<std::size_t>(schema.num_types()),
                                   std::vector<int>(static_cast<std::size_t>(B), -1));
    batch.num_identities = static_cast<int>(plan.pids.size());
    batch.images_per_identity = B / batch.num_identities;
    batch.with_replacement = plan.with_replacement;

    for (int slot = 0; slot < B; ++slot) {
        const auto& r = records.at(
            static_cast<std::size_t>(plan.record_indices[static_cast<std::size_t>(slot)]));
        Image img = read_image(r.image_path);
        if (r.has_bbox) img = crop(img, r.bbox[0], r.bbox[1], r.bbox[2], r.bbox[3]);
        if (cfg.augment)
            img = augment(img, cfg.augment_config,
                          seed_combine(seed, static_cast<std::uint64_t>(slot)));
        img = pad_resize(img, cfg.image_size, cfg.pad_fill);
        copy_into_batch(img, batch.images, slot);
        batch.pids.push_back(r.pid);
        batch.domains.push_back(r.domain);
        for (int t = 0; t < schema.num_types(); ++t) {
            const auto it = r.attributes.find(schema.types[static_cast<std::size_t>(t)].name);
            if (it != r.attributes.end())
                batch.attribute_targets[static_cast<std::size_t>(t)]
                                       [static_cast<std::size_t>(slot)] = it->second;
        }
    }
    return batch;
}

MixedBatch mixup_with(const TripletBatch& batch, double lambda,
                      const std::vector<int>& partner) {
    const int B = batch.images.dim(0);
    require(lambda >= 0.0 && lambda <= 1.0, "mixup: lambda must lie in [0,1]");
    require(static_cast<int>(partner.size()) == B, "mixup: one partner per sample");
    for (int p : partner) require(p >= 0 && p < B, "mixup: partner index out of range");

    MixedBatch out;
    out.lambda = lambda;
    out.partner = partner;
    out.images = batch.images;
    const std::int64_t row = batch.images.numel() / B;
    double* d = out.images.data();
    const double* s = batch.images.data();
    for (int i = 0; i < B; ++i)
        for (std::int64_t k = 0; k < row; ++k)
            d[i * row + k] = lambda * s[i * row + k] +
                             (1.0 - lambda) * s[partner[static_cast<std::size_t>(i)] * row + k];
    return out;
}

MixedBatch mixup(const TripletBatch& batch, double alpha, std::uint64_t seed) {
    if (alpha <= 0.0) throw ConfigError("mixup: alpha must be positive");
    const int B = batch.images.dim(0);
    require(B >= 2, "mixup: batch must have at least two samples");
    Rng rng(seed);
    const double lambda = rng.beta(alpha, alpha);
    std::vector<int> partner(static_cast<std::size_t>(B));
    for (int i = 0; i < B; ++i) partner[static_cast<std::size_t>(i)] = i;
    shuffle(partner, rng);
    return mixup_with(batch, lambda, partner);
}

namespace {

void hsv_to_rgb(double h, double s, double v, float rgb[3]) {
    h = h - std::floor(h);
    const double c = v * s, hp = h * 6.0;
    const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
    double r = 0, g = 0, b = 0;
    if (hp < 1) { r = c; g = x; }
    else if (hp < 2) { r = x; g = c; }
    else if (hp < 3) { g = c; b = x; }
    else if (hp < 4) { g = x; b = c; }
    else if (hp < 5) { r = x; b = c; }
    else { r = c; b = x; }
    rgb[0] = static_cast<float>(r + v - c);
    rgb[1] = static_cast<float>(g + v - c);
    rgb[2] = static_cast<float>(b + v - c);
}

struct Pattern {
    double hue;       // base colour
    int stripes;      // frequency, 2..9
    int orientation;  // 0 horizontal, 1 vertical, 2 diagonal, 3 anti-diagonal
    int shape;        // 0 disc, 1 square, 2 cross, 3 ring
};

Pattern pattern_for(std::uint64_t seed, int pid) {
    Rng rng(seed_combine(seed, static_cast<std::uint64_t>(pid)));
    Pattern p;
    p.hue = rng.uniform();
    p.stripes = rng.uniform_int(2, 9);
    p.orientation = rng.uniform_int(0, 3);
    p.shape = rng.uniform_int(0, 3);
    return p;
}

Image render_pattern(const Pattern& p, int size, double phase) {
    float base[3], stripe[3], accent[3];
    hsv_to_rgb(p.hue, 0.7, 0.8, base);
    hsv_to_rgb(p.hue + 0.5, 0.7, 0.6, stripe);
    hsv_to_rgb(p.hue + 0.25, 0.9, 0.9, accent);

    Image img(size, size);
    const double freq = p.stripes * std::acos(-1.0) / size;
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            double t;
            switch (p.orientation) {
                case 0: t = y; break;
                case 1: t = x; break;
                case 2: t = (x + y) / 2.0; break;
                default: t = (x - y) / 2.0; break;
            }
            const bool on = std::sin(freq * t + phase) > 0.0;
            for (int c = 0; c < 3; ++c)
                img.at(c, y, x) = on ? stripe[c] : base[c];
        }

    const double cx = size / 2.0, cy = size / 2.0, rad = size / 5.0;
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const double dx = x - cx, dy = y - cy;
            bool in = false;
            switch (p.shape) {
                case 0: in = dx * dx + dy * dy <= rad * rad; break;
                case 1: in = std::abs(dx) <= rad && std::abs(dy) <= rad; break;
                case 2:
                    in = (std::abs(dx) <= rad / 2.5 && std::abs(dy) <= rad) ||
                         (std::abs(dy) <= rad / 2.5 && std::abs(dx) <= rad);
                    break;
                default: {
                    const double d2 = dx * dx + dy * dy;
                    in = d2 <= rad * rad && d2 >= 0.45 * rad * rad;
                    break;
                }
            }
            if (in)
                for (int c = 0; c < 3; ++c) img.at(c, y, x) = accent[c];
        }
    return img;
}

// Consumer-side perturbations approximating the domain gap: clutter at the
// border, a brightness shift, and one occluding patch.
void perturb_consumer(Image& img, Rng& rng) {
    const int size = img.height;
    const int blobs = rng.uniform_int(2, 5);
    for (int i = 0; i < blobs; ++i) {
        float colour[3];
        hsv_to_rgb(rng.uniform(), 0.5, rng.uniform(0.3, 1.0), colour);
        const int bw = rng.uniform_int(size / 10, size / 4);
        const int bh = rng.uniform_int(size / 10, size / 4);
        // Clutter hugs a randomly chosen edge of the frame.
        const int edge = rng.uniform_int(0, 3);
        int x0 = rng.uniform_int(0, size - bw), y0 = rng.uniform_int(0, size - bh);
        if (edge == 0) y0 = 0;
        else if (edge == 1) y0 = size - bh;
        else if (edge == 2) x0 = 0;
        else x0 = size - bw;
        for (int y = y0; y < y0 + bh; ++y)
            for (int x = x0; x < x0 + bw; ++x)
                for (int c = 0; c < 3; ++c) img.at(c, y, x) = colour[c];
    }

    const double shift = rng.uniform(-0.18, 0.18);
    for (auto& v : img.data) v = std::min(1.0f, std::max(0.0f, v + static_cast<float>(shift)));

    const int ow = rng.uniform_int(size / 8, size / 4);
    const int oh = rng.uniform_int(size / 8, size / 4);
    const int ox = rng.uniform_int(0, size - ow), oy = rng.uniform_int(0, size - oh);
    for (int y = oy; y < oy + oh; ++y)
        for (int x = ox; x < ox + ow; ++x)
            for (int c = 0; c < 3; ++c) img.at(c, y, x) = 0.35f;
}

}  // namespace

std::vector<ImageRecord> generate_synthetic_dataset(const std::string& dir,
                                                    const SyntheticConfig& cfg,
                                                    const AttributeSchema& schema) {
    if (cfg.num_pids < 2)
        throw ConfigError("synthetic dataset needs at least 2 pids (got " +
                          std::to_string(cfg.num_pids) + ")");
    if (cfg.imgs_per_domain < 2)
        throw ConfigError("synthetic dataset needs at least 2 images per domain per pid");
    require(cfg.image_size >= 16, "synthetic dataset image size too small");
    require(schema.num_types() == 4, "synthetic attributes assume the default 4-type schema");
    std::filesystem::create_directories(dir);

    std::vector<ImageRecord> records;
    for (int pid = 0; pid < cfg.num_pids; ++pid) {
        const Pattern p = pattern_for(cfg.seed, pid);
        std::map<std::string, int> attrs;
        attrs[schema.types[0].name] = p.stripes % 4;
        attrs[schema.types[1].name] = p.orientation;
        attrs[schema.types[2].name] = static_cast<int>(p.hue * 6) % 6;
        attrs[schema.types[3].name] = p.shape;

        for (int d = 0; d < 2; ++d) {
            const Domain domain = d == 0 ? Domain::consumer : Domain::shop;
            for (int j = 0; j < cfg.imgs_per_domain; ++j) {
                Rng rng(seed_combine(seed_combine(cfg.seed, static_cast<std::uint64_t>(pid)),
                                     static_cast<std::uint64_t>(d * 100003 + j + 1)));
                Image img = render_pattern(p, cfg.image_size, rng.uniform(0.0, 0.6));
                if (domain == Domain::consumer) perturb_consumer(img, rng);

                char name[64];
                std::snprintf(name, sizeof(name), "pid%03d_%s_%02d.png", pid,
                              to_string(domain).c_str(), j);
                const std::string path = (std::filesystem::path(dir) / name).string();
                write_png(path, img);

                ImageRecord r;
                r.image_path = path;
                r.pid = pid;
                r.domain = domain;
                r.split = j + 1 < cfg.imgs_per_domain
                              ? Split::train
                              : (domain == Domain::consumer ? Split::query : Split::gallery);
                r.attributes = attrs;
                records.push_back(std::move(r));
            }
        }
    }
    write_manifest((std::filesystem::path(dir) / "manifest.jsonl").string(), records);
    return records;
}

}  // namespace mmfl
