#include "mmfl/serialize.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "json.hpp"

namespace mmfl {

namespace {

using nlohmann::json;

constexpr char kEmbMagic[8] = {'M', 'M', 'F', 'L', 'E', 'M', 'B', '1'};
constexpr char kCkptMagic[8] = {'M', 'M', 'F', 'L', 'C', 'K', 'P', 'T'};

static_assert(std::endian::native == std::endian::little,
              "serializers assume a little-endian host");

template <typename T>
void write_pod(std::ofstream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& in, const std::string& path) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw ParseError("truncated file: " + path);
    return v;
}

void write_string(std::ofstream& out, const std::string& s) {
    write_pod<std::uint64_t>(out, s.size());
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::ifstream& in, const std::string& path) {
    const auto n = read_pod<std::uint64_t>(in, path);
    std::string s(n, '\0');
    in.read(s.data(), static_cast<std::streamsize>(n));
    if (!in) throw ParseError("truncated file: " + path);
    return s;
}

}  // namespace

void save_embeddings(const std::string& path, const EmbeddingStore& store) {
    const int n = store.count();
    require(static_cast<int>(store.ids.size()) == n &&
                static_cast<int>(store.domains.size()) == n &&
                static_cast<int>(store.paths.size()) == n,
            "embedding store metadata rows must match the matrix");
    for (float v : store.matrix)
        require(std::isfinite(v), "embedding store contains a non-finite value");

    std::ofstream out(path, std::ios::binary);
    require(static_cast<bool>(out), "cannot write embeddings: " + path);
    out.write(kEmbMagic, sizeof(kEmbMagic));
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(store.dim));
    write_pod<std::uint64_t>(out, static_cast<std::uint64_t>(n));
    out.write(reinterpret_cast<const char*>(store.matrix.data()),
              static_cast<std::streamsize>(store.matrix.size() * sizeof(float)));
    require(static_cast<bool>(out), "failed writing embeddings: " + path);

    std::ofstream meta(path + ".meta.jsonl");
    require(static_cast<bool>(meta), "cannot write embedding metadata: " + path);
    for (int i = 0; i < n; ++i) {
        json j;
        j["row"] = i;
        j["pid"] = store.ids[static_cast<std::size_t>(i)];
        j["domain"] = to_string(store.domains[static_cast<std::size_t>(i)]);
        j["path"] = store.paths[static_cast<std::size_t>(i)];
        meta << j.dump() << "\n";
    }
}

EmbeddingStore load_embeddings(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open embeddings: " + path);
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kEmbMagic, sizeof(magic)) != 0)
        throw ParseError("not an embedding store: " + path);

    EmbeddingStore store;
    store.dim = static_cast<int>(read_pod<std::uint32_t>(in, path));
    const auto count = read_pod<std::uint64_t>(in, path);
    store.matrix.resize(static_cast<std::size_t>(count) * store.dim);
    in.read(reinterpret_cast<char*>(store.matrix.data()),
            static_cast<std::streamsize>(store.matrix.size() * sizeof(float)));
    if (!in) throw ParseError("truncated embedding store: " + path);

    store.ids.resize(static_cast<std::size_t>(count));
    store.domains.resize(static_cast<std::size_t>(count));
    store.paths.resize(static_cast<std::size_t>(count));
    std::ifstream meta(path + ".meta.jsonl");
    if (!meta) throw ParseError("missing embedding metadata: " + path + ".meta.jsonl");
    std::string line;
    std::uint64_t rows = 0;
    while (std::getline(meta, line)) {
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw ParseError(path + ".meta.jsonl: " + e.what());
        }
        const auto row = j.at("row").get<std::uint64_t>();
        if (row >= count) throw ParseError("metadata row out of range: " + path);
        store.ids[row] = j.at("pid").get<int>();
        store.domains[row] = domain_from_string(j.at("domain").get<std::string>());
        store.paths[row] = j.at("path").get<std::string>();
        ++rows;
    }
    if (rows != count) throw ParseError("metadata row count mismatch: " + path);

    store.normalized = count > 0;
    for (std::uint64_t i = 0; i < count && store.normalized; ++i) {
        double norm = 0.0;
        const float* r = store.row(static_cast<int>(i));
        for (int d = 0; d < store.dim; ++d) norm += static_cast<double>(r[d]) * r[d];
        store.normalized = std::abs(std::sqrt(norm) - 1.0) <= 1e-5;
    }
    return store;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::ofstream out(path, std::ios::binary);
    require(static_cast<bool>(out), "cannot write checkpoint: " + path);
    out.write(kCkptMagic, sizeof(kCkptMagic));
    write_pod<std::uint32_t>(out, ckpt.version);
    write_pod<std::int32_t>(out, ckpt.epoch);
    write_string(out, ckpt.config_json);
    write_string(out, ckpt.rng_state);
    write_pod<std::uint64_t>(out, ckpt.tensors.size());
    for (const auto& [name, tensor] : ckpt.tensors) {
        write_string(out, name);
        write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(tensor.ndim()));
        for (int i = 0; i < tensor.ndim(); ++i)
            write_pod<std::int32_t>(out, tensor.dim(i));
        out.write(reinterpret_cast<const char*>(tensor.data()),
                  static_cast<std::streamsize>(tensor.numel() * sizeof(double)));
    }
    require(static_cast<bool>(out), "failed writing checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open checkpoint: " + path);
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kCkptMagic, sizeof(magic)) != 0)
        throw ParseError("not a checkpoint: " + path);

    Checkpoint ckpt;
    ckpt.version = read_pod<std::uint32_t>(in, path);
    if (ckpt.version != 1)
        throw ParseError("unsupported checkpoint version " + std::to_string(ckpt.version));
    ckpt.epoch = read_pod<std::int32_t>(in, path);
    ckpt.config_json = read_string(in, path);
    ckpt.rng_state = read_string(in, path);
    const auto n = read_pod<std::uint64_t>(in, path);
    for (std::uint64_t t = 0; t < n; ++t) {
        const std::string name = read_string(in, path);
        const auto ndim = read_pod<std::uint32_t>(in, path);
        std::vector<int> shape;
        for (std::uint32_t i = 0; i < ndim; ++i)
            shape.push_back(read_pod<std::int32_t>(in, path));
        Tensor tensor(shape);
        in.read(reinterpret_cast<char*>(tensor.data()),
                static_cast<std::streamsize>(tensor.numel() * sizeof(double)));
        if (!in) throw ParseError("truncated checkpoint: " + path);
        ckpt.tensors.emplace(name, std::move(tensor));
    }
    return ckpt;
}

}  // namespace mmfl
