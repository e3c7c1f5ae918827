#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "json.hpp"
#include "mmfl/config.hpp"
#include "mmfl/model.hpp"
#include "mmfl/tensor.hpp"

using namespace mmfl;
using nlohmann::json;

namespace {

std::string write_temp_config(const std::string& name, const std::string& body) {
    const auto path = std::filesystem::temp_directory_path() / name;
    std::ofstream out(path);
    out << body;
    return path.string();
}

struct EnvSeedGuard {
    EnvSeedGuard(const char* value) { setenv("MMFL_SEED", value, 1); }
    ~EnvSeedGuard() { unsetenv("MMFL_SEED"); }
};

}  // namespace

TEST_CASE("config: defaults form a valid training setup") {
    const Config cfg = Config::resolve("", {});
    CHECK(cfg.text("model.preset") == "full");
    CHECK(cfg.number("optim.lr") == doctest::Approx(1e-4));
    CHECK(cfg.number("loss.gamma_triplet") == doctest::Approx(1.5));
    CHECK(cfg.number("loss.beta_center") == doctest::Approx(5e-4));
    CHECK(cfg.int_list("optim.milestones") == std::vector<int>{50, 100});
    CHECK(cfg.flag("data.augment"));
    CHECK_FALSE(cfg.flag("train.mixup"));
    CHECK(cfg.number("train.epochs") == 120);
    const TrainConfig train = cfg.train();
    CHECK_NOTHROW(train.validate());
    CHECK(train.lr == doctest::Approx(1e-4));
    CHECK(train.milestones == std::vector<int>{50, 100});
    CHECK(train.p == 3);
    CHECK(train.k == 4);
}

TEST_CASE("config: file overrides defaults, command line overrides file") {
    const auto file = write_temp_config(
        "mmfl_cfg_layered.json",
        R"({"optim": {"lr": 0.01}, "train": {"epochs": 7}, "model": {"preset": "tiny"}})");
    SUBCASE("file layer wins over defaults") {
        const Config cfg = Config::resolve(file, {});
        CHECK(cfg.number("optim.lr") == doctest::Approx(0.01));
        CHECK(cfg.number("train.epochs") == 7);
        CHECK(cfg.text("model.preset") == "tiny");
        CHECK(cfg.number("optim.beta1") == doctest::Approx(0.9));  // untouched default
        CHECK(cfg.provenance.at("optim.lr") == "file");
        CHECK(cfg.provenance.at("optim.beta1") == "default");
    }
    SUBCASE("override layer wins over file") {
        const Config cfg = Config::resolve(file, {"optim.lr=0.5", "train.seed=99"});
        CHECK(cfg.number("optim.lr") == doctest::Approx(0.5));
        CHECK(cfg.number("train.epochs") == 7);  // file value survives
        CHECK(cfg.provenance.at("optim.lr") == "override");
        CHECK(cfg.provenance.at("train.seed") == "override");
        CHECK(cfg.train().seed == 99);
    }
}

TEST_CASE("config: unknown keys are rejected by name") {
    SUBCASE("in a file") {
        const auto file =
            write_temp_config("mmfl_cfg_unknown.json", R"({"foo": {"bar": 1}})");
        CHECK_THROWS_WITH_AS(Config::resolve(file, {}),
                             doctest::Contains("foo"), ConfigError);
    }
    SUBCASE("nested unknown leaf in a known section") {
        const auto file =
            write_temp_config("mmfl_cfg_unknown2.json", R"({"optim": {"lr2": 1}})");
        CHECK_THROWS_WITH_AS(Config::resolve(file, {}),
                             doctest::Contains("optim.lr2"), ConfigError);
    }
    SUBCASE("in an override") {
        CHECK_THROWS_WITH_AS(Config::resolve("", {"foo.bar=1"}),
                             doctest::Contains("foo.bar"), ConfigError);
    }
}

TEST_CASE("config: type categories are enforced") {
    SUBCASE("string where number expected") {
        const auto file =
            write_temp_config("mmfl_cfg_type1.json", R"({"optim": {"lr": "fast"}})");
        CHECK_THROWS_AS(Config::resolve(file, {}), ConfigError);
    }
    SUBCASE("number where bool expected") {
        CHECK_THROWS_AS(Config::resolve("", {"train.mixup=3"}), ConfigError);
    }
    SUBCASE("int and double are interchangeable") {
        const Config cfg = Config::resolve("", {"optim.lr=1"});
        CHECK(cfg.number("optim.lr") == doctest::Approx(1.0));
    }
    SUBCASE("list override parses as JSON") {
        const Config cfg = Config::resolve("", {"optim.milestones=[5,9]"});
        CHECK(cfg.int_list("optim.milestones") == std::vector<int>{5, 9});
    }
    SUBCASE("missing file reports the path") {
        CHECK_THROWS_WITH_AS(Config::resolve("/nonexistent/mmfl.json", {}),
                             doctest::Contains("/nonexistent/mmfl.json"), ParseError);
    }
    SUBCASE("malformed JSON file") {
        const auto file = write_temp_config("mmfl_cfg_bad.json", "{not json");
        CHECK_THROWS_AS(Config::resolve(file, {}), ParseError);
    }
    SUBCASE("override without '='") {
        CHECK_THROWS_AS(Config::resolve("", {"optim.lr"}), ConfigError);
    }
}

TEST_CASE("config: snapshot is canonical and reproducible") {
    const Config a = Config::resolve("", {"optim.lr=0.002", "model.preset=tiny"});
    const Config b = Config::resolve("", {"model.preset=tiny", "optim.lr=0.002"});
    CHECK(a.snapshot == b.snapshot);
    const json tree = json::parse(a.snapshot);  // snapshot parses back
    CHECK(tree["optim"]["lr"] == 0.002);
    CHECK(tree["model"]["preset"] == "tiny");
    CHECK(Config::default_snapshot() == Config::resolve("", {}).snapshot);
}

TEST_CASE("config: MMFL_SEED environment variable wins the seed") {
    SUBCASE("overrides defaults and overrides") {
        EnvSeedGuard env("4242");
        const Config cfg = Config::resolve("", {"train.seed=7"});
        CHECK(cfg.train().seed == 4242);
        CHECK(cfg.provenance.at("train.seed") == "env");
    }
    SUBCASE("malformed value is rejected") {
        EnvSeedGuard env("not-a-seed");
        CHECK_THROWS_AS(Config::resolve("", {}), ConfigError);
    }
}

TEST_CASE("config: typed views map onto the tree") {
    const Config cfg = Config::resolve(
        "", {"model.preset=tiny", "train.epochs=5", "optim.milestones=[2,4]",
             "loss.margin=0.7", "train.mixup=true", "data.augment=false"});
    const TrainConfig train = cfg.train();
    CHECK(train.preset == "tiny");
    CHECK(train.epochs == 5);
    CHECK(train.milestones == std::vector<int>{2, 4});
    CHECK(train.loss.margin == doctest::Approx(0.7));
    CHECK(train.mixup);
    CHECK_FALSE(train.augment);
    CHECK_NOTHROW(train.validate());

    SUBCASE("loader image size falls back to the preset") {
        const LoaderConfig loader = cfg.loader();
        CHECK(loader.image_size == ModelDims::tiny().image_size);
        CHECK_FALSE(loader.augment);
        const Config full = Config::resolve("", {});
        CHECK(full.loader().image_size == ModelDims::full().image_size);
    }
    SUBCASE("explicit image size wins") {
        const Config sized = Config::resolve("", {"data.image_size=48"});
        CHECK(sized.loader().image_size == 48);
    }
}

TEST_CASE("config: shipped preset files resolve and validate") {
    for (const char* name : {"configs/full.json", "configs/tiny.json"}) {
        const auto path = std::filesystem::path(MMFL_SOURCE_DIR) / name;
        REQUIRE(std::filesystem::exists(path));
        const Config cfg = Config::resolve(path.string(), {});
        CHECK_NOTHROW(cfg.train().validate());
    }
}
