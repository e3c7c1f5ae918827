#pragma once

#include <map>
#include <string>
#include <vector>

#include "mmfl/trainer.hpp"

namespace mmfl {

// Layered key-value configuration: defaults < config file < command-line
// overrides (dotted paths, e.g. "optim.lr=0.0001") < MMFL_SEED. Unknown keys
// are rejected by name; the resolved tree serializes to a canonical snapshot
// that reproduces the run when replayed.
struct Config {
    std::string snapshot;  // canonical JSON of the resolved tree (sorted keys)
    std::map<std::string, std::string> provenance;  // leaf key -> default|file|override|env

    static std::string default_snapshot();
    static Config resolve(const std::string& file_path,
                          const std::vector<std::string>& overrides);

    double number(const std::string& dotted_key) const;
    bool flag(const std::string& dotted_key) const;
    std::string text(const std::string& dotted_key) const;
    std::vector<int> int_list(const std::string& dotted_key) const;

    // Typed views over the sections the commands consume.
    TrainConfig train() const;
    LoaderConfig loader() const;
};

}  // namespace mmfl
