#pragma once

// Checkpoint container, little-endian:
//   "TALC" | version u32 | config length u32 | config JSON bytes | count u32
//   then per array: name length u32 | name | rows u32 | cols u32 | rows*cols f64, row-major

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "tal/nn/layers.hpp"

namespace tal::nn {

struct Checkpoint {
    nlohmann::json config;
    std::vector<std::pair<std::string, Mat>> arrays;
};

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

void save_checkpoint(const std::filesystem::path& file, const nlohmann::json& config, const ParamList& params);
Checkpoint read_checkpoint(const std::filesystem::path& file);

/// Copies arrays into params by name; every param must be present with a
/// matching shape.
void load_params(const Checkpoint& ckpt, const ParamList& params);

}  // namespace tal::nn
