#pragma once

#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "m2/model.hpp"
#include "m2/tensor.hpp"

namespace m2 {

// Binary tensor container, little-endian throughout:
//   magic "M2TF", u32 version, u64 metadata length, metadata (JSON, UTF-8),
//   u32 tensor count, then per tensor: u32 name length, name, u8 dtype
//   (0 = f64, 1 = f32), u32 rank, u64 dims, raw element data.
struct TensorEntry {
  std::string name;
  Tensor tensor;
};

struct TensorFile {
  nlohmann::json metadata;
  std::vector<TensorEntry> tensors;
};

void write_tensor_file(
    const std::string &path, const nlohmann::json &metadata,
    const std::vector<std::pair<std::string, const Tensor *>> &tensors,
    Precision dtype);

TensorFile read_tensor_file(const std::string &path);

// Model checkpoint = tensor container whose metadata is the config.
void save_model(Model &model, const std::string &path);
Model load_model(const std::string &path);

// Flat JSON-object config format. Unknown keys are an error.
nlohmann::json config_to_json(const ModelConfig &cfg);
ModelConfig config_from_json(const nlohmann::json &j, ModelConfig base = {});
ModelConfig load_config_file(const std::string &path);

nlohmann::json parse_json_file(const std::string &path);
void write_text_file(const std::string &path, const std::string &content);

} // namespace m2
