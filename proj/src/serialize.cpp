#include "m2/serialize.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <fstream>

namespace m2 {

namespace {

constexpr char kMagic[4] = {'M', '2', 'T', 'F'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream &os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 4);
}

void put_u64(std::ostream &os, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 8);
}

std::uint32_t get_u32(std::istream &is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char *>(b), 4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

std::uint64_t get_u64(std::istream &is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char *>(b), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

void check_stream(const std::istream &is, const std::string &path) {
  if (!is) {
    throw IoError("truncated or unreadable tensor file: " + path);
  }
}

} // namespace

void write_tensor_file(
    const std::string &path, const nlohmann::json &metadata,
    const std::vector<std::pair<std::string, const Tensor *>> &tensors,
    Precision dtype) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) {
    throw IoError("cannot open for writing: " + path);
  }
  os.write(kMagic, 4);
  put_u32(os, kVersion);
  const std::string meta = metadata.dump();
  put_u64(os, meta.size());
  os.write(meta.data(), static_cast<std::streamsize>(meta.size()));
  put_u32(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto &[name, tensor] : tensors) {
    put_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    os.put(dtype == Precision::f64 ? 0 : 1);
    put_u32(os, static_cast<std::uint32_t>(tensor->rank()));
    for (std::size_t dim : tensor->shape()) {
      put_u64(os, dim);
    }
    if (dtype == Precision::f64) {
      for (double v : tensor->data()) {
        put_u64(os, std::bit_cast<std::uint64_t>(v));
      }
    } else {
      for (double v : tensor->data()) {
        put_u32(os, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
      }
    }
  }
  if (!os) {
    throw IoError("write failed: " + path);
  }
}

TensorFile read_tensor_file(const std::string &path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) {
    throw IoError("cannot open: " + path);
  }
  char magic[4];
  is.read(magic, 4);
  check_stream(is, path);
  if (!std::equal(magic, magic + 4, kMagic)) {
    throw IoError("bad magic bytes in " + path);
  }
  const std::uint32_t version = get_u32(is);
  if (version != kVersion) {
    throw IoError("unsupported tensor file version " +
                  std::to_string(version) + " in " + path);
  }
  const std::uint64_t meta_len = get_u64(is);
  std::string meta(meta_len, '\0');
  is.read(meta.data(), static_cast<std::streamsize>(meta_len));
  check_stream(is, path);

  TensorFile file;
  try {
    file.metadata = nlohmann::json::parse(meta);
  } catch (const nlohmann::json::exception &e) {
    throw IoError("bad metadata JSON in " + path + ": " + e.what());
  }
  const std::uint32_t count = get_u32(is);
  check_stream(is, path);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = get_u32(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    const int dtype = is.get();
    if (dtype != 0 && dtype != 1) {
      throw IoError("unknown dtype in " + path);
    }
    const std::uint32_t rank = get_u32(is);
    std::vector<std::size_t> shape(rank);
    std::size_t n = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      shape[r] = static_cast<std::size_t>(get_u64(is));
      n *= shape[r];
    }
    check_stream(is, path);
    std::vector<double> values(n);
    if (dtype == 0) {
      for (std::size_t e = 0; e < n; ++e) {
        values[e] = std::bit_cast<double>(get_u64(is));
      }
    } else {
      for (std::size_t e = 0; e < n; ++e) {
        values[e] = static_cast<double>(std::bit_cast<float>(get_u32(is)));
      }
    }
    check_stream(is, path);
    file.tensors.push_back({std::move(name),
                            Tensor::from(std::move(shape), std::move(values))});
  }
  return file;
}

void save_model(Model &model, const std::string &path) {
  std::vector<std::pair<std::string, const Tensor *>> refs;
  for (const auto &nt : model.named_tensors()) {
    refs.emplace_back(nt.name, nt.tensor);
  }
  nlohmann::json meta;
  meta["kind"] = "model";
  meta["config"] = config_to_json(model.config());
  write_tensor_file(path, meta, refs, model.config().precision);
}

Model load_model(const std::string &path) {
  TensorFile file = read_tensor_file(path);
  if (!file.metadata.contains("config")) {
    throw IoError("model file lacks a config block: " + path);
  }
  Model model = Model::build(config_from_json(file.metadata["config"]));
  auto named = model.named_tensors();
  if (named.size() != file.tensors.size()) {
    throw IoError("model file tensor count mismatch: expected " +
                  std::to_string(named.size()) + ", found " +
                  std::to_string(file.tensors.size()));
  }
  for (std::size_t i = 0; i < named.size(); ++i) {
    TensorEntry &entry = file.tensors[i];
    if (entry.name != named[i].name) {
      throw IoError("model file tensor order mismatch at '" + entry.name +
                    "', expected '" + named[i].name + "'");
    }
    if (entry.tensor.shape() != named[i].tensor->shape()) {
      throw IoError("shape mismatch for tensor '" + entry.name + "'");
    }
    *named[i].tensor = std::move(entry.tensor);
  }
  return model;
}

nlohmann::json config_to_json(const ModelConfig &cfg) {
  nlohmann::json j;
  j["n_layers"] = cfg.n_layers;
  j["group_size"] = cfg.group_size;
  j["n_dense_leading"] = cfg.n_dense_leading;
  j["d_model"] = cfg.d_model;
  j["n_heads"] = cfg.n_heads;
  j["d_head"] = cfg.d_head;
  j["routed_experts_per_group"] = cfg.routed_experts_per_group;
  j["top_k"] = cfg.top_k;
  j["shared_experts_per_layer"] = cfg.shared_experts_per_layer;
  j["d_expert"] = cfg.d_expert;
  j["d_dense_ffn"] = cfg.d_dense_ffn;
  j["rope_base"] = cfg.rope_base;
  j["vocab_size"] = cfg.vocab_size;
  j["seq_len_max"] = cfg.seq_len_max;
  j["routing_mode"] = to_string(cfg.routing_mode);
  j["precision"] = to_string(cfg.precision);
  j["seed"] = cfg.seed;
  if (!cfg.assumed_fields.empty()) {
    j["assumed_fields"] = cfg.assumed_fields;
  }
  return j;
}

ModelConfig config_from_json(const nlohmann::json &j, ModelConfig base) {
  if (!j.is_object()) {
    throw IoError("config must be a flat JSON object");
  }
  ModelConfig cfg = std::move(base);
  auto overridden = [&cfg](const std::string &key) {
    std::erase(cfg.assumed_fields, key);
  };
  try {
    for (const auto &[key, value] : j.items()) {
      if (key == "n_layers") cfg.n_layers = value.get<int>();
      else if (key == "group_size") cfg.group_size = value.get<int>();
      else if (key == "n_dense_leading") cfg.n_dense_leading = value.get<int>();
      else if (key == "d_model") cfg.d_model = value.get<int>();
      else if (key == "n_heads") cfg.n_heads = value.get<int>();
      else if (key == "d_head") cfg.d_head = value.get<int>();
      else if (key == "routed_experts_per_group")
        cfg.routed_experts_per_group = value.get<int>();
      else if (key == "top_k") cfg.top_k = value.get<int>();
      else if (key == "shared_experts_per_layer")
        cfg.shared_experts_per_layer = value.get<int>();
      else if (key == "d_expert") cfg.d_expert = value.get<int>();
      else if (key == "d_dense_ffn") cfg.d_dense_ffn = value.get<int>();
      else if (key == "rope_base") cfg.rope_base = value.get<double>();
      else if (key == "vocab_size") cfg.vocab_size = value.get<int>();
      else if (key == "seq_len_max") cfg.seq_len_max = value.get<int>();
      else if (key == "routing_mode")
        cfg.routing_mode = routing_mode_from_string(value.get<std::string>());
      else if (key == "precision")
        cfg.precision = precision_from_string(value.get<std::string>());
      else if (key == "seed") cfg.seed = value.get<std::uint64_t>();
      else if (key == "assumed_fields")
        cfg.assumed_fields = value.get<std::vector<std::string>>();
      else
        throw IoError("unknown config key '" + key + "'");
      if (key != "assumed_fields") overridden(key);
    }
  } catch (const nlohmann::json::exception &e) {
    throw IoError(std::string("bad config value: ") + e.what());
  }
  return cfg;
}

ModelConfig load_config_file(const std::string &path) {
  return config_from_json(parse_json_file(path));
}

nlohmann::json parse_json_file(const std::string &path) {
  std::ifstream is(path);
  if (!is) {
    throw IoError("cannot open: " + path);
  }
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception &e) {
    throw IoError("bad JSON in " + path + ": " + e.what());
  }
}

void write_text_file(const std::string &path, const std::string &content) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) {
    throw IoError("cannot open for writing: " + path);
  }
  os.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!os) {
    throw IoError("write failed: " + path);
  }
}

} // namespace m2
