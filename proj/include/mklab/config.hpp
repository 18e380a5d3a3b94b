#pragma once

// JSON run configuration: strict parsing (unknown fields rejected with their
// dotted path), model presets with per-field overrides, and fully explicit
// canonical serialization so parse -> serialize -> parse is a fixed point.

#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <string>
#include <string_view>

#include "json.hpp"
#include "mklab/common.hpp"
#include "mklab/dataset.hpp"
#include "mklab/train.hpp"
#include "mklab/vit.hpp"

namespace mklab {

using json = nlohmann::json;

namespace detail {

inline std::string join_path(const std::string& path, const std::string& key) {
  return path.empty() ? key : path + "." + key;
}

inline void reject_unknown(const json& j, const std::string& path, std::initializer_list<std::string_view> allowed) {
  if (!j.is_object()) throw ConfigError((path.empty() ? std::string("config") : path) + " must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (std::string_view a : allowed)
      if (it.key() == a) {
        known = true;
        break;
      }
    if (!known) throw ConfigError("unknown config field \"" + join_path(path, it.key()) + "\"");
  }
}

inline void get_uint(const json& j, const char* key, std::size_t& out, const std::string& path) {
  if (!j.contains(key)) return;
  const json& v = j.at(key);
  if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0))
    throw ConfigError("field \"" + join_path(path, key) + "\" must be a non-negative integer");
  out = v.get<std::size_t>();
}

inline void get_u64(const json& j, const char* key, std::uint64_t& out, const std::string& path) {
  std::size_t tmp = static_cast<std::size_t>(out);
  get_uint(j, key, tmp, path);
  out = tmp;
}

inline void get_double(const json& j, const char* key, double& out, const std::string& path) {
  if (!j.contains(key)) return;
  const json& v = j.at(key);
  if (!v.is_number()) throw ConfigError("field \"" + join_path(path, key) + "\" must be a number");
  out = v.get<double>();
}

inline void get_bool(const json& j, const char* key, bool& out, const std::string& path) {
  if (!j.contains(key)) return;
  const json& v = j.at(key);
  if (!v.is_boolean()) throw ConfigError("field \"" + join_path(path, key) + "\" must be a boolean");
  out = v.get<bool>();
}

inline void get_string(const json& j, const char* key, std::string& out, const std::string& path) {
  if (!j.contains(key)) return;
  const json& v = j.at(key);
  if (!v.is_string()) throw ConfigError("field \"" + join_path(path, key) + "\" must be a string");
  out = v.get<std::string>();
}

}  // namespace detail

// ---- key variant ------------------------------------------------------------

inline json variant_to_json(const KeyVariantSpec& v) {
  return json{{"kind", kind_name(v.kind)}, {"charts", v.charts}, {"cb", v.cb}};
}

inline KeyVariantSpec variant_from_json(const json& j, const std::string& path) {
  detail::reject_unknown(j, path, {"kind", "charts", "cb"});
  KeyVariantSpec v;
  std::string kind = kind_name(v.kind);
  detail::get_string(j, "kind", kind, path);
  v.kind = parse_kind(kind);
  detail::get_uint(j, "charts", v.charts, path);
  detail::get_bool(j, "cb", v.cb, path);
  v.validate();
  return v;
}

// ---- model ----------------------------------------------------------------

inline ModelConfig model_preset(const std::string& name) {
  if (name == "vit-s16") return ModelConfig::vit_s16();
  if (name == "vit-b16") return ModelConfig::vit_b16();
  if (name == "tiny") return ModelConfig::tiny();
  throw ConfigError("unknown model preset \"" + name + "\" (expected vit-s16, vit-b16, or tiny)");
}

inline json model_to_json(const ModelConfig& c) {
  return json{{"image_size", c.image_size},
              {"patch_size", c.patch_size},
              {"channels", c.channels},
              {"dim", c.dim},
              {"depth", c.depth},
              {"heads", c.heads},
              {"mlp_dim", c.mlp_dim},
              {"num_classes", c.num_classes},
              {"variant", variant_to_json(c.variant)},
              {"gamma_init", c.gamma_init == GammaInit::Ones ? "ones" : "small"},
              {"gamma_init_value", c.gamma_init_value}};
}

inline ModelConfig model_from_json(const json& j, const std::string& path = "model") {
  detail::reject_unknown(j, path,
                         {"preset", "image_size", "patch_size", "channels", "dim", "depth", "heads", "mlp_dim",
                          "num_classes", "variant", "gamma_init", "gamma_init_value"});
  ModelConfig c;
  if (j.contains("preset")) {
    std::string name;
    detail::get_string(j, "preset", name, path);
    c = model_preset(name);
  }
  detail::get_uint(j, "image_size", c.image_size, path);
  detail::get_uint(j, "patch_size", c.patch_size, path);
  detail::get_uint(j, "channels", c.channels, path);
  detail::get_uint(j, "dim", c.dim, path);
  detail::get_uint(j, "depth", c.depth, path);
  detail::get_uint(j, "heads", c.heads, path);
  detail::get_uint(j, "mlp_dim", c.mlp_dim, path);
  detail::get_uint(j, "num_classes", c.num_classes, path);
  if (j.contains("variant")) c.variant = variant_from_json(j.at("variant"), detail::join_path(path, "variant"));
  if (j.contains("gamma_init")) {
    std::string g;
    detail::get_string(j, "gamma_init", g, path);
    if (g == "ones")
      c.gamma_init = GammaInit::Ones;
    else if (g == "small")
      c.gamma_init = GammaInit::Small;
    else
      throw ConfigError("field \"" + detail::join_path(path, "gamma_init") + "\" must be \"ones\" or \"small\"");
  }
  detail::get_double(j, "gamma_init_value", c.gamma_init_value, path);
  c.validate();
  return c;
}

// ---- training ----------------------------------------------------------------

inline json train_to_json(const TrainConfig& t) {
  return json{{"total_epochs", t.total_epochs},
              {"batch_size", t.batch_size},
              {"lr_max", t.lr_max},
              {"lr_min", t.lr_min},
              {"beta1", t.beta1},
              {"beta2", t.beta2},
              {"weight_decay", t.weight_decay},
              {"seed", t.seed},
              {"warmup_steps", t.warmup_steps},
              {"precision", t.precision},
              {"max_steps", t.max_steps},
              {"target_top1", t.target_top1}};
}

inline TrainConfig train_from_json(const json& j, const std::string& path = "train") {
  detail::reject_unknown(j, path,
                         {"total_epochs", "batch_size", "lr_max", "lr_min", "beta1", "beta2", "weight_decay", "seed",
                          "warmup_steps", "precision", "max_steps", "target_top1"});
  TrainConfig t;
  detail::get_uint(j, "total_epochs", t.total_epochs, path);
  detail::get_uint(j, "batch_size", t.batch_size, path);
  detail::get_double(j, "lr_max", t.lr_max, path);
  detail::get_double(j, "lr_min", t.lr_min, path);
  detail::get_double(j, "beta1", t.beta1, path);
  detail::get_double(j, "beta2", t.beta2, path);
  detail::get_double(j, "weight_decay", t.weight_decay, path);
  detail::get_u64(j, "seed", t.seed, path);
  detail::get_uint(j, "warmup_steps", t.warmup_steps, path);
  detail::get_string(j, "precision", t.precision, path);
  detail::get_uint(j, "max_steps", t.max_steps, path);
  detail::get_double(j, "target_top1", t.target_top1, path);
  t.validate();
  return t;
}

// ---- dataset ----------------------------------------------------------------

struct DatasetConfig {
  std::string source = "synthetic";  // "synthetic" | "idx"
  std::size_t samples_per_class = 64;
  std::uint64_t seed = 0;
  std::string images;  // idx only
  std::string labels;  // idx only

  void validate() const {
    if (source == "synthetic") return;
    if (source != "idx") throw ConfigError("dataset.source must be \"synthetic\" or \"idx\"");
    if (images.empty() || labels.empty()) throw ConfigError("idx dataset needs both \"images\" and \"labels\" paths");
    if (!std::filesystem::exists(images)) throw ConfigError("dataset images file does not exist: " + images);
    if (!std::filesystem::exists(labels)) throw ConfigError("dataset labels file does not exist: " + labels);
  }
};

inline json dataset_to_json(const DatasetConfig& d) {
  return json{{"source", d.source},
              {"samples_per_class", d.samples_per_class},
              {"seed", d.seed},
              {"images", d.images},
              {"labels", d.labels}};
}

inline DatasetConfig dataset_from_json(const json& j, const std::string& path = "dataset") {
  detail::reject_unknown(j, path, {"source", "samples_per_class", "seed", "images", "labels"});
  DatasetConfig d;
  detail::get_string(j, "source", d.source, path);
  detail::get_uint(j, "samples_per_class", d.samples_per_class, path);
  detail::get_u64(j, "seed", d.seed, path);
  detail::get_string(j, "images", d.images, path);
  detail::get_string(j, "labels", d.labels, path);
  d.validate();
  return d;
}

// Synthetic data adopts the model's geometry and class count, removing a whole
// class of silent mismatches; IDX files are validated against the model later
// by train()/evaluate().
template <typename T>
LabeledDataset<T> build_dataset(const DatasetConfig& d, const ModelConfig& m) {
  if (d.source == "synthetic")
    return synth_dataset<T>(m.num_classes, d.samples_per_class, m.image_size, d.seed, m.channels);
  return load_idx_dataset<T>(d.images, d.labels, m.num_classes);
}

// ---- top level ----------------------------------------------------------------

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DatasetConfig dataset;
  std::string output_dir = "out";
};

inline json run_config_to_json(const RunConfig& r) {
  return json{{"model", model_to_json(r.model)},
              {"train", train_to_json(r.train)},
              {"dataset", dataset_to_json(r.dataset)},
              {"output_dir", r.output_dir}};
}

// Canonical text: keys sorted (nlohmann object ordering), two-space indent,
// trailing newline.
inline std::string run_config_to_text(const RunConfig& r) { return run_config_to_json(r).dump(2) + "\n"; }

inline RunConfig run_config_from_json(const json& j, const std::string& path = "") {
  detail::reject_unknown(j, path, {"model", "train", "dataset", "output_dir"});
  RunConfig r;
  if (j.contains("model")) r.model = model_from_json(j.at("model"), detail::join_path(path, "model"));
  if (j.contains("train")) r.train = train_from_json(j.at("train"), detail::join_path(path, "train"));
  if (j.contains("dataset")) r.dataset = dataset_from_json(j.at("dataset"), detail::join_path(path, "dataset"));
  detail::get_string(j, "output_dir", r.output_dir, path);
  r.model.validate();
  r.train.validate();
  r.dataset.validate();
  return r;
}

inline RunConfig parse_run_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return run_config_from_json(j);
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_run_config(text);
}

}  // namespace mklab
