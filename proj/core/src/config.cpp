#include "egrot/config.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <fstream>
#include <initializer_list>
#include <sstream>

#include "egrot/error.hpp"

namespace egrot {

namespace {

void reject_unknown(const nlohmann::json& j, const std::string& section, std::initializer_list<const char*> known) {
  if (!j.is_object()) throw ConfigError(section + ": expected an object");
  for (const auto& [key, value] : j.items()) {
    if (std::none_of(known.begin(), known.end(), [&](const char* k) { return key == k; })) {
      throw ConfigError(section + ": unknown key '" + key + "'");
    }
  }
}

// Reads j[key] into out when present, naming the field on type errors.
template <typename V>
void read(const nlohmann::json& j, const std::string& section, const char* key, V& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(section + "." + key + ": wrong type (" + std::string(j.at(key).type_name()) + ")");
  }
}

}  // namespace

std::string to_string(Precision p) { return p == Precision::kF32 ? "f32" : "f64"; }

Precision parse_precision(const std::string& name) {
  if (name == "f32") return Precision::kF32;
  if (name == "f64") return Precision::kF64;
  throw ConfigError("precision: unknown value '" + name + "' (expected f32|f64)");
}

EpisodeSpec DataConfig::episode_spec() const {
  EpisodeSpec s;
  s.n_ref_pool = n_ref_pool;
  s.n_query_pool = n_query_pool;
  s.crop = crop;
  s.background = synth::parse_background_policy(background);
  return s;
}

void to_json(nlohmann::json& j, const DataConfig& c) {
  j = {{"n_objects", c.n_objects}, {"crop", c.crop},   {"n_ref_pool", c.n_ref_pool},
       {"n_query_pool", c.n_query_pool}, {"seed", c.seed}, {"background", c.background}};
}

void from_json(const nlohmann::json& j, DataConfig& c) {
  reject_unknown(j, "data", {"n_objects", "crop", "n_ref_pool", "n_query_pool", "seed", "background"});
  read(j, "data", "n_objects", c.n_objects);
  read(j, "data", "crop", c.crop);
  read(j, "data", "n_ref_pool", c.n_ref_pool);
  read(j, "data", "n_query_pool", c.n_query_pool);
  read(j, "data", "seed", c.seed);
  read(j, "data", "background", c.background);
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"objects_per_batch", c.objects_per_batch},
       {"n_ref", c.n_ref},
       {"n_query", c.n_query},
       {"steps", c.steps},
       {"lr", c.lr},
       {"beta1", c.beta1},
       {"beta2", c.beta2},
       {"eps", c.eps},
       {"weight_decay", c.weight_decay},
       {"seed", c.seed},
       {"augment", c.augment},
       {"precision", to_string(c.precision)},
       {"checkpoint_every", c.checkpoint_every},
       {"freeze_encoder_after", c.freeze_encoder_after},
       {"val_every", c.val_every},
       {"val_k", c.val_k}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  reject_unknown(j, "train",
                 {"objects_per_batch", "n_ref", "n_query", "steps", "lr", "beta1", "beta2", "eps", "weight_decay",
                  "seed", "augment", "precision", "checkpoint_every", "freeze_encoder_after", "val_every",
                  "val_k"});
  read(j, "train", "objects_per_batch", c.objects_per_batch);
  read(j, "train", "n_ref", c.n_ref);
  read(j, "train", "n_query", c.n_query);
  read(j, "train", "steps", c.steps);
  read(j, "train", "lr", c.lr);
  read(j, "train", "beta1", c.beta1);
  read(j, "train", "beta2", c.beta2);
  read(j, "train", "eps", c.eps);
  read(j, "train", "weight_decay", c.weight_decay);
  read(j, "train", "seed", c.seed);
  read(j, "train", "augment", c.augment);
  if (j.contains("precision")) {
    std::string p;
    read(j, "train", "precision", p);
    c.precision = parse_precision(p);
  }
  read(j, "train", "checkpoint_every", c.checkpoint_every);
  read(j, "train", "freeze_encoder_after", c.freeze_encoder_after);
  read(j, "train", "val_every", c.val_every);
  read(j, "train", "val_k", c.val_k);
}

void to_json(nlohmann::json& j, const EvalConfig& c) { j = {{"k", c.k}, {"thresholds", c.thresholds}}; }

void from_json(const nlohmann::json& j, EvalConfig& c) {
  reject_unknown(j, "eval", {"k", "thresholds"});
  read(j, "eval", "k", c.k);
  read(j, "eval", "thresholds", c.thresholds);
}

void to_json(nlohmann::json& j, const RunConfig& c) {
  j = {{"data", c.data}, {"model", c.model}, {"train", c.train}, {"eval", c.eval}};
}

void from_json(const nlohmann::json& j, RunConfig& c) {
  reject_unknown(j, "config", {"data", "model", "train", "eval"});
  if (j.contains("data")) from_json(j.at("data"), c.data);
  if (j.contains("model")) model::from_json(j.at("model"), c.model);
  if (j.contains("train")) from_json(j.at("train"), c.train);
  if (j.contains("eval")) from_json(j.at("eval"), c.eval);
}

void RunConfig::validate() const {
  auto positive = [](std::size_t v, const char* field) {
    if (v < 1) throw ConfigError(std::string(field) + " must be >= 1");
  };
  positive(data.n_objects, "data.n_objects");
  positive(data.n_ref_pool, "data.n_ref_pool");
  positive(data.n_query_pool, "data.n_query_pool");
  if (data.crop < 4) throw ConfigError("data.crop must be >= 4");
  synth::parse_background_policy(data.background);
  model.validate();
  if (model.crop != data.crop) {
    throw ConfigError("model.crop (" + std::to_string(model.crop) + ") differs from data.crop (" +
                      std::to_string(data.crop) + ")");
  }
  positive(train.objects_per_batch, "train.objects_per_batch");
  positive(train.n_ref, "train.n_ref");
  positive(train.n_query, "train.n_query");
  if (!(train.lr > 0)) throw ConfigError("train.lr must be > 0");
  if (!(train.beta1 >= 0 && train.beta1 < 1) || !(train.beta2 >= 0 && train.beta2 < 1)) {
    throw ConfigError("train.beta1 and train.beta2 must lie in [0, 1)");
  }
  if (!(train.eps > 0)) throw ConfigError("train.eps must be > 0");
  if (train.weight_decay < 0) throw ConfigError("train.weight_decay must be >= 0");
  if (train.freeze_encoder_after < -1) throw ConfigError("train.freeze_encoder_after must be >= -1");
  positive(train.val_k, "train.val_k");
  if (eval.k.empty()) throw ConfigError("eval.k must not be empty");
  for (std::size_t k : eval.k) positive(k, "eval.k entries");
  if (eval.thresholds.empty()) throw ConfigError("eval.thresholds must not be empty");
  for (double t : eval.thresholds) {
    if (!(t > 0)) throw ConfigError("eval.thresholds entries must be > 0");
  }
}

RunConfig parse_run_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    // Translate the byte offset into line and column.
    std::size_t line = 1, col = 1;
    for (std::size_t i = 0; i + 1 < e.byte && i < text.size(); ++i) {
      if (text[i] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
    throw ConfigError("malformed JSON at line " + std::to_string(line) + ", column " + std::to_string(col) + ": " +
                      e.what());
  }
  RunConfig c;
  from_json(j, c);
  c.validate();
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoFailure("cannot open config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw IoFailure("SHA-256 computation failed");
  }
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 15]);
  }
  return out;
}

// nlohmann::json objects keep keys sorted, so dump() is already canonical.
std::string canonical_json(const nlohmann::json& j) { return j.dump(); }

std::string config_hash(const nlohmann::json& j) { return sha256_hex(canonical_json(j)); }

std::string config_hash(const RunConfig& c) { return config_hash(nlohmann::json(c)); }

std::string data_hash(const DataConfig& c) { return config_hash(nlohmann::json(c)); }

}  // namespace egrot
