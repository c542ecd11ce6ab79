#pragma once

#include <nlohmann/json.hpp>

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "posealign/ablation.hpp"
#include "posealign/engine.hpp"
#include "posealign/evalkit.hpp"
#include "posealign/json_util.hpp"
#include "posealign/model.hpp"
#include "posealign/synthgen.hpp"

#ifndef POSEALIGN_VERSION
#define POSEALIGN_VERSION "0.1.0+unknown"
#endif

namespace posealign {

inline constexpr int kRunConfigVersion = 1;

inline const char* version_string() { return POSEALIGN_VERSION; }

struct DataConfig {
  int train_count = 500;
  int val_count = 100;
  bool operator==(const DataConfig&) const = default;
};

struct EvalConfig {
  DecodeOptions decode;
  int max_dets = 20;
  bool operator==(const EvalConfig&) const = default;

  EvalOptions options() const {
    EvalOptions o;
    o.max_dets = max_dets;
    return o;
  }
};

/// Everything a run needs; validated as a whole before any work starts.
struct RunConfig {
  int format_version = kRunConfigVersion;
  std::string output_dir = "runs/default";
  SceneSpec scene;
  DataConfig data;
  ModelConfig model;
  TrainConfig train;
  EvalConfig eval;
  AblationSettings ablation;

  void validate() const {
    if (format_version != kRunConfigVersion) {
      throw ConfigError("format_version", "unsupported version " + std::to_string(format_version) + " (expected " +
                                              std::to_string(kRunConfigVersion) + ")");
    }
    if (output_dir.empty()) throw ConfigError("output_dir", "must not be empty");
    scene.validate();
    if (data.train_count < 1) throw ConfigError("data.train_count", "must be >= 1");
    if (data.val_count < 1) throw ConfigError("data.val_count", "must be >= 1");
    model.validate();
    if (scene.height % model.max_stride() != 0 || scene.width % model.max_stride() != 0) {
      throw ConfigError("scene.height", "image size must be divisible by the largest stride " +
                                            std::to_string(model.max_stride()));
    }
    train.validate();
    eval.decode.validate();
    if (eval.max_dets < 1) throw ConfigError("eval.max_dets", "must be >= 1");
    ablation.validate();
  }
  bool operator==(const RunConfig&) const = default;
};

inline nlohmann::json run_config_to_json(const RunConfig& c) {
  nlohmann::json scene = c.scene;
  return {{"format_version", c.format_version},
          {"output_dir", c.output_dir},
          {"scene", scene},
          {"data", {{"train_count", c.data.train_count}, {"val_count", c.data.val_count}}},
          {"model", model_to_json(c.model)},
          {"head", head_to_json(c.model.head)},
          {"train", train_to_json(c.train)},
          {"eval",
           {{"score_thresh", c.eval.decode.score_thresh},
            {"topk_per_level", c.eval.decode.topk_per_level},
            {"nms_thresh", c.eval.decode.nms_thresh},
            {"max_dets", c.eval.max_dets}}},
          {"ablation", {{"seeds", c.ablation.seeds}, {"rows", c.ablation.rows}, {"loss_window", c.ablation.loss_window}}}};
}

/// Strict reader: absent keys keep their defaults, unknown keys and wrong
/// types are errors naming the dotted path.
inline RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c;
  JsonObjectReader r(j, "");
  r.get("format_version", c.format_version);
  if (c.format_version != kRunConfigVersion) {
    throw ConfigError("format_version", "unsupported version " + std::to_string(c.format_version));
  }
  r.get("output_dir", c.output_dir);
  if (const auto* s = r.child("scene")) {
    JsonObjectReader sr(*s, "scene");
    sr.get("seed", c.scene.seed);
    sr.get("height", c.scene.height);
    sr.get("width", c.scene.width);
    sr.get("min_instances", c.scene.min_instances);
    sr.get("max_instances", c.scene.max_instances);
    sr.get("min_side", c.scene.min_side);
    sr.get("max_side", c.scene.max_side);
    sr.get("occlusion_prob", c.scene.occlusion_prob);
    sr.finish();
  }
  if (const auto* d = r.child("data")) {
    JsonObjectReader dr(*d, "data");
    dr.get("train_count", c.data.train_count);
    dr.get("val_count", c.data.val_count);
    dr.finish();
  }
  if (const auto* m = r.child("model")) c.model = model_from_json(*m, "model", c.model);
  if (const auto* h = r.child("head")) c.model.head = head_from_json(*h, "head", c.model.head);
  if (const auto* t = r.child("train")) c.train = train_from_json(*t, "train", c.train);
  if (const auto* e = r.child("eval")) {
    JsonObjectReader er(*e, "eval");
    er.get("score_thresh", c.eval.decode.score_thresh);
    er.get("topk_per_level", c.eval.decode.topk_per_level);
    er.get("nms_thresh", c.eval.decode.nms_thresh);
    er.get("max_dets", c.eval.max_dets);
    er.finish();
  }
  if (const auto* a = r.child("ablation")) {
    JsonObjectReader ar(*a, "ablation");
    ar.get("seeds", c.ablation.seeds);
    ar.get("rows", c.ablation.rows);
    ar.get("loss_window", c.ablation.loss_window);
    ar.finish();
  }
  r.finish();
  return c;
}

/// Applies `a.b.c=value`. The value is parsed as JSON when possible and
/// taken as a string otherwise; the key must already exist.
inline void apply_override(nlohmann::json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError(assignment, "override must look like key=value");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  nlohmann::json* node = &j;
  std::stringstream ss(key);
  std::string part;
  while (std::getline(ss, part, '.')) {
    if (!node->is_object() || !node->contains(part)) throw ConfigError(key, "unknown key");
    node = &(*node)[part];
  }
  nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  *node = value;
}

/// Defaults, then the file (if any), then overrides in order; validated.
inline RunConfig parse_config(const std::string& path, const std::vector<std::string>& overrides) {
  nlohmann::json j = run_config_to_json(RunConfig{});
  if (!path.empty()) {
    std::ifstream is(path);
    if (!is) throw ConfigError("", "cannot read config file " + path);
    nlohmann::json file;
    try {
      is >> file;
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("", "config file " + path + " is not valid JSON: " + e.what());
    }
    // Validates unknown keys and types of the file on its own.
    run_config_from_json(file);
    j.merge_patch(file);
  }
  for (const auto& o : overrides) apply_override(j, o);
  RunConfig c = run_config_from_json(j);
  c.validate();
  return c;
}

}  // namespace posealign
