#pragma once

#include <nlohmann/json.hpp>

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "posealign/geometry.hpp"
#include "posealign/json_util.hpp"
#include "posealign/model.hpp"
#include "posealign/ops.hpp"
#include "posealign/rng.hpp"
#include "posealign/synthgen.hpp"
#include "posealign/targets.hpp"
#include "posealign/tensor.hpp"

namespace posealign {

struct TrainConfig {
  double base_lr = 0.01;
  int max_iter = 3000;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int batch_size = 4;
  double lambda_cls = 1.0;
  double lambda_kp = 1.0;
  double lambda_ctr = 1.0;
  double lambda_hm = 1.0;
  double lambda_box = 1.0;
  double flip_prob = 0.5;
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
  std::uint64_t seed = 1;
  double clip_grad_norm = 5.0;  // 0: no clipping
  int checkpoint_every = 0;     // 0: final checkpoint only

  void validate() const {
    if (!(base_lr > 0.0)) throw ConfigError("train.base_lr", "must be > 0");
    if (max_iter < 1) throw ConfigError("train.max_iter", "must be >= 1");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("train.momentum", "must lie in [0, 1)");
    if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay", "must be >= 0");
    if (batch_size < 1) throw ConfigError("train.batch_size", "must be >= 1");
    const std::pair<const char*, double> lambdas[] = {{"train.lambda_cls", lambda_cls},
                                                      {"train.lambda_kp", lambda_kp},
                                                      {"train.lambda_ctr", lambda_ctr},
                                                      {"train.lambda_hm", lambda_hm},
                                                      {"train.lambda_box", lambda_box}};
    for (const auto& [path, v] : lambdas) {
      if (!(v >= 0.0)) throw ConfigError(path, "must be >= 0");
    }
    if (!(flip_prob >= 0.0 && flip_prob <= 1.0)) throw ConfigError("train.flip_prob", "must lie in [0, 1]");
    if (!(focal_alpha > 0.0 && focal_alpha < 1.0)) throw ConfigError("train.focal_alpha", "must lie in (0, 1)");
    if (!(focal_gamma >= 0.0)) throw ConfigError("train.focal_gamma", "must be >= 0");
    if (!(clip_grad_norm >= 0.0)) throw ConfigError("train.clip_grad_norm", "must be >= 0");
    if (checkpoint_every < 0) throw ConfigError("train.checkpoint_every", "must be >= 0");
  }
  bool operator==(const TrainConfig&) const = default;
};

inline nlohmann::json train_to_json(const TrainConfig& c) {
  return {{"base_lr", c.base_lr},       {"max_iter", c.max_iter},         {"momentum", c.momentum},
          {"weight_decay", c.weight_decay}, {"batch_size", c.batch_size}, {"lambda_cls", c.lambda_cls},
          {"lambda_kp", c.lambda_kp},   {"lambda_ctr", c.lambda_ctr},     {"lambda_hm", c.lambda_hm},
          {"lambda_box", c.lambda_box}, {"flip_prob", c.flip_prob},       {"focal_alpha", c.focal_alpha},
          {"focal_gamma", c.focal_gamma}, {"seed", c.seed},               {"clip_grad_norm", c.clip_grad_norm},
          {"checkpoint_every", c.checkpoint_every}};
}

inline TrainConfig train_from_json(const nlohmann::json& j, const std::string& path, TrainConfig c = {}) {
  JsonObjectReader r(j, path);
  r.get("base_lr", c.base_lr);
  r.get("max_iter", c.max_iter);
  r.get("momentum", c.momentum);
  r.get("weight_decay", c.weight_decay);
  r.get("batch_size", c.batch_size);
  r.get("lambda_cls", c.lambda_cls);
  r.get("lambda_kp", c.lambda_kp);
  r.get("lambda_ctr", c.lambda_ctr);
  r.get("lambda_hm", c.lambda_hm);
  r.get("lambda_box", c.lambda_box);
  r.get("flip_prob", c.flip_prob);
  r.get("focal_alpha", c.focal_alpha);
  r.get("focal_gamma", c.focal_gamma);
  r.get("seed", c.seed);
  r.get("clip_grad_norm", c.clip_grad_norm);
  r.get("checkpoint_every", c.checkpoint_every);
  r.finish();
  return c;
}

/// Linear decay from base_lr at iteration 0 to 0 at max_iter.
inline double lr_at(int iter, const TrainConfig& cfg) {
  if (iter < 0 || iter > cfg.max_iter) {
    throw std::out_of_range("lr_at: iteration " + std::to_string(iter) + " outside [0, " +
                            std::to_string(cfg.max_iter) + "]");
  }
  return cfg.base_lr * (1.0 - static_cast<double>(iter) / cfg.max_iter);
}

// ---------------------------------------------------------------------------
// Losses

/// Non-finite loss term; names the term and the iteration. Debug builds may
/// trip an op's finite check first, in which case term() is the op name.
class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& term, int iteration, const std::string& what = "loss")
      : std::runtime_error("non-finite " + term + " " + what + " at iteration " + std::to_string(iteration)),
        term_(term),
        iteration_(iteration) {}
  const std::string& term() const { return term_; }
  int iteration() const { return iteration_; }

 private:
  std::string term_;
  int iteration_;
};

inline constexpr std::array<const char*, 5> kLossTermNames = {"cls", "kp", "ctr", "hm", "box"};
enum LossTerm : int { kLossCls = 0, kLossKp, kLossCtr, kLossHm, kLossBox };

/// Targets of one (possibly flipped) image.
struct ImageTargets {
  std::vector<LevelTargets> levels;
  HeatmapTargets heatmap;  // empty unless the heatmap branch is on
};

/// Batch-wide normalisers, each clamped to at least 1.
struct LossNormalizers {
  double positives = 1.0;
  double kp_coords = 1.0;
  double hm_positives = 1.0;
};

inline ImageTargets build_targets(const std::vector<InstanceAnnotation>& annotations, const ModelConfig& mc, int height,
                                  int width) {
  ImageTargets t;
  std::vector<std::pair<int, int>> shapes;
  for (int l = 0; l < mc.num_levels; ++l) shapes.emplace_back(height / mc.stride(l), width / mc.stride(l));
  const auto assignments = default_level_assignments(mc.num_levels);
  t.levels = assign_locations(annotations, shapes, assignments);
  if (mc.head.heatmap_aux) {
    const int s = mc.head.heatmap_stride;
    t.heatmap = heatmap_targets(annotations, s, height / s, width / s);
  }
  return t;
}

inline void accumulate_normalizers(LossNormalizers& n, const ImageTargets& t, bool first) {
  double pos = 0, kp = 0;
  for (const auto& lt : t.levels) {
    pos += lt.num_positive();
    for (double m : lt.kp_mask) kp += m;
  }
  if (first) n = {0.0, 0.0, 0.0};
  n.positives += pos;
  n.kp_coords += kp;
  n.hm_positives += t.heatmap.positives;
}

inline LossNormalizers clamp_normalizers(LossNormalizers n) {
  n.positives = std::max(1.0, n.positives);
  n.kp_coords = std::max(1.0, n.kp_coords);
  n.hm_positives = std::max(1.0, n.hm_positives);
  return n;
}

template <typename T>
struct LossResult {
  Tensor<T> total;
  std::array<double, 5> terms{};  // unweighted, already normalised
};

/// Loss of one image's outputs, normalised by batch-wide counts:
///   lambda_cls FL(cls)/N_pos + lambda_kp L1(kp)/N_kp + lambda_ctr BCE(ctr)/N_pos
///   + lambda_hm FL(hm)/N_hm + lambda_box L1(box)/N_pos.
/// Summing over the images of a batch gives the batch loss.
template <typename T>
LossResult<T> image_loss(Graph<T>& g, const ModelOutput<T>& out, const ImageTargets& tg, const LossNormalizers& norm,
                         const TrainConfig& cfg) {
  const T alpha = static_cast<T>(cfg.focal_alpha), gamma = static_cast<T>(cfg.focal_gamma);
  auto to_t = [](const std::vector<double>& v) { return std::vector<T>(v.begin(), v.end()); };
  auto scaled = [](const std::vector<double>& v, double k) {
    std::vector<T> w(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) w[i] = static_cast<T>(v[i] * k);
    return w;
  };
  std::array<Tensor<T>, 5> terms;
  auto accumulate = [&](int term, const Tensor<T>& v) { terms[term] = terms[term].defined() ? ops::add(g, terms[term], v) : v; };

  if (out.levels.size() != tg.levels.size()) throw DimensionError("image_loss: level count mismatch");
  for (std::size_t l = 0; l < out.levels.size(); ++l) {
    const LevelOutput<T>& lo = out.levels[l];
    const LevelTargets& lt = tg.levels[l];
    const std::size_t n = lt.cells();
    if (lo.cls.numel() != n) throw DimensionError("image_loss: level " + std::to_string(l) + " target grid mismatch");

    const std::vector<double> ones(n, 1.0);
    accumulate(kLossCls, ops::weighted_sum(g, ops::sigmoid_focal_loss(g, lo.cls, to_t(lt.cls), alpha, gamma),
                                           scaled(ones, 1.0 / norm.positives)));
    accumulate(kLossKp, ops::weighted_sum(g, ops::l1_error(g, lo.kp, to_t(lt.kp_offsets)),
                                          scaled(lt.kp_mask, 1.0 / norm.kp_coords)));
    accumulate(kLossCtr, ops::weighted_sum(g, ops::bce_with_logits(g, lo.ctr, to_t(lt.centerness)),
                                           scaled(lt.cls, 1.0 / norm.positives)));
    if (lo.box.defined()) {
      std::vector<double> mask4(4 * n);
      for (int c = 0; c < 4; ++c) std::copy(lt.cls.begin(), lt.cls.end(), mask4.begin() + c * n);
      accumulate(kLossBox, ops::weighted_sum(g, ops::l1_error(g, lo.box, to_t(lt.box_offsets)),
                                             scaled(mask4, 1.0 / norm.positives)));
    }
  }
  if (out.heatmap.defined()) {
    const std::vector<double> ones(tg.heatmap.labels.size(), 1.0);
    accumulate(kLossHm, ops::weighted_sum(g, ops::sigmoid_focal_loss(g, out.heatmap, to_t(tg.heatmap.labels), alpha, gamma),
                                          scaled(ones, 1.0 / norm.hm_positives)));
  }

  const std::array<double, 5> lambdas = {cfg.lambda_cls, cfg.lambda_kp, cfg.lambda_ctr, cfg.lambda_hm, cfg.lambda_box};
  LossResult<T> res;
  for (int k = 0; k < 5; ++k) {
    if (!terms[k].defined()) continue;
    res.terms[k] = static_cast<double>(terms[k].item());
    Tensor<T> weighted = ops::scale(g, terms[k], static_cast<T>(lambdas[k]));
    res.total = res.total.defined() ? ops::add(g, res.total, weighted) : weighted;
  }
  return res;
}

// ---------------------------------------------------------------------------
// Optimiser

/// Momentum buffers keyed by parameter name.
struct OptimizerState {
  std::map<std::string, std::vector<float>> velocity;
  bool operator==(const OptimizerState&) const = default;
};

/// v <- mu v + g + wd theta; theta <- theta - lr v. Parameters without a
/// gradient are treated as having gradient 0.
template <typename T>
void sgd_step(ParameterSet<T>& params, OptimizerState& state, double lr, double momentum, double weight_decay) {
  for (auto& e : params.entries()) {
    auto& v = state.velocity[e.name];
    if (v.empty()) v.assign(e.tensor.numel(), 0.0f);
    const bool has = e.tensor.has_grad();
    auto grad = e.tensor.grad();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double gi = has ? static_cast<double>(grad[i]) : 0.0;
      const double theta = e.tensor[i];
      const double vi = momentum * v[i] + gi + weight_decay * theta;
      v[i] = static_cast<float>(vi);
      e.tensor[i] = static_cast<T>(theta - lr * vi);
    }
  }
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr int kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { Io, VersionMismatch, Truncated, ShapeMismatch, Malformed };
  CheckpointError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

struct Checkpoint {
  int iteration = 0;
  std::uint64_t seed = 0;
  ModelConfig model;
  TrainConfig train;
  ParameterSet<float> params;
  OptimizerState optimizer;
};

namespace engine_detail {

inline void put_f32(std::ostream& os, float v) {
  std::uint32_t u = std::bit_cast<std::uint32_t>(v);
  char b[4] = {static_cast<char>(u & 0xff), static_cast<char>((u >> 8) & 0xff), static_cast<char>((u >> 16) & 0xff),
               static_cast<char>((u >> 24) & 0xff)};
  os.write(b, 4);
}

inline float get_f32(const unsigned char* p) {
  const std::uint32_t u = static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
                          (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
  return std::bit_cast<float>(u);
}

}  // namespace engine_detail

/// Writes `dir`/manifest.json and `dir`/blob.bin (little-endian float32,
/// parameters then momentum buffers, in manifest order).
inline void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ck) {
  using engine_detail::put_f32;
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw CheckpointError(CheckpointError::Kind::Io, "cannot create " + dir.string() + ": " + ec.message());
  nlohmann::json entries = nlohmann::json::array();
  std::ofstream blob(dir / "blob.bin", std::ios::binary);
  if (!blob) throw CheckpointError(CheckpointError::Kind::Io, "cannot write " + (dir / "blob.bin").string());
  std::size_t offset = 0;
  for (const auto& e : ck.params.entries()) {
    entries.push_back({{"name", e.name}, {"kind", "param"}, {"shape", e.tensor.shape()}, {"offset", offset}});
    for (float v : e.tensor.data()) put_f32(blob, v);
    offset += 4 * e.tensor.numel();
  }
  for (const auto& e : ck.params.entries()) {
    auto it = ck.optimizer.velocity.find(e.name);
    if (it == ck.optimizer.velocity.end()) continue;
    if (it->second.size() != e.tensor.numel()) {
      throw CheckpointError(CheckpointError::Kind::ShapeMismatch, "momentum buffer of " + e.name + " has wrong length");
    }
    entries.push_back({{"name", e.name}, {"kind", "momentum"}, {"shape", e.tensor.shape()}, {"offset", offset}});
    for (float v : it->second) put_f32(blob, v);
    offset += 4 * e.tensor.numel();
  }
  blob.close();
  if (!blob) throw CheckpointError(CheckpointError::Kind::Io, "failed writing " + (dir / "blob.bin").string());
  nlohmann::json m = {{"format_version", kCheckpointVersion},
                      {"iteration", ck.iteration},
                      {"rng", {{"seed", ck.seed}, {"counter", ck.iteration}}},
                      {"model", model_to_json(ck.model)},
                      {"head", head_to_json(ck.model.head)},
                      {"train", train_to_json(ck.train)},
                      {"blob_bytes", offset},
                      {"tensors", entries}};
  std::ofstream os(dir / "manifest.json");
  if (!os) throw CheckpointError(CheckpointError::Kind::Io, "cannot write " + (dir / "manifest.json").string());
  os << m.dump(2) << '\n';
}

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  using Kind = CheckpointError::Kind;
  std::ifstream is(dir / "manifest.json");
  if (!is) throw CheckpointError(Kind::Io, "cannot read " + (dir / "manifest.json").string());
  nlohmann::json m;
  try {
    is >> m;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(Kind::Malformed, "malformed checkpoint manifest: " + std::string(e.what()));
  }
  Checkpoint ck;
  std::vector<std::tuple<std::string, std::string, Shape, std::size_t>> tensors;
  std::size_t blob_bytes = 0;
  try {
    const int version = m.at("format_version").get<int>();
    if (version != kCheckpointVersion) {
      throw CheckpointError(Kind::VersionMismatch, "checkpoint format version " + std::to_string(version) +
                                                       " does not match supported version " +
                                                       std::to_string(kCheckpointVersion));
    }
    ck.iteration = m.at("iteration").get<int>();
    ck.seed = m.at("rng").at("seed").get<std::uint64_t>();
    ck.model = model_from_json(m.at("model"), "model");
    ck.model.head = head_from_json(m.at("head"), "head");
    ck.train = train_from_json(m.at("train"), "train");
    blob_bytes = m.at("blob_bytes").get<std::size_t>();
    for (const auto& t : m.at("tensors")) {
      tensors.emplace_back(t.at("name").get<std::string>(), t.at("kind").get<std::string>(), t.at("shape").get<Shape>(),
                           t.at("offset").get<std::size_t>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(Kind::Malformed, "malformed checkpoint manifest: " + std::string(e.what()));
  } catch (const ConfigError& e) {
    throw CheckpointError(Kind::Malformed, "invalid configuration in checkpoint: " + std::string(e.what()));
  }

  std::ifstream bs(dir / "blob.bin", std::ios::binary);
  if (!bs) throw CheckpointError(Kind::Io, "cannot read " + (dir / "blob.bin").string());
  std::vector<unsigned char> blob((std::istreambuf_iterator<char>(bs)), std::istreambuf_iterator<char>());
  if (blob.size() < blob_bytes) {
    throw CheckpointError(Kind::Truncated, "checkpoint blob has " + std::to_string(blob.size()) + " bytes, manifest expects " +
                                               std::to_string(blob_bytes));
  }
  if (blob.size() > blob_bytes) {
    throw CheckpointError(Kind::Malformed, "checkpoint blob has " + std::to_string(blob.size() - blob_bytes) +
                                               " trailing bytes");
  }
  std::size_t expected_offset = 0;
  for (const auto& [name, kind, shape, offset] : tensors) {
    std::size_t n = 0;
    try {
      n = shape_numel(shape);
    } catch (const DimensionError& e) {
      throw CheckpointError(Kind::Malformed, "tensor " + name + ": " + e.what());
    }
    if (offset != expected_offset || offset + 4 * n > blob.size()) {
      throw CheckpointError(Kind::Malformed, "tensor " + name + " has inconsistent offset " + std::to_string(offset));
    }
    expected_offset += 4 * n;
    if (kind == "param") {
      if (ck.params.contains(name)) throw CheckpointError(Kind::Malformed, "duplicate parameter " + name);
      Tensor<float> t = ck.params.add(name, shape);
      for (std::size_t i = 0; i < n; ++i) t[i] = engine_detail::get_f32(&blob[offset + 4 * i]);
    } else if (kind == "momentum") {
      auto& v = ck.optimizer.velocity[name];
      v.resize(n);
      for (std::size_t i = 0; i < n; ++i) v[i] = engine_detail::get_f32(&blob[offset + 4 * i]);
    } else {
      throw CheckpointError(Kind::Malformed, "unknown tensor kind '" + kind + "'");
    }
  }
  if (expected_offset != blob_bytes) throw CheckpointError(Kind::Malformed, "manifest offsets do not cover the blob");
  return ck;
}

/// Builds a model from a checkpoint; a parameter layout that disagrees with
/// the stored configuration is a shape mismatch.
inline PoseModel<float> model_from_checkpoint(const Checkpoint& ck) {
  try {
    return PoseModel<float>(ck.model, ck.params.clone());
  } catch (const std::exception& e) {
    throw CheckpointError(CheckpointError::Kind::ShapeMismatch, std::string("checkpoint does not fit its model: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Training loop

struct IterationRecord {
  int iter = 0;
  double lr = 0.0;
  double total = 0.0;
  std::array<double, 5> terms{};
  double grad_norm = 0.0;  // before clipping
};

/// Global L2 norm of all parameter gradients.
template <typename T>
double grad_norm(const ParameterSet<T>& params) {
  double s = 0.0;
  for (const auto& e : params.entries()) {
    if (!e.tensor.has_grad()) continue;
    for (T g : e.tensor.grad()) s += static_cast<double>(g) * g;
  }
  return std::sqrt(s);
}

/// Rescales gradients so their global norm is at most max_norm.
template <typename T>
void clip_gradients(ParameterSet<T>& params, double norm, double max_norm) {
  if (!(max_norm > 0.0) || norm <= max_norm) return;
  const T k = static_cast<T>(max_norm / norm);
  for (auto& e : params.entries()) {
    if (!e.tensor.has_grad()) continue;
    for (T& g : e.tensor.grad_mut()) g *= k;
  }
}

inline constexpr const char* kMetricsHeader = "iter,lr,total,cls,kp,ctr,hm,box";

inline void write_metrics_row(std::ostream& os, const IterationRecord& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g", r.iter, r.lr, r.total, r.terms[0], r.terms[1],
                r.terms[2], r.terms[3], r.terms[4]);
  os << buf << '\n';
}

/// The cached training scenes; shared between runs that use the same data.
using Dataset = std::shared_ptr<const std::vector<Sample>>;

inline Dataset generate_dataset(const SceneSpec& spec, std::uint64_t first_index, int count) {
  auto data = std::make_shared<std::vector<Sample>>();
  data->reserve(count);
  for (int k = 0; k < count; ++k) data->push_back(generate_scene(spec, first_index + k));
  return data;
}

/// One image of a batch: dataset index and whether it is flipped.
struct BatchSlot {
  int index = 0;
  bool flip = false;
};

/// Batch composition of iteration `iter`, a pure function of (seed, iter).
inline std::vector<BatchSlot> batch_for_iteration(const TrainConfig& cfg, int iter, int dataset_size) {
  CounterRng rng(cfg.seed ^ 0x626174636865ULL, static_cast<std::uint64_t>(iter));
  std::vector<BatchSlot> slots(cfg.batch_size);
  for (auto& s : slots) {
    s.index = rng.uniform_int(0, dataset_size - 1);
    s.flip = rng.bernoulli(cfg.flip_prob);
  }
  return slots;
}

class Trainer {
 public:
  Trainer(const ModelConfig& mc, const TrainConfig& tc, Dataset data)
      : model_(mc, tc.seed), cfg_(tc), data_(std::move(data)) {
    cfg_.validate();
    if (!data_ || data_->empty()) throw std::invalid_argument("Trainer: empty dataset");
  }

  /// Resumes from a checkpoint; the dataset must be the one it was trained on.
  Trainer(const Checkpoint& ck, Dataset data)
      : model_(model_from_checkpoint(ck)), cfg_(ck.train), data_(std::move(data)), opt_(ck.optimizer), iter_(ck.iteration) {
    cfg_.validate();
    if (!data_ || data_->empty()) throw std::invalid_argument("Trainer: empty dataset");
  }

  const PoseModel<float>& model() const { return model_; }
  PoseModel<float>& model() { return model_; }
  const TrainConfig& config() const { return cfg_; }
  int iteration() const { return iter_; }
  bool done() const { return iter_ >= cfg_.max_iter; }

  /// Runs iteration iteration() and advances the counter.
  IterationRecord step() {
    if (done()) throw std::logic_error("Trainer::step: already at max_iter");
    const ModelConfig& mc = model_.config();
    const auto slots = batch_for_iteration(cfg_, iter_, static_cast<int>(data_->size()));

    std::vector<Sample> flipped(slots.size());
    std::vector<const Sample*> samples(slots.size());
    std::vector<ImageTargets> targets(slots.size());
    LossNormalizers norm;
    for (std::size_t b = 0; b < slots.size(); ++b) {
      const Sample& s = (*data_)[slots[b].index];
      if (slots[b].flip) {
        flipped[b] = flip_sample(s);
        samples[b] = &flipped[b];
      } else {
        samples[b] = &s;
      }
      targets[b] = build_targets(samples[b]->annotations, mc, s.image.dim(1), s.image.dim(2));
      accumulate_normalizers(norm, targets[b], b == 0);
    }
    norm = clamp_normalizers(norm);

    IterationRecord rec;
    rec.iter = iter_;
    rec.lr = lr_at(iter_, cfg_);
    model_.params().zero_grad();
    for (std::size_t b = 0; b < slots.size(); ++b) {
      Graph<float> g;
      LossResult<float> loss;
      try {
        loss = image_loss(g, model_.forward(g, samples[b]->image, true), targets[b], norm, cfg_);
      } catch (const NonFiniteError& e) {
        throw TrainingError(e.op(), iter_, "output");
      }
      for (int k = 0; k < 5; ++k) {
        if (!std::isfinite(loss.terms[k])) throw TrainingError(kLossTermNames[k], iter_);
        rec.terms[k] += loss.terms[k];
      }
      const double total = loss.total.item();
      if (!std::isfinite(total)) throw TrainingError("total", iter_);
      rec.total += total;
      g.backward(loss.total);
    }
    rec.grad_norm = grad_norm(model_.params());
    if (!std::isfinite(rec.grad_norm)) throw TrainingError("gradient", iter_);
    clip_gradients(model_.params(), rec.grad_norm, cfg_.clip_grad_norm);
    sgd_step(model_.params(), opt_, rec.lr, cfg_.momentum, cfg_.weight_decay);
    ++iter_;
    return rec;
  }

  Checkpoint checkpoint() const {
    Checkpoint ck;
    ck.iteration = iter_;
    ck.seed = cfg_.seed;
    ck.model = model_.config();
    ck.train = cfg_;
    ck.params = model_.params().clone();
    ck.optimizer = opt_;
    return ck;
  }

 private:
  PoseModel<float> model_;
  TrainConfig cfg_;
  Dataset data_;
  OptimizerState opt_;
  int iter_ = 0;
};

}  // namespace posealign
