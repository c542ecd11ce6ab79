#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "posealign/engine.hpp"
#include "posealign/evalkit.hpp"
#include "posealign/model.hpp"
#include "posealign/synthgen.hpp"

namespace posealign {

struct AblationRow {
  std::string name;
  HeadVariant head;
};

/// The eight standard rows; each refinement builds on the previous row
/// except the aligner-disabled control and the 16x heatmap alternative.
inline std::vector<AblationRow> standard_ablation_rows() {
  HeadVariant naive;
  HeadVariant align = naive;
  align.align = true;
  HeadVariant disabled = align;
  disabled.disable_aligner = true;
  HeadVariant grouped = align;
  grouped.grouped = true;
  HeadVariant sep = grouped;
  sep.separate_features = true;
  HeadVariant finer = sep;
  finer.finer_sampling = true;
  HeadVariant hm8 = finer;
  hm8.heatmap_aux = true;
  hm8.heatmap_stride = 8;
  HeadVariant hm16 = hm8;
  hm16.heatmap_stride = 16;
  return {{"naive", naive},           {"align", align},
          {"align_disabled", disabled}, {"grouped", grouped},
          {"sep_features", sep},      {"finer_sampling", finer},
          {"heatmap_8x", hm8},        {"heatmap_16x", hm16}};
}

inline std::vector<AblationRow> select_rows(const std::vector<std::string>& names) {
  const auto all = standard_ablation_rows();
  if (names.empty()) return all;
  std::vector<AblationRow> out;
  for (const auto& n : names) {
    auto it = std::find_if(all.begin(), all.end(), [&](const AblationRow& r) { return r.name == n; });
    if (it == all.end()) throw ConfigError("ablation.rows", "unknown row '" + n + "'");
    out.push_back(*it);
  }
  return out;
}

struct CellResult {
  std::string row;
  std::uint64_t seed = 0;
  EvalReport report;
  double final_kp_loss = 0.0;  // mean kp term over the trailing loss window
  double seconds = 0.0;
  int iterations = 0;
};

struct RowSummary {
  std::string name;
  HeadVariant head;
  double ap = 0, ap50 = 0, ap75 = 0, ap_m = 0, ap_l = 0;
  double final_kp_loss = 0;
  std::vector<CellResult> cells;
};

struct AblationTable {
  std::vector<RowSummary> rows;

  const RowSummary& row(const std::string& name) const {
    for (const auto& r : rows)
      if (r.name == name) return r;
    throw std::out_of_range("no ablation row " + name);
  }
};

struct AblationSettings {
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::vector<std::string> rows;  // empty: all standard rows
  int loss_window = 100;

  void validate() const {
    if (seeds.empty()) throw ConfigError("ablation.seeds", "need at least one seed");
    if (loss_window < 1) throw ConfigError("ablation.loss_window", "must be >= 1");
    select_rows(rows);
  }
  bool operator==(const AblationSettings&) const = default;
};

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Hooks for progress reporting and per-cell artifacts.
struct AblationHooks {
  std::function<void(const std::string& row, std::uint64_t seed)> on_cell_start;
  std::function<void(const CellResult&)> on_cell_done;
  /// Receives every training record of a cell, e.g. to write a metrics CSV.
  std::function<void(const std::string& row, std::uint64_t seed, const IterationRecord&)> on_iteration;
};

/// Trains one variant from scratch and evaluates it on the validation scenes.
inline CellResult run_cell(const AblationRow& row, const ModelConfig& base_model, TrainConfig train, std::uint64_t seed,
                           const Dataset& train_data, const Dataset& val_data, const DecodeOptions& dopt,
                           const EvalOptions& eopt, int loss_window, const AblationHooks& hooks = {}) {
  ModelConfig mc = base_model;
  mc.head = row.head;
  mc.head.box_branch = base_model.head.box_branch;
  train.seed = seed;
  const auto t0 = std::chrono::steady_clock::now();
  Trainer trainer(mc, train, train_data);
  std::vector<double> kp;
  kp.reserve(train.max_iter);
  while (!trainer.done()) {
    const IterationRecord rec = trainer.step();
    kp.push_back(rec.terms[kLossKp]);
    if (hooks.on_iteration) hooks.on_iteration(row.name, seed, rec);
  }
  CellResult res;
  res.row = row.name;
  res.seed = seed;
  res.iterations = train.max_iter;
  const std::size_t w = std::min<std::size_t>(loss_window, kp.size());
  double s = 0;
  for (std::size_t k = kp.size() - w; k < kp.size(); ++k) s += kp[k];
  res.final_kp_loss = s / w;
  res.report = evaluate_model(trainer.model(), *val_data, dopt, eopt);
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

/// Every row x seed cell trains from scratch on the same scenes; rows report
/// medians over seeds.
inline AblationTable run_ablation(const std::vector<AblationRow>& rows, const ModelConfig& base_model,
                                  const TrainConfig& train, const Dataset& train_data, const Dataset& val_data,
                                  const AblationSettings& settings, const DecodeOptions& dopt = {},
                                  const EvalOptions& eopt = {}, const AblationHooks& hooks = {}) {
  settings.validate();
  AblationTable table;
  for (const auto& row : rows) {
    RowSummary sum;
    sum.name = row.name;
    sum.head = row.head;
    for (std::uint64_t seed : settings.seeds) {
      if (hooks.on_cell_start) hooks.on_cell_start(row.name, seed);
      sum.cells.push_back(run_cell(row, base_model, train, seed, train_data, val_data, dopt, eopt, settings.loss_window, hooks));
      if (hooks.on_cell_done) hooks.on_cell_done(sum.cells.back());
    }
    auto med = [&](auto field) {
      std::vector<double> v;
      for (const auto& c : sum.cells) v.push_back(field(c));
      return median(v);
    };
    sum.ap = med([](const CellResult& c) { return c.report.ap; });
    sum.ap50 = med([](const CellResult& c) { return c.report.ap50; });
    sum.ap75 = med([](const CellResult& c) { return c.report.ap75; });
    sum.ap_m = med([](const CellResult& c) { return c.report.ap_m; });
    sum.ap_l = med([](const CellResult& c) { return c.report.ap_l; });
    sum.final_kp_loss = med([](const CellResult& c) { return c.final_kp_loss; });
    table.rows.push_back(std::move(sum));
  }
  return table;
}

inline constexpr const char* kAblationCsvHeader = "row,AP,AP50,AP75,AP_M,AP_L,final_kp_loss,seeds";

inline void write_ablation_csv(std::ostream& os, const AblationTable& t) {
  os << kAblationCsvHeader << '\n';
  char buf[256];
  for (const auto& r : t.rows) {
    std::snprintf(buf, sizeof buf, "%s,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%zu", r.name.c_str(), r.ap, r.ap50, r.ap75, r.ap_m,
                  r.ap_l, r.final_kp_loss, r.cells.size());
    os << buf << '\n';
  }
}

inline nlohmann::json ablation_to_json(const AblationTable& t) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : t.rows) {
    nlohmann::json cells = nlohmann::json::array();
    for (const auto& c : r.cells) {
      cells.push_back({{"seed", c.seed},
                       {"report", report_to_json(c.report, false)},
                       {"final_kp_loss", c.final_kp_loss},
                       {"iterations", c.iterations},
                       {"seconds", c.seconds}});
    }
    rows.push_back({{"row", r.name},
                    {"head", head_to_json(r.head)},
                    {"median", {{"AP", r.ap}, {"AP50", r.ap50}, {"AP75", r.ap75}, {"AP_M", r.ap_m}, {"AP_L", r.ap_l},
                                {"final_kp_loss", r.final_kp_loss}}},
                    {"cells", cells}});
  }
  return {{"rows", rows}};
}

}  // namespace posealign
