// posealign command-line driver: gen-data, train, eval, ablate, gradcheck, infer.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "posealign/ablation.hpp"
#include "posealign/config.hpp"
#include "posealign/engine.hpp"
#include "posealign/evalkit.hpp"
#include "posealign/gradsuite.hpp"
#include "posealign/ppm.hpp"
#include "posealign/synthgen.hpp"

namespace fs = std::filesystem;
using namespace posealign;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitConfig = 2;

struct CommonArgs {
  std::string config;
  std::vector<std::string> overrides;
  std::string out;
};

void add_common(CLI::App* cmd, CommonArgs& a) {
  cmd->add_option("-c,--config", a.config, "run configuration (JSON)")->check(CLI::ExistingFile);
  cmd->add_option("-s,--set", a.overrides, "override a config value, e.g. train.base_lr=0.02 (repeatable)");
  cmd->add_option("-o,--out", a.out, "output directory (same as --set output_dir=...)");
}

RunConfig resolve(const CommonArgs& a) {
  std::vector<std::string> ov = a.overrides;
  if (!a.out.empty()) ov.push_back("output_dir=" + nlohmann::json(a.out).dump());
  return parse_config(a.config, ov);
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream os(p);
  if (!os) throw std::runtime_error("cannot write " + p.string());
  os << s;
}

void write_json(const fs::path& p, const nlohmann::json& j) { write_text(p, j.dump(2) + "\n"); }

/// Creates the run directory and records the resolved config and version.
fs::path prepare_run_dir(const RunConfig& cfg) {
  const fs::path dir(cfg.output_dir);
  fs::create_directories(dir);
  write_json(dir / "config.json", run_config_to_json(cfg));
  write_text(dir / "VERSION", std::string(version_string()) + "\n");
  return dir;
}

Dataset train_split(const RunConfig& cfg) { return generate_dataset(cfg.scene, 0, cfg.data.train_count); }

Dataset val_split(const RunConfig& cfg) {
  return generate_dataset(cfg.scene, static_cast<std::uint64_t>(cfg.data.train_count), cfg.data.val_count);
}

void print_report(const EvalReport& r) {
  std::printf("AP %.4f  AP50 %.4f  AP75 %.4f  AP_M %.4f  AP_L %.4f  (%d images, %d gt, %d dets)\n", r.ap, r.ap50,
              r.ap75, r.ap_m, r.ap_l, r.num_images, r.num_gt, r.num_dets);
}

void check_image_size(const RunConfig& cfg, const ModelConfig& mc) {
  if (cfg.scene.height % mc.max_stride() != 0 || cfg.scene.width % mc.max_stride() != 0) {
    throw ConfigError("scene.height", "image size must be divisible by the checkpoint's largest stride " +
                                          std::to_string(mc.max_stride()));
  }
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const CommonArgs& a, int dump_images) {
  const RunConfig cfg = resolve(a);
  const fs::path dir = prepare_run_dir(cfg);
  const int total = cfg.data.train_count + cfg.data.val_count;
  write_manifest((dir / "dataset.json").string(), dataset_manifest(cfg.scene, total));
  int shortfalls = 0, instances = 0;
  const int dumps = std::min(dump_images, total);
  if (dumps > 0) fs::create_directories(dir / "images");
  for (int k = 0; k < total; ++k) {
    const Sample s = generate_scene(cfg.scene, static_cast<std::uint64_t>(k));
    shortfalls += s.placement_shortfall;
    instances += static_cast<int>(s.annotations.size());
    if (k < dumps) {
      char name[32];
      std::snprintf(name, sizeof name, "scene_%05d.ppm", k);
      write_ppm((dir / "images" / name).string(), s.image);
    }
  }
  std::printf("%d scenes (%d train, %d val), %d instances, %d placement shortfalls -> %s\n", total,
              cfg.data.train_count, cfg.data.val_count, instances, shortfalls, (dir / "dataset.json").c_str());
  return kExitOk;
}

int cmd_train(const CommonArgs& a, const std::string& resume) {
  const RunConfig cfg = resolve(a);
  const fs::path dir = prepare_run_dir(cfg);
  const Dataset data = train_split(cfg);

  std::unique_ptr<Trainer> trainer;
  if (!resume.empty()) {
    const Checkpoint ck = load_checkpoint(resume);
    check_image_size(cfg, ck.model);
    trainer = std::make_unique<Trainer>(ck, data);
    std::printf("resumed from %s at iteration %d\n", resume.c_str(), ck.iteration);
  } else {
    trainer = std::make_unique<Trainer>(cfg.model, cfg.train, data);
  }
  const TrainConfig& tc = trainer->config();

  const fs::path metrics = dir / "metrics.csv";
  const bool append = !resume.empty() && fs::exists(metrics);
  std::ofstream csv(metrics, append ? std::ios::app : std::ios::trunc);
  if (!csv) throw std::runtime_error("cannot write " + metrics.string());
  if (!append) csv << kMetricsHeader << '\n';

  const auto t0 = std::chrono::steady_clock::now();
  while (!trainer->done()) {
    const IterationRecord rec = trainer->step();
    write_metrics_row(csv, rec);
    const int done = rec.iter + 1;
    if (done % 100 == 0 || done == tc.max_iter) {
      const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::fprintf(stderr, "iter %d/%d lr %.5f total %.4f kp %.4f |g| %.3f %.1fs\n", done, tc.max_iter, rec.lr,
                   rec.total, rec.terms[kLossKp], rec.grad_norm, sec);
    }
    if (tc.checkpoint_every > 0 && done % tc.checkpoint_every == 0 && done != tc.max_iter) {
      csv.flush();
      save_checkpoint(dir / "checkpoints" / ("iter_" + std::to_string(done)), trainer->checkpoint());
    }
  }
  csv.flush();
  save_checkpoint(dir / "checkpoints" / "final", trainer->checkpoint());
  std::printf("trained %d iterations -> %s\n", tc.max_iter, (dir / "checkpoints" / "final").c_str());
  return kExitOk;
}

int cmd_eval(const CommonArgs& a, std::string checkpoint) {
  const RunConfig cfg = resolve(a);
  const fs::path dir = prepare_run_dir(cfg);
  if (checkpoint.empty()) checkpoint = (dir / "checkpoints" / "final").string();
  const Checkpoint ck = load_checkpoint(checkpoint);
  check_image_size(cfg, ck.model);
  const PoseModel<float> model = model_from_checkpoint(ck);
  const Dataset val = val_split(cfg);
  const EvalReport r = evaluate_model(model, *val, cfg.eval.decode, cfg.eval.options());
  nlohmann::json j = report_to_json(r);
  j["checkpoint"] = checkpoint;
  j["iteration"] = ck.iteration;
  write_json(dir / "eval.json", j);
  print_report(r);
  return kExitOk;
}

int cmd_ablate(const CommonArgs& a) {
  const RunConfig cfg = resolve(a);
  const fs::path dir = prepare_run_dir(cfg);
  const auto rows = select_rows(cfg.ablation.rows);
  const Dataset train = train_split(cfg);
  const Dataset val = val_split(cfg);
  fs::create_directories(dir / "cells");

  std::ofstream cell_csv;
  AblationHooks hooks;
  hooks.on_cell_start = [&](const std::string& row, std::uint64_t seed) {
    const fs::path p = dir / "cells" / (row + "_seed" + std::to_string(seed) + ".csv");
    cell_csv = std::ofstream(p);
    if (!cell_csv) throw std::runtime_error("cannot write " + p.string());
    cell_csv << kMetricsHeader << '\n';
    std::fprintf(stderr, "cell %s seed %llu ...\n", row.c_str(), static_cast<unsigned long long>(seed));
  };
  hooks.on_iteration = [&](const std::string&, std::uint64_t, const IterationRecord& rec) {
    write_metrics_row(cell_csv, rec);
  };
  hooks.on_cell_done = [&](const CellResult& c) {
    cell_csv.close();
    std::fprintf(stderr, "cell %s seed %llu: AP50 %.4f AP %.4f kp %.4f (%.0fs)\n", c.row.c_str(),
                 static_cast<unsigned long long>(c.seed), c.report.ap50, c.report.ap, c.final_kp_loss, c.seconds);
  };

  const AblationTable table =
      run_ablation(rows, cfg.model, cfg.train, train, val, cfg.ablation, cfg.eval.decode, cfg.eval.options(), hooks);
  {
    std::ofstream os(dir / "ablation.csv");
    if (!os) throw std::runtime_error("cannot write " + (dir / "ablation.csv").string());
    write_ablation_csv(os, table);
  }
  write_json(dir / "ablation.json", ablation_to_json(table));
  write_ablation_csv(std::cout, table);
  return kExitOk;
}

int cmd_gradcheck(const CommonArgs& a, int configs, const std::string& only) {
  const RunConfig cfg = resolve(a);
  const fs::path dir = prepare_run_dir(cfg);
  GradSuiteOptions opt;
  opt.configs_per_op = configs;
  if (!only.empty()) {
    const auto ops = gradsuite_ops();
    if (std::find(ops.begin(), ops.end(), only) == ops.end()) throw ConfigError("--op", "unknown op '" + only + "'");
  }
  const auto t0 = std::chrono::steady_clock::now();
  const auto results = run_gradsuite(opt, only);
  const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  bool ok = true;
  nlohmann::json ops = nlohmann::json::array();
  std::printf("%-26s %7s %8s %6s %6s %12s\n", "op", "configs", "checked", "excl", "fail", "max_rel_err");
  for (const auto& r : results) {
    ok = ok && r.passed();
    std::printf("%-26s %7d %8zu %6zu %6zu %12.3e %s\n", r.op.c_str(), r.configs, r.checked, r.excluded, r.failures,
                r.max_rel_error, r.passed() ? "ok" : "FAIL");
    ops.push_back({{"op", r.op},
                   {"configs", r.configs},
                   {"checked", r.checked},
                   {"excluded", r.excluded},
                   {"failures", r.failures},
                   {"max_rel_error", r.max_rel_error},
                   {"seconds", r.seconds},
                   {"passed", r.passed()}});
  }
  std::printf("%s in %.1fs (tol %.0e, h %.0e)\n", ok ? "all ops passed" : "FAILED", sec, opt.tol, opt.h);
  write_json(dir / "gradcheck.json",
             {{"tol", opt.tol}, {"h", opt.h}, {"seconds", sec}, {"passed", ok}, {"ops", ops}});
  return ok ? kExitOk : kExitRuntime;
}

int cmd_infer(const CommonArgs& a, std::string checkpoint, const std::vector<std::string>& images,
              const std::vector<int>& scenes) {
  const RunConfig cfg = resolve(a);
  const fs::path dir = prepare_run_dir(cfg);
  if (images.empty() && scenes.empty()) throw ConfigError("infer", "give PPM images and/or --scene indices");
  if (checkpoint.empty()) checkpoint = (dir / "checkpoints" / "final").string();
  const Checkpoint ck = load_checkpoint(checkpoint);
  const PoseModel<float> model = model_from_checkpoint(ck);

  nlohmann::json out = nlohmann::json::array();
  auto run = [&](const std::string& source, const Tensor<float>& image) {
    if (image.dim(1) % ck.model.max_stride() != 0 || image.dim(2) % ck.model.max_stride() != 0) {
      throw std::runtime_error(source + ": image size " + std::to_string(image.dim(1)) + "x" +
                               std::to_string(image.dim(2)) + " is not divisible by stride " +
                               std::to_string(ck.model.max_stride()));
    }
    const auto dets = predict(model, image, cfg.eval.decode);
    nlohmann::json d = nlohmann::json::array();
    for (const auto& det : dets) d.push_back(detection_to_json(det));
    out.push_back({{"source", source}, {"height", image.dim(1)}, {"width", image.dim(2)}, {"detections", d}});
    std::printf("%s: %zu detections\n", source.c_str(), dets.size());
  };
  for (const auto& p : images) run(p, read_ppm(p));
  for (int s : scenes) {
    if (s < 0) throw ConfigError("--scene", "scene index must be >= 0");
    run("scene:" + std::to_string(s), generate_scene(cfg.scene, static_cast<std::uint64_t>(s)).image);
  }
  write_json(dir / "detections.json", {{"checkpoint", checkpoint}, {"images", out}});
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"posealign: keypoint-aligned one-stage pose estimation on synthetic scenes"};
  app.set_version_flag("--version", std::string(version_string()));
  app.require_subcommand(1);

  CommonArgs common;
  int dump_images = 0;
  std::string resume, checkpoint, only;
  int configs = 100;
  std::vector<std::string> images;
  std::vector<int> scenes;

  auto* gen = app.add_subcommand("gen-data", "write a dataset manifest (and optionally PPM previews)");
  add_common(gen, common);
  gen->add_option("--images", dump_images, "dump the first N scenes as PPM")->check(CLI::NonNegativeNumber);

  auto* train = app.add_subcommand("train", "train a model; writes metrics.csv and checkpoints/");
  add_common(train, common);
  train->add_option("--resume", resume, "checkpoint directory to resume from")->check(CLI::ExistingDirectory);

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the validation scenes");
  add_common(eval, common);
  eval->add_option("--checkpoint", checkpoint, "checkpoint directory (default <out>/checkpoints/final)");

  auto* ablate = app.add_subcommand("ablate", "train and evaluate every ablation row for every seed");
  add_common(ablate, common);

  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of every differentiable op");
  add_common(grad, common);
  grad->add_option("--configs", configs, "random configurations per op")->check(CLI::PositiveNumber);
  grad->add_option("--op", only, "check a single op");

  auto* infer = app.add_subcommand("infer", "decode detections for PPM images or generated scenes");
  add_common(infer, common);
  infer->add_option("--checkpoint", checkpoint, "checkpoint directory (default <out>/checkpoints/final)");
  infer->add_option("images", images, "P6 PPM images")->check(CLI::ExistingFile);
  infer->add_option("--scene", scenes, "scene index of the configured generator (repeatable)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*gen) return cmd_gen_data(common, dump_images);
    if (*train) return cmd_train(common, resume);
    if (*eval) return cmd_eval(common, checkpoint);
    if (*ablate) return cmd_ablate(common);
    if (*grad) return cmd_gradcheck(common, configs, only);
    if (*infer) return cmd_infer(common, checkpoint, images, scenes);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const ManifestError& e) {
    std::fprintf(stderr, "manifest error: %s\n", e.what());
    return kExitConfig;
  } catch (const CheckpointError& e) {
    std::fprintf(stderr, "checkpoint error: %s\n", e.what());
    using K = CheckpointError::Kind;
    const bool invalid = e.kind() == K::VersionMismatch || e.kind() == K::ShapeMismatch || e.kind() == K::Malformed;
    return invalid ? kExitConfig : kExitRuntime;
  } catch (const TrainingError& e) {
    std::fprintf(stderr, "training failed: %s\n", e.what());
    return kExitRuntime;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
  return kExitRuntime;
}
