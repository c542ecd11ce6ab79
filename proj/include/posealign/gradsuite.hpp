#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "posealign/engine.hpp"
#include "posealign/gradcheck.hpp"
#include "posealign/model.hpp"
#include "posealign/ops.hpp"
#include "posealign/rng.hpp"
#include "posealign/synthgen.hpp"

namespace posealign {

struct GradSuiteOptions {
  int configs_per_op = 100;
  double h = 1e-4;
  double tol = 1e-4;
  std::uint64_t seed = 7;
};

struct OpGradResult {
  std::string op;
  int configs = 0;
  std::size_t checked = 0;
  std::size_t excluded = 0;
  std::size_t failures = 0;
  double max_rel_error = 0.0;
  double seconds = 0.0;
  bool passed() const { return failures == 0 && checked > 0; }
};

namespace gradsuite_detail {

inline Tensor<double> random_tensor(CounterRng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

inline std::vector<double> random_weights(CounterRng& rng, std::size_t n) {
  std::vector<double> w(n);
  for (auto& v : w) v = rng.uniform(-1.0, 1.0);
  return w;
}

inline std::vector<double> random_binary(CounterRng& rng, std::size_t n, double p = 0.3) {
  std::vector<double> w(n);
  for (auto& v : w) v = rng.bernoulli(p) ? 1.0 : 0.0;
  return w;
}

/// One configuration: parameters to perturb and the scalar function.
struct Case {
  std::vector<Tensor<double>> params;
  ScalarFn f;
  GradCheckOptions opts;
};

using CaseFactory = std::function<Case(CounterRng&, int)>;

/// Random weighted sum of an op's output, so every output element matters.
template <typename Op>
ScalarFn weighted(std::vector<double> weights, Op op) {
  return [weights, op](Graph<double>& g) { return ops::weighted_sum(g, op(g), weights); };
}

inline Shape random_shape(CounterRng& rng) { return {rng.uniform_int(1, 3), rng.uniform_int(1, 4), rng.uniform_int(1, 4)}; }

inline std::vector<std::pair<std::string, CaseFactory>> op_cases() {
  std::vector<std::pair<std::string, CaseFactory>> out;
  auto binary = [&](const char* name, auto op) {
    out.emplace_back(name, [op](CounterRng& rng, int) {
      const Shape s = random_shape(rng);
      auto a = random_tensor(rng, s), b = random_tensor(rng, s);
      return Case{{a, b}, weighted(random_weights(rng, a.numel()), [=](Graph<double>& g) { return op(g, a, b); }), {}};
    });
  };
  auto unary = [&](const char* name, auto op, double lo, double hi) {
    out.emplace_back(name, [op, lo, hi](CounterRng& rng, int) {
      auto a = random_tensor(rng, random_shape(rng), lo, hi);
      return Case{{a}, weighted(random_weights(rng, a.numel()), [=](Graph<double>& g) { return op(g, a); }), {}};
    });
  };
  binary("add", [](Graph<double>& g, const Tensor<double>& a, const Tensor<double>& b) { return ops::add(g, a, b); });
  binary("sub", [](Graph<double>& g, const Tensor<double>& a, const Tensor<double>& b) { return ops::sub(g, a, b); });
  binary("mul", [](Graph<double>& g, const Tensor<double>& a, const Tensor<double>& b) { return ops::mul(g, a, b); });
  out.emplace_back("scale", [](CounterRng& rng, int) {
    auto a = random_tensor(rng, random_shape(rng));
    const double k = rng.uniform(-2, 2);
    return Case{{a}, weighted(random_weights(rng, a.numel()), [=](Graph<double>& g) { return ops::scale(g, a, k); }), {}};
  });
  unary("relu", [](Graph<double>& g, const Tensor<double>& a) { return ops::relu(g, a); }, -1, 1);
  unary("sigmoid", [](Graph<double>& g, const Tensor<double>& a) { return ops::sigmoid(g, a); }, -6, 6);
  unary("exp", [](Graph<double>& g, const Tensor<double>& a) { return ops::exp(g, a); }, -3, 3);
  unary("abs", [](Graph<double>& g, const Tensor<double>& a) { return ops::abs(g, a); }, -1, 1);
  out.emplace_back("sum", [](CounterRng& rng, int) {
    auto a = random_tensor(rng, random_shape(rng));
    return Case{{a}, [a](Graph<double>& g) { return ops::mul(g, ops::sum(g, a), ops::sum(g, a)); }, {}};
  });
  out.emplace_back("mean", [](CounterRng& rng, int) {
    auto a = random_tensor(rng, random_shape(rng));
    return Case{{a}, [a](Graph<double>& g) { return ops::mul(g, ops::mean(g, a), ops::mean(g, a)); }, {}};
  });
  out.emplace_back("weighted_sum", [](CounterRng& rng, int) {
    auto a = random_tensor(rng, random_shape(rng));
    auto w = random_weights(rng, a.numel());
    return Case{{a}, [a, w](Graph<double>& g) {
                  auto s = ops::weighted_sum(g, a, w);
                  return ops::mul(g, s, s);
                }, {}};
  });
  out.emplace_back("conv2d", [](CounterRng& rng, int) {
    const int k = rng.bernoulli(0.5) ? 3 : 1;
    const int stride = rng.uniform_int(1, 2);
    const int pad = k == 3 ? rng.uniform_int(0, 1) : 0;
    const int pad_end = stride == 2 && k == 3 && pad == 1 && rng.bernoulli(0.5) ? 0 : pad;
    const int cin = rng.uniform_int(1, 3), cout = rng.uniform_int(1, 3);
    // Choose H, W so the strided kernel covers the padded extent exactly.
    auto extent = [&] {
      const int n_out = rng.uniform_int(1, 3);
      return (n_out - 1) * stride + k - pad - pad_end;
    };
    int h = extent(), w = extent();
    while (h < 1) h += stride;
    while (w < 1) w += stride;
    auto x = random_tensor(rng, {cin, h, w});
    auto wt = random_tensor(rng, {cout, cin, k, k});
    auto b = random_tensor(rng, {cout});
    Graph<double> probe(false);
    const std::size_t n = ops::conv2d(probe, x, wt, b, stride, pad, pad_end).numel();
    return Case{{x, wt, b}, weighted(random_weights(rng, n), [=](Graph<double>& g) {
                  return ops::conv2d(g, x, wt, b, stride, pad, pad_end);
                }), {}};
  });
  out.emplace_back("upsample_nearest2x", [](CounterRng& rng, int) {
    auto a = random_tensor(rng, random_shape(rng));
    return Case{{a}, weighted(random_weights(rng, 4 * a.numel()), [=](Graph<double>& g) {
                  return ops::upsample_nearest2x(g, a);
                }), {}};
  });
  out.emplace_back("slice_channels", [](CounterRng& rng, int) {
    const Shape s{rng.uniform_int(2, 5), rng.uniform_int(1, 3), rng.uniform_int(1, 3)};
    auto a = random_tensor(rng, s);
    const int c0 = rng.uniform_int(0, s[0] - 1), c1 = rng.uniform_int(c0 + 1, s[0]);
    return Case{{a}, weighted(random_weights(rng, static_cast<std::size_t>(c1 - c0) * s[1] * s[2]),
                              [=](Graph<double>& g) { return ops::slice_channels(g, a, c0, c1); }), {}};
  });
  out.emplace_back("linear", [](CounterRng& rng, int) {
    const int n = rng.uniform_int(1, 4), cin = rng.uniform_int(1, 4), cout = rng.uniform_int(1, 4);
    auto x = random_tensor(rng, {n, cin}), w = random_tensor(rng, {cout, cin}), b = random_tensor(rng, {cout});
    return Case{{x, w, b}, weighted(random_weights(rng, static_cast<std::size_t>(n) * cout),
                                    [=](Graph<double>& g) { return ops::linear(g, x, w, b); }), {}};
  });
  auto sampler = [](bool wrt_points) {
    return [wrt_points](CounterRng& rng, int) {
      const int c = rng.uniform_int(1, 3), h = rng.uniform_int(2, 5), w = rng.uniform_int(2, 5), n = rng.uniform_int(1, 5);
      auto f = random_tensor(rng, {c, h, w});
      Tensor<double> pts(Shape{n, 2});
      for (int k = 0; k < n; ++k) {
        // Mostly interior, some beyond the edge to exercise clamping.
        pts[2 * k] = rng.uniform(-0.5, w - 0.5);
        pts[2 * k + 1] = rng.uniform(-0.5, h - 0.5);
      }
      std::vector<Tensor<double>> params = wrt_points ? std::vector<Tensor<double>>{pts} : std::vector<Tensor<double>>{f};
      return Case{params, weighted(random_weights(rng, static_cast<std::size_t>(n) * c),
                                   [=](Graph<double>& g) { return ops::bilinear_sample(g, f, pts); }), {}};
    };
  };
  out.emplace_back("bilinear_sample.features", sampler(false));
  out.emplace_back("bilinear_sample.points", sampler(true));
  out.emplace_back("sigmoid_focal_loss", [](CounterRng& rng, int) {
    auto z = random_tensor(rng, random_shape(rng), -5, 5);
    auto t = random_binary(rng, z.numel());
    const double alpha = rng.uniform(0.1, 0.9), gamma = rng.uniform(0.0, 3.0);
    return Case{{z}, weighted(random_weights(rng, z.numel()), [=](Graph<double>& g) {
                  return ops::sigmoid_focal_loss(g, z, t, alpha, gamma);
                }), {}};
  });
  out.emplace_back("bce_with_logits", [](CounterRng& rng, int) {
    auto z = random_tensor(rng, random_shape(rng), -5, 5);
    std::vector<double> t(z.numel());
    for (auto& v : t) v = rng.uniform();
    return Case{{z}, weighted(random_weights(rng, z.numel()), [=](Graph<double>& g) {
                  return ops::bce_with_logits(g, z, t);
                }), {}};
  });
  out.emplace_back("l1_error", [](CounterRng& rng, int) {
    auto p = random_tensor(rng, random_shape(rng));
    std::vector<double> t(p.numel());
    for (auto& v : t) v = rng.uniform(-1, 1);
    return Case{{p}, weighted(random_weights(rng, p.numel()), [=](Graph<double>& g) { return ops::l1_error(g, p, t); }), {}};
  });
  out.emplace_back("conv2d+focal_loss", [](CounterRng& rng, int) {
    const int cin = rng.uniform_int(1, 3), h = rng.uniform_int(2, 5), w = rng.uniform_int(2, 5);
    auto x = random_tensor(rng, {cin, h, w}), wt = random_tensor(rng, {1, cin, 3, 3}), b = random_tensor(rng, {1});
    auto t = random_binary(rng, static_cast<std::size_t>(h) * w);
    return Case{{x, wt, b}, [=](Graph<double>& g) {
                  return ops::sum(g, ops::sigmoid_focal_loss(g, ops::conv2d(g, x, wt, b, 1, 1), t, 0.25, 2.0));
                }, {}};
  });
  out.emplace_back("model_composite", [](CounterRng& rng, int index) {
    ModelConfig mc;
    mc.stem_channels = 2;
    mc.stage_channels = {2, 3, 4};
    mc.fpn_channels = 4;
    mc.tower_convs = 1;
    mc.heatmap_channels = 3;
    // Cycle through the head variants.
    const auto rows = std::vector<HeadVariant>{
        [] { HeadVariant h; return h; }(),
        [] { HeadVariant h; h.align = true; return h; }(),
        [] { HeadVariant h; h.align = true; h.disable_aligner = true; return h; }(),
        [] { HeadVariant h; h.align = true; h.grouped = true; return h; }(),
        [] { HeadVariant h; h.align = true; h.grouped = true; h.separate_features = true; return h; }(),
        [] { HeadVariant h; h.align = true; h.grouped = true; h.separate_features = true; h.finer_sampling = true; return h; }(),
        [] { HeadVariant h; h.align = true; h.finer_sampling = true; h.heatmap_aux = true; h.box_branch = true; return h; }(),
        [] { HeadVariant h; h.heatmap_aux = true; h.heatmap_stride = 16; h.box_branch = true; return h; }()};
    mc.head = rows[static_cast<std::size_t>(index) % rows.size()];
    auto model = std::make_shared<PoseModel<double>>(mc, rng.next_u64());
    // Random (non-zero) locator and predictor weights so sampling moves.
    for (auto& e : model->params().entries()) {
      for (auto& v : e.tensor.data()) v += rng.uniform(-0.3, 0.3);
    }
    SceneSpec spec;
    spec.height = 64;
    spec.width = 64;
    spec.min_side = 16;
    spec.max_side = 40;
    spec.max_instances = 2;
    const Sample s = generate_scene(spec, rng.next_u64() % 1000);
    auto image = s.image.cast<double>();
    const ImageTargets tg = build_targets(s.annotations, mc, spec.height, spec.width);
    LossNormalizers norm;
    accumulate_normalizers(norm, tg, true);
    norm = clamp_normalizers(norm);
    TrainConfig tc;
    Case c;
    for (auto& e : model->params().entries()) c.params.push_back(e.tensor);
    c.f = [model, image, tg, norm, tc](Graph<double>& g) {
      return image_loss(g, model->forward(g, image, true), tg, norm, tc).total;
    };
    c.opts.max_coords_per_param = 2;
    return c;
  });
  return out;
}

}  // namespace gradsuite_detail

/// Names of the ops covered by the suite, in run order.
inline std::vector<std::string> gradsuite_ops() {
  std::vector<std::string> names;
  for (const auto& [name, factory] : gradsuite_detail::op_cases()) names.push_back(name);
  return names;
}

/// Finite-difference checks of every differentiable op at random
/// double-precision configurations. `only` restricts to one op by name.
inline std::vector<OpGradResult> run_gradsuite(const GradSuiteOptions& opt = {}, const std::string& only = "") {
  std::vector<OpGradResult> results;
  std::uint64_t op_key = 0;
  for (const auto& [name, factory] : gradsuite_detail::op_cases()) {
    ++op_key;
    if (!only.empty() && name != only) continue;
    const auto t0 = std::chrono::steady_clock::now();
    OpGradResult r;
    r.op = name;
    for (int k = 0; k < opt.configs_per_op; ++k) {
      CounterRng rng(opt.seed, op_key * 1000003ULL + static_cast<std::uint64_t>(k));
      gradsuite_detail::Case c = factory(rng, k);
      c.opts.sample_seed = rng.next_u64();
      const GradCheckReport rep = finite_diff_check(c.f, c.params, opt.h, opt.tol, c.opts);
      ++r.configs;
      r.checked += rep.checked;
      r.excluded += rep.excluded.size();
      r.failures += rep.failures.size();
      r.max_rel_error = std::max(r.max_rel_error, rep.max_rel_error);
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    results.push_back(r);
  }
  return results;
}

}  // namespace posealign
