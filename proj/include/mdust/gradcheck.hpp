// Central finite-difference gradient checks in double precision, plus the
// standard suite covering every differentiable operation.
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "mdust/network.hpp"
#include "mdust/objectives.hpp"

namespace mdust {

struct GradCheckResult {
  std::string name;
  double max_rel_error = 0.0;  // worst input, ||analytic - numeric|| / max(||analytic||, ||numeric||, floor)
                               // with the floor defined in GradCheckOptions
  std::size_t coordinates = 0;
  double seconds = 0.0;
  bool passed = false;
};

struct GradCheckOptions {
  double step = 1e-6;
  double tolerance = 1e-3;
  double floor = 1e-6;              // gradients below this norm are compared absolutely
  double relative_floor = 1e-2;     // ... as are those below this fraction of the total gradient norm
  std::size_t max_coordinates = 0;  // per input; 0 checks every coordinate
  std::uint64_t seed = 0;           // coordinate sampling
};

using ScalarFn = std::function<Var<double>(const std::vector<Var<double>>&)>;

inline GradCheckResult check_gradient(const std::string& name, std::vector<Var<double>> inputs, const ScalarFn& f,
                                      const GradCheckOptions& opt = {}) {
  const auto start = std::chrono::steady_clock::now();
  GradCheckResult r;
  r.name = name;
  for (auto& v : inputs) v.zero_grad();
  Var<double> out = f(inputs);
  out.backward();
  std::mt19937_64 rng(opt.seed);
  NoGradGuard no_grad;
  struct Sums {
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
  };
  std::vector<Sums> per_input;
  double total2 = 0.0;
  for (auto& v : inputs) {
    if (!v.requires_grad()) continue;
    std::vector<std::size_t> coords(v.size());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (opt.max_coordinates > 0 && coords.size() > opt.max_coordinates) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(opt.max_coordinates);
    }
    Sums s;
    for (std::size_t i : coords) {
      double& x = v.mutable_value()[i];
      const double saved = x;
      x = saved + opt.step;
      const double fp = f(inputs).value()[0];
      x = saved - opt.step;
      const double fm = f(inputs).value()[0];
      x = saved;
      const double numeric = (fp - fm) / (2.0 * opt.step);
      const double analytic = v.has_grad() ? v.grad()[i] : 0.0;
      s.diff2 += (analytic - numeric) * (analytic - numeric);
      s.a2 += analytic * analytic;
      s.n2 += numeric * numeric;
    }
    r.coordinates += coords.size();
    total2 += std::max(s.a2, s.n2);
    per_input.push_back(s);
  }
  // Inputs whose gradient is tiny next to the whole gradient are judged
  // against a floor proportional to the whole gradient's norm.
  const double floor = std::max(opt.floor, opt.relative_floor * std::sqrt(total2));
  for (const Sums& s : per_input) {
    const double scale = std::max(std::sqrt(std::max(s.a2, s.n2)), floor);
    r.max_rel_error = std::max(r.max_rel_error, std::sqrt(s.diff2) / scale);
  }
  r.passed = std::isfinite(r.max_rel_error) && r.max_rel_error < opt.tolerance;
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

namespace detail {

inline Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  std::uniform_real_distribution<double> d(lo, hi);
  for (auto& v : t.data()) v = d(rng);
  return t;
}

// Contracts a tensor with fixed random weights so every output element
// contributes a distinct gradient.
inline Var<double> project(const Var<double>& y, const Tensor<double>& weights) { return sum(mul(y, constant(weights))); }

}  // namespace detail

// Randomised instances (extents <= 6) of every differentiable operation.
inline std::vector<GradCheckResult> gradcheck_suite(std::uint64_t seed = 7, bool include_network = true) {
  std::mt19937_64 rng(seed);
  auto extent = [&](std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng); };
  auto rnd = [&](Shape s, double lo = -1.0, double hi = 1.0) { return detail::random_tensor(std::move(s), rng, lo, hi); };
  std::vector<GradCheckResult> out;
  GradCheckOptions opt;
  opt.seed = seed;

  auto projected = [&](const std::string& name, std::vector<Var<double>> inputs, std::function<Var<double>(const std::vector<Var<double>>&)> fn,
                       Shape out_shape, GradCheckOptions o) {
    const Tensor<double> w = rnd(std::move(out_shape));
    out.push_back(check_gradient(name, std::move(inputs), [fn, w](const auto& in) { return detail::project(fn(in), w); }, o));
  };
  auto out_shape_of = [](const std::function<Var<double>(const std::vector<Var<double>>&)>& fn, const std::vector<Var<double>>& in) {
    NoGradGuard g;
    return fn(in).shape();
  };
  auto run = [&](const std::string& name, std::vector<Var<double>> inputs, std::function<Var<double>(const std::vector<Var<double>>&)> fn,
                 GradCheckOptions o) { projected(name, inputs, fn, out_shape_of(fn, inputs), o); };

  {  // conv3d, stride 1, mixed kernel
    const std::size_t ci = extent(1, 3), co = extent(1, 3);
    Var<double> x = parameter(rnd({1, ci, extent(2, 6), extent(2, 6), extent(1, 4)}));
    Var<double> w = parameter(rnd({co, ci, 3, 3, 3}));
    Var<double> b = parameter(rnd({co}));
    run("conv3d", {x, w, b}, [](const auto& in) { return conv3d(in[0], in[1], in[2]); }, opt);
  }
  {  // conv3d, stride (2,2,1), 3x3x1
    const std::size_t ci = extent(1, 3), co = extent(1, 3);
    Var<double> x = parameter(rnd({2, ci, extent(3, 6), extent(3, 6), extent(1, 3)}));
    Var<double> w = parameter(rnd({co, ci, 3, 3, 1}));
    Var<double> b = parameter(rnd({co}));
    run("conv3d_strided", {x, w, b}, [](const auto& in) { return conv3d(in[0], in[1], in[2], {2, 2, 1}); }, opt);
  }
  {
    const std::size_t n = extent(1, 6), din = extent(1, 6), dout = extent(1, 6);
    Var<double> x = parameter(rnd({n, din})), w = parameter(rnd({din, dout})), b = parameter(rnd({dout}));
    run("linear", {x, w, b}, [](const auto& in) { return linear(in[0], in[1], in[2]); }, opt);
  }
  {
    Var<double> x = parameter(rnd({extent(1, 4), extent(2, 6), extent(1, 5)}, -2.0, 2.0));
    const std::size_t axis = extent(0, 2);
    run("softmax", {x}, [axis](const auto& in) { return softmax(in[0], axis); }, opt);
  }
  {
    Var<double> x = parameter(rnd({extent(1, 2), extent(1, 3), extent(2, 6), extent(2, 6), extent(1, 3)}));
    run("instance_norm", {x}, [](const auto& in) { return instance_norm(in[0]); }, opt);
  }
  {
    const std::size_t c = extent(2, 6);
    Var<double> x = parameter(rnd({extent(1, 6), c})), g = parameter(rnd({c}, 0.5, 1.5)), b = parameter(rnd({c}));
    run("layer_norm", {x, g, b}, [](const auto& in) { return layer_norm(in[0], in[1], in[2]); }, opt);
  }
  {
    Tensor<double> v = rnd({extent(1, 6), extent(1, 6)});
    for (auto& e : v.data()) e = e >= 0 ? e + 0.05 : e - 0.05;  // keep away from the kink
    run("leaky_relu", {parameter(v)}, [](const auto& in) { return leaky_relu(in[0], 0.01); }, opt);
  }
  {
    Var<double> x = parameter(rnd({1, extent(2, 6), extent(2, 6), extent(1, 3), extent(1, 3)}));
    run("upsample_x2", {x}, [](const auto& in) {
      return upsample_x2(permute(in[0], {0, 4, 1, 2, 3}), UpsampleAxes::InPlane);
    }, opt);
    Var<double> y = parameter(rnd({extent(1, 3), extent(1, 3), extent(1, 4), extent(1, 4), extent(1, 3)}));
    run("global_avg_pool", {y}, [](const auto& in) { return global_avg_pool(in[0]); }, opt);
  }
  {  // windowed multi-head attention
    const std::size_t heads = extent(1, 2), dk = extent(1, 3), c = heads * dk;
    std::mt19937_64 prng(seed + 1);
    AttentionParams<double> p = make_attention_params<double>(c, heads, prng);
    Var<double> x = parameter(rnd({1, extent(2, 5), extent(2, 5), extent(1, 3), c}));
    const WindowSpec spec = WindowSpec::regular(2, DimMode::ThreeD);
    run("mhsa", {x, p.query, p.key, p.value, p.out}, [spec, heads](const auto& in) {
      AttentionParams<double> q{in[1], in[2], in[3], in[4], heads};
      return window_reverse(mhsa(window_partition(in[0], spec), q));
    }, opt);
  }
  {
    std::mt19937_64 prng(seed + 2);
    const std::size_t c = 4;
    SwinLayerParams<double> p = make_swin_layer<double>(c, 2, 2, prng);
    auto ps = p.parameters();
    std::vector<Var<double>> inputs{parameter(rnd({1, extent(3, 5), extent(3, 5), extent(2, 4), c}))};
    for (auto& v : ps) {
      v.mutable_value() = rnd(v.shape(), -0.8, 0.8);
      inputs.push_back(v);
    }
    run("swin_layer", inputs, [p](const auto& in) { return swin_layer(in[0], p, DimMode::ThreeD); }, opt);
  }
  {
    Var<double> pred = parameter(rnd({extent(1, 6), extent(1, 6)}));
    const Tensor<double> target = rnd(pred.shape());
    out.push_back(check_gradient("mae_loss", {pred}, [target](const auto& in) { return mae_loss(in[0], target); }, opt));
  }
  {
    const std::size_t b = extent(2, 3);
    Var<double> z = parameter(rnd({2 * b, extent(2, 6)}));
    out.push_back(check_gradient("nt_xent", {z}, [](const auto& in) { return nt_xent(in[0], 0.5); }, opt));
  }
  {
    const Shape s{extent(1, 2), 2, extent(1, 4), extent(1, 4), extent(1, 3)};
    Var<double> logits = parameter(rnd(s, -2.0, 2.0));
    Tensor<double> labels({s[0], 1, s[2], s[3], s[4]});
    for (auto& v : labels.data()) v = static_cast<double>(rng() & 1u);
    out.push_back(check_gradient("dice_ce_loss", {logits}, [labels](const auto& in) { return dice_ce_loss(in[0], labels); }, opt));
  }
  if (include_network) {
    std::mt19937_64 prng(seed + 3);
    auto block = ResidualBlock<double>::make(1, 2, {3, 3, 1}, {3, 3, 3}, {2, 2, 1}, prng);
    NamedParams<double> named;
    block.collect("embed", named);
    std::vector<Var<double>> inputs{parameter(rnd({1, 1, 6, 6, 2}))};
    for (auto& [n, v] : named) inputs.push_back(v);
    run("patch_embed", inputs, [block](const auto& in) { return block(in[0]); }, opt);

    // Whole segmentation network on the miniature configuration, sampled. The
    // small step keeps perturbations from straddling leaky-ReLU kinks.
    Model<double> model(ModelConfig::miniature(), Assembly::Segment3D, seed + 4);
    std::vector<Var<double>> all{parameter(rnd({1, 1, 16, 16, 4}))};
    for (auto& v : model.parameters()) all.push_back(v);
    GradCheckOptions sampled = opt;
    sampled.max_coordinates = 2;
    sampled.step = 1e-7;
    Tensor<double> labels({1, 1, 16, 16, 4});
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = (i / 7) % 3 == 0 ? 1.0 : 0.0;
    out.push_back(check_gradient("miniature_network", all, [&model, labels](const auto& in) {
      return dice_ce_loss(model.segment(in[0]), labels);
    }, sampled));
  }
  return out;
}

}  // namespace mdust
