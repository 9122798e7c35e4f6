// Three-stage training, evaluation and reporting.
//
// Stage 1: masked-ROI reconstruction (MAE) + NT-Xent on unlabeled volumes.
// Stage 2: Dice-CE on 2D RECIST slices through the shared encoder.
// Stage 3: Dice-CE on labeled 3D volumes with best-validation selection.
#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mdust/checkpoint.hpp"
#include "mdust/metrics.hpp"
#include "mdust/network.hpp"
#include "mdust/objectives.hpp"
#include "mdust/optim.hpp"
#include "mdust/preprocess.hpp"

namespace mdust {

struct StageConfig {
  int stage = 3;
  double lr = 1e-4;
  std::size_t batch = 2;
  std::size_t steps = 100;
  std::uint64_t seed = 0;
  bool deterministic = false;
  std::size_t validate_every = 0;  // stage 3; 0 validates only after the last step
  double mask_ratio = 0.15;
  double temperature = 0.5;
  ModelConfig model = ModelConfig::desk();

  // Desk-scale settings used by the acceptance runs.
  static StageConfig defaults(int stage) {
    StageConfig c;
    c.stage = stage;
    c.batch = stage == 1 ? 8 : stage == 2 ? 16 : 2;
    c.lr = stage == 1 ? 1e-4 : 1e-3;
    c.steps = 300;
    return c;
  }

  // Problems that make the run meaningless throw; doubtful settings are
  // returned as warnings.
  std::vector<std::string> validate() const {
    if (stage < 1 || stage > 3) throw std::invalid_argument("stage must be 1, 2 or 3");
    if (batch < 1) throw std::invalid_argument("batch size must be at least 1");
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw std::invalid_argument("learning rate must be finite and non-negative");
    if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) throw std::invalid_argument("mask ratio must lie in (0, 1)");
    if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be positive");
    model.validate();
    std::vector<std::string> warnings;
    if (stage == 1 && batch < 2) warnings.push_back("stage 1 with batch 1 has no NT-Xent negatives; the contrastive loss is constant");
    return warnings;
  }

  std::string echo() const {
    std::ostringstream os;
    os << "stage=" << stage << " lr=" << detail::exact(lr) << " batch=" << batch << " steps=" << steps << " seed=" << seed
       << " deterministic=" << (deterministic ? 1 : 0) << " validate_every=" << validate_every << " mask_ratio=" << detail::exact(mask_ratio)
       << " temperature=" << detail::exact(temperature) << " model=" << model.encoder_signature() << " input=" << model.input_shape[0] << "x"
       << model.input_shape[1] << "x" << model.input_shape[2];
    return os.str();
  }
};

struct LesionResult {
  std::string id;
  double dsc = 0.0;
  std::optional<double> hd_mm;  // absent when either mask is empty
  std::size_t voxels_true = 0;
  std::size_t voxels_pred = 0;
};

struct RunReport {
  int stage = 0;
  std::vector<double> losses;
  std::vector<std::pair<std::size_t, double>> validation;  // (step, mean DSC)
  std::size_t selected_step = 0;
  std::vector<LesionResult> lesions;
  std::size_t parameter_count = 0;
  std::string config;
  std::vector<std::string> warnings;
  double wall_seconds = 0.0;  // not part of the serialised report

  std::vector<double> dscs() const {
    std::vector<double> v;
    for (const auto& l : lesions) v.push_back(l.dsc);
    return v;
  }
};

struct Summary {
  double mean = 0.0, stddev = 0.0;
  std::size_t n = 0;
};

inline Summary summarize(const std::vector<double>& v) {
  Summary s;
  s.n = v.size();
  if (v.empty()) return s;
  for (double x : v) s.mean += x;
  s.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.stddev = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return s;
}

inline std::string report_csv(const RunReport& r) {
  std::ostringstream os;
  os << "id,dsc,hd_mm,voxels_true,voxels_pred\n";
  for (const auto& l : r.lesions) {
    os << l.id << ',' << detail::exact(l.dsc) << ',' << (l.hd_mm ? detail::exact(*l.hd_mm) : std::string("undefined")) << ',' << l.voxels_true
       << ',' << l.voxels_pred << '\n';
  }
  return os.str();
}

inline std::vector<LesionResult> parse_report_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "id,dsc,hd_mm,voxels_true,voxels_pred") throw FormatError("report: unexpected CSV header");
  std::vector<LesionResult> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (f.size() != 5) throw FormatError("report: expected 5 columns in '" + line + "'");
    LesionResult l;
    try {
      l.id = f[0];
      l.dsc = std::stod(f[1]);
      if (f[2] != "undefined") l.hd_mm = std::stod(f[2]);
      l.voxels_true = std::stoull(f[3]);
      l.voxels_pred = std::stoull(f[4]);
    } catch (const std::logic_error&) {
      throw FormatError("report: malformed row '" + line + "'");
    }
    out.push_back(std::move(l));
  }
  return out;
}

inline std::string report_summary(const RunReport& r) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  os << "stage: " << r.stage << "\n";
  os << "config: " << r.config << "\n";
  os << "parameters: " << r.parameter_count << "\n";
  if (!r.losses.empty()) os << "steps: " << r.losses.size() << " first_loss: " << r.losses.front() << " final_loss: " << r.losses.back() << "\n";
  for (const auto& [step, v] : r.validation) os << "validation step " << step << ": mean DSC " << v << "\n";
  if (!r.validation.empty()) os << "selected step: " << r.selected_step << "\n";
  for (const auto& w : r.warnings) os << "warning: " << w << "\n";
  if (!r.lesions.empty()) {
    const Summary d = summarize(r.dscs());
    std::vector<double> hd;
    std::size_t undefined = 0;
    for (const auto& l : r.lesions) {
      if (l.hd_mm) hd.push_back(*l.hd_mm);
      else ++undefined;
    }
    const Summary h = summarize(hd);
    os << "lesions: " << d.n << "\n";
    os << "DSC: " << d.mean << " +- " << d.stddev << "\n";
    os << "HD (mm): " << h.mean << " +- " << h.stddev << " over " << h.n << " lesions";
    if (undefined) os << " (" << undefined << " undefined)";
    os << "\n";
  }
  return os.str();
}

// Paired t-test on per-lesion DSC of two reports over their common ids.
inline TTestResult compare_reports(const RunReport& a, const RunReport& b, double alpha = 0.05) {
  std::map<std::string, double> other;
  for (const auto& l : b.lesions) other[l.id] = l.dsc;
  std::vector<double> x, y;
  for (const auto& l : a.lesions) {
    auto it = other.find(l.id);
    if (it == other.end()) continue;
    x.push_back(l.dsc);
    y.push_back(it->second);
  }
  return paired_t_test(x, y, alpha);
}

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Epoch-wise shuffled index stream.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::uint64_t seed) : n_(n), rng_(seed) {
    if (n == 0) throw std::invalid_argument("training corpus is empty");
  }

  std::vector<std::size_t> next(std::size_t batch) {
    std::vector<std::size_t> out;
    while (out.size() < batch) {
      if (pos_ == order_.size()) reshuffle();
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  void reshuffle() {
    order_.resize(n_);
    for (std::size_t i = 0; i < n_; ++i) order_[i] = i;
    for (std::size_t i = n_; i > 1; --i) std::swap(order_[i - 1], order_[rng_() % i]);
    pos_ = 0;
  }

  std::size_t n_;
  std::mt19937_64 rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

// Concatenates [1,1,H,W,L] tensors along the batch axis.
inline Tensor<float> stack(const std::vector<const Tensor<float>*>& parts) {
  Shape s = parts.front()->shape();
  const std::size_t per = parts.front()->size();
  s[0] = parts.size();
  Tensor<float> out(s);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (parts[i]->shape() != parts.front()->shape()) throw ShapeError("batch members differ in shape");
    std::copy(parts[i]->ptr(), parts[i]->ptr() + per, out.ptr() + i * per);
  }
  return out;
}

inline void require_grid(const PreparedSample& s, const ModelConfig& cfg, DimMode mode) {
  const auto want = cfg.with_mode(mode).input_shape;
  const Shape expect{1, 1, want[0], want[1], want[2]};
  if (s.input.shape() != expect)
    throw std::invalid_argument("sample '" + s.id + "' has shape " + to_string(s.input.shape()) + ", model expects " + to_string(expect));
}

}  // namespace detail

template <typename T>
struct StageResult {
  Model<T> model;
  CheckpointBundle checkpoint;
  RunReport report;
};

// Logs one line per step when `log` is set.
struct TrainHooks {
  std::ostream* log = nullptr;
};

inline std::string stage_tag(int stage) { return "stage" + std::to_string(stage); }

// ---------------------------------------------------------------- stage 1

template <typename T = float>
StageResult<T> run_stage1(const StageConfig& cfg, const std::vector<PreparedSample>& corpus, const CheckpointBundle* init = nullptr,
                          TrainHooks hooks = {}) {
  const auto start = std::chrono::steady_clock::now();
  if (corpus.empty()) throw std::invalid_argument("stage 1: unlabeled corpus is empty");
  RunReport report;
  report.stage = 1;
  report.warnings = cfg.validate();
  report.config = cfg.echo();
  Model<T> model(cfg.model, Assembly::Pretrain, cfg.seed);
  if (init) load_encoder(*init, model);
  for (const auto& s : corpus) detail::require_grid(s, cfg.model, DimMode::ThreeD);
  report.parameter_count = model.parameter_count();
  auto params = model.parameters();
  AdamState<T> adam;
  const AdamOptions opt{cfg.lr};
  detail::BatchSampler sampler(corpus.size(), detail::splitmix64(cfg.seed ^ 0x51));
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const auto idx = sampler.next(cfg.batch);
    std::vector<LesionVolume> masked(idx.size());
    std::vector<const Tensor<float>*> originals, masked_ptrs;
    std::vector<Tensor<float>> masked_tensors;
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const Tensor<float>& x = corpus[idx[b]].input;
      originals.push_back(&x);
      LesionVolume v({x.dim(2), x.dim(3), x.dim(4)}, {1.0, 1.0, 1.0}, 1.0);
      v.voxels = x.to_vector();
      const std::uint64_t mseed = detail::splitmix64(cfg.seed * 1000003ull + step * 131ull + b);
      masked_tensors.push_back(to_tensor(mask_roi(v, cfg.mask_ratio, mseed).first));
    }
    for (const auto& t : masked_tensors) masked_ptrs.push_back(&t);
    const Tensor<float> orig_batch = detail::stack(originals);
    const Var<T> x_orig = constant(orig_batch.template cast<T>());
    const Var<T> x_mask = constant(detail::stack(masked_ptrs).template cast<T>());
    const auto f_orig = model.encode(x_orig);
    const auto f_mask = model.encode(x_mask);
    const Var<T> recon = model.reconstruct(f_mask);
    const Var<T> z = concat<T>({model.embed(f_orig), model.embed(f_mask)}, 0);
    const Var<T> loss = add(mae_loss(recon, orig_batch.template cast<T>()), nt_xent(z, cfg.temperature));
    zero_grad(params);
    loss.backward();
    adam_step(params, opt, adam);
    report.losses.push_back(static_cast<double>(loss.value()[0]));
    if (!std::isfinite(report.losses.back())) throw std::runtime_error("stage 1: loss became non-finite at step " + std::to_string(step));
    if (hooks.log) *hooks.log << "stage1 step " << step << " loss " << detail::exact(report.losses.back()) << "\n" << std::flush;
  }
  CheckpointBundle ckpt = make_checkpoint(model, stage_tag(1), CheckpointScope::EncoderOnly);
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return {std::move(model), std::move(ckpt), std::move(report)};
}

// ---------------------------------------------------------------- evaluation

// Forward pass, post-processing to the pre-down-sampling grid, then DSC/HD
// against the full-resolution label.
template <typename T>
RunReport evaluate(const Model<T>& model, const std::vector<PreparedSample>& samples) {
  if (samples.empty()) throw std::invalid_argument("evaluate: split is empty");
  RunReport r;
  r.stage = 0;
  r.parameter_count = model.parameter_count();
  NoGradGuard no_grad;
  for (const auto& s : samples) {
    if (!s.full_label) throw std::invalid_argument("evaluate: sample '" + s.id + "' has no label");
    const Var<T> logits = model.segment(constant(s.input.template cast<T>()));
    const BinaryMask pred = postprocess(logits.value(), s.full_dims, s.full_spacing);
    LesionResult l;
    l.id = s.id;
    l.dsc = dsc(pred, *s.full_label);
    l.voxels_true = s.full_label->count();
    l.voxels_pred = pred.count();
    if (l.voxels_true > 0 && l.voxels_pred > 0) l.hd_mm = hausdorff(pred, *s.full_label);
    r.lesions.push_back(std::move(l));
  }
  return r;
}

// Masks predicted on the network grid, without resampling; used to inspect
// how well the training targets themselves are fitted.
template <typename T>
double training_grid_dsc(const Model<T>& model, const PreparedSample& s) {
  NoGradGuard no_grad;
  const Var<T> logits = model.segment(constant(s.input.template cast<T>()));
  const std::array<std::size_t, 3> grid{s.input.dim(2), s.input.dim(3), s.input.dim(4)};
  const BinaryMask pred = postprocess(logits.value(), grid, {1.0, 1.0, 1.0});
  BinaryMask truth(grid);
  for (std::size_t i = 0; i < truth.size(); ++i) truth.voxels[i] = (*s.target)[i] > 0.5f ? 1 : 0;
  return dsc(pred, truth);
}

// ---------------------------------------------------------------- stages 2 and 3

template <typename T = float>
StageResult<T> run_segmentation_stage(const StageConfig& cfg, const std::vector<PreparedSample>& train, const std::vector<PreparedSample>& val,
                                      const CheckpointBundle* init, TrainHooks hooks = {}) {
  const auto start = std::chrono::steady_clock::now();
  const int stage = cfg.stage;
  if (stage != 2 && stage != 3) throw std::invalid_argument("segmentation training runs stage 2 or 3");
  if (train.empty()) throw std::invalid_argument("stage " + std::to_string(stage) + ": training corpus is empty");
  const Assembly assembly = stage == 2 ? Assembly::Segment2D : Assembly::Segment3D;
  RunReport report;
  report.stage = stage;
  report.warnings = cfg.validate();
  report.config = cfg.echo();
  Model<T> model(cfg.model, assembly, cfg.seed);
  if (init) load_encoder(*init, model);
  for (const auto* set : {&train, &val})
    for (const auto& s : *set) {
      detail::require_grid(s, cfg.model, mode_of(assembly));
      if (!s.target) throw std::invalid_argument("sample '" + s.id + "' has no label");
    }
  report.parameter_count = model.parameter_count();
  auto params = model.parameters();
  AdamState<T> adam;
  const AdamOptions opt{cfg.lr};
  detail::BatchSampler sampler(train.size(), detail::splitmix64(cfg.seed ^ (0x52 + static_cast<std::uint64_t>(stage))));

  std::vector<Tensor<T>> best;
  double best_dsc = -1.0;
  auto validate = [&](std::size_t step) {
    if (val.empty()) return;
    const double mean = summarize(evaluate(model, val).dscs()).mean;
    report.validation.emplace_back(step, mean);
    if (mean > best_dsc) {
      best_dsc = mean;
      report.selected_step = step;
      best.clear();
      for (const auto& p : params) best.push_back(p.value());
    }
    if (hooks.log) *hooks.log << "stage" << stage << " validation step " << step << " dsc " << detail::exact(mean) << "\n" << std::flush;
  };

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const auto idx = sampler.next(cfg.batch);
    std::vector<const Tensor<float>*> xs, ys;
    for (std::size_t i : idx) {
      xs.push_back(&train[i].input);
      ys.push_back(&*train[i].target);
    }
    const Var<T> x = constant(detail::stack(xs).template cast<T>());
    const Var<T> loss = dice_ce_loss(model.segment(x), detail::stack(ys).template cast<T>());
    zero_grad(params);
    loss.backward();
    adam_step(params, opt, adam);
    report.losses.push_back(static_cast<double>(loss.value()[0]));
    if (!std::isfinite(report.losses.back()))
      throw std::runtime_error("stage " + std::to_string(stage) + ": loss became non-finite at step " + std::to_string(step));
    if (hooks.log) *hooks.log << "stage" << stage << " step " << step << " loss " << detail::exact(report.losses.back()) << "\n" << std::flush;
    const std::size_t done = step + 1;
    if (stage == 3 && cfg.validate_every > 0 && done % cfg.validate_every == 0 && done != cfg.steps) validate(done);
  }
  if (stage == 3) {
    validate(cfg.steps);
    if (!best.empty()) {
      for (std::size_t i = 0; i < params.size(); ++i) params[i].mutable_value() = best[i];
    }
  }
  CheckpointBundle ckpt = make_checkpoint(model, stage_tag(stage), CheckpointScope::Everything);
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return {std::move(model), std::move(ckpt), std::move(report)};
}

template <typename T = float>
StageResult<T> run_stage2(StageConfig cfg, const std::vector<PreparedSample>& slices, const CheckpointBundle* init = nullptr, TrainHooks hooks = {}) {
  cfg.stage = 2;
  return run_segmentation_stage<T>(cfg, slices, {}, init, hooks);
}

template <typename T = float>
StageResult<T> run_stage3(StageConfig cfg, const std::vector<PreparedSample>& train, const std::vector<PreparedSample>& val,
                          const CheckpointBundle* init = nullptr, TrainHooks hooks = {}) {
  cfg.stage = 3;
  return run_segmentation_stage<T>(cfg, train, val, init, hooks);
}

// ---------------------------------------------------------------- representation check

struct SimilarityReport {
  double matched = 0.0;     // mean cos(original_i, masked_i)
  double mismatched = 0.0;  // mean cos(original_i, masked_j), i != j
};

inline double cosine(const float* a, const float* b, std::size_t n) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    ab += static_cast<double>(a[i]) * b[i];
    aa += static_cast<double>(a[i]) * a[i];
    bb += static_cast<double>(b[i]) * b[i];
  }
  return ab / std::sqrt(aa * bb);
}

template <typename T>
SimilarityReport embedding_similarity(const Model<T>& model, const std::vector<PreparedSample>& samples, double ratio, std::uint64_t seed) {
  if (samples.size() < 2) throw std::invalid_argument("embedding_similarity: need at least two volumes");
  NoGradGuard no_grad;
  const std::size_t D = ContrastiveHead<T>::kEmbedding;
  std::vector<Tensor<float>> orig, masked;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const Tensor<float>& x = samples[i].input;
    LesionVolume v({x.dim(2), x.dim(3), x.dim(4)}, {1.0, 1.0, 1.0}, 1.0);
    v.voxels = x.to_vector();
    const Tensor<float> m = to_tensor(mask_roi(v, ratio, detail::splitmix64(seed + i)).first);
    orig.push_back(model.embed(model.encode(constant(x.template cast<T>()))).value().template cast<float>());
    masked.push_back(model.embed(model.encode(constant(m.template cast<T>()))).value().template cast<float>());
  }
  SimilarityReport r;
  std::size_t nm = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    r.matched += cosine(orig[i].ptr(), masked[i].ptr(), D);
    for (std::size_t j = 0; j < samples.size(); ++j) {
      if (j == i) continue;
      r.mismatched += cosine(orig[i].ptr(), masked[j].ptr(), D);
      ++nm;
    }
  }
  r.matched /= static_cast<double>(samples.size());
  r.mismatched /= static_cast<double>(nm);
  return r;
}

}  // namespace mdust
