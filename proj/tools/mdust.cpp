// mdust: phantom generation, three-stage training, evaluation and checks.
#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mdust/checkpoint.hpp"
#include "mdust/corpus.hpp"
#include "mdust/gradcheck.hpp"
#include "mdust/phantom.hpp"
#include "mdust/preprocess.hpp"
#include "mdust/training.hpp"
#include "mdust/volume.hpp"

namespace fs = std::filesystem;
using namespace mdust;

namespace {

// Raised for bad invocations that CLI11 cannot see (config file keys,
// inconsistent options); exits with the usage code.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

struct Profile {
  ModelConfig model;
  PreprocessOptions prep;
};

Profile profile_named(const std::string& name) {
  if (name == "desk") return {ModelConfig::desk(), PreprocessOptions::desk()};
  if (name == "full") return {ModelConfig::full(), PreprocessOptions::full()};
  if (name == "tiny") return {ModelConfig::miniature(), PreprocessOptions{0.75, {32, 32, 8}, true}};
  throw UsageError("unknown profile '" + name + "' (expected desk, full or tiny)");
}

// Options shared by the training subcommands. Values from --config apply
// only where the flag was not given on the command line.
struct TrainArgs {
  std::string corpus;
  std::string checkpoint_in;
  std::string checkpoint_out;
  std::string report;
  std::string config;
  std::string profile = "desk";
  std::uint64_t seed = 0;
  bool deterministic = false;
  std::size_t steps = 0;
  double lr = 0.0;
  std::size_t batch = 0;
  std::size_t validate_every = 0;
  double mask_ratio = 0.15;
  double temperature = 0.5;
  bool verbose = false;
};

struct Bound {
  CLI::App* app;
  std::map<std::string, CLI::Option*> options;  // config key -> option
};

void add_train_options(Bound& b, TrainArgs& a, int stage) {
  CLI::App* app = b.app;
  const StageConfig d = StageConfig::defaults(stage);
  a.steps = d.steps;
  a.lr = d.lr;
  a.batch = d.batch;
  b.options["corpus"] = app->add_option("--corpus", a.corpus, "corpus manifest")->required();
  b.options["checkpoint-in"] = app->add_option("--checkpoint-in", a.checkpoint_in, "initialise the encoder from this checkpoint");
  b.options["checkpoint-out"] = app->add_option("--checkpoint-out", a.checkpoint_out, "checkpoint to write")->required();
  b.options["report"] = app->add_option("--report", a.report, "report prefix (writes <prefix>.txt, and <prefix>.csv when lesions are evaluated)");
  app->add_option("--config", a.config, "key=value file; flags on the command line take precedence");
  b.options["profile"] = app->add_option("--profile", a.profile, "model/preprocessing size: desk, full or tiny");
  b.options["seed"] = app->add_option("--seed", a.seed, "random seed");
  b.options["deterministic"] = app->add_flag("--deterministic", a.deterministic, "serial, reproducible execution");
  b.options["steps"] = app->add_option("--steps", a.steps, "optimisation steps")->capture_default_str();
  b.options["lr"] = app->add_option("--lr", a.lr, "Adam learning rate")->capture_default_str();
  b.options["batch"] = app->add_option("--batch", a.batch, "batch size")->capture_default_str();
  b.options["verbose"] = app->add_flag("--verbose", a.verbose, "log every step to stderr");
  if (stage == 1) {
    b.options["mask-ratio"] = app->add_option("--mask-ratio", a.mask_ratio, "masked ROI volume fraction");
    b.options["temperature"] = app->add_option("--temperature", a.temperature, "NT-Xent temperature");
  }
  if (stage == 3) b.options["validate-every"] = app->add_option("--validate-every", a.validate_every, "validation interval in steps (0: end only)");
}

std::map<std::string, std::string> read_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file " + path);
  std::map<std::string, std::string> out;
  std::string line;
  std::size_t lineno = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return std::string();
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw UsageError("config " + path + ":" + std::to_string(lineno) + ": expected key=value");
    out[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return out;
}

void apply_config(const Bound& b, const std::string& path) {
  if (path.empty()) return;
  for (const auto& [key, value] : read_config_file(path)) {
    auto it = b.options.find(key);
    if (it == b.options.end()) throw UsageError("config " + path + ": unknown key '" + key + "'");
    CLI::Option* opt = it->second;
    if (opt->count() > 0) continue;
    try {
      if (opt->get_expected_min() == 0) {
        if (value != "0" && value != "1" && value != "true" && value != "false")
          throw UsageError("config " + path + ": '" + key + "' expects true/false");
        if (value == "1" || value == "true") opt->add_result(std::string("true"));
        else continue;
      } else {
        opt->add_result(value);
      }
      opt->run_callback();
    } catch (const CLI::Error& e) {
      throw UsageError("config " + path + ": bad value for '" + key + "': " + e.what());
    }
  }
}

StageConfig stage_config(const TrainArgs& a, int stage, const Profile& p) {
  StageConfig c = StageConfig::defaults(stage);
  c.lr = a.lr;
  c.batch = a.batch;
  c.steps = a.steps;
  c.seed = a.seed;
  c.deterministic = a.deterministic;
  c.validate_every = a.validate_every;
  c.mask_ratio = a.mask_ratio;
  c.temperature = a.temperature;
  c.model = p.model;
  return c;
}

Manifest load_manifest(const std::string& path) {
  if (!fs::exists(path)) throw std::runtime_error("corpus manifest not found: " + path);
  return read_manifest(path);
}

std::vector<PreparedSample> load_split(const Manifest& m, const std::string& tag, const PreprocessOptions& prep) {
  std::vector<PreparedSample> out;
  for (const auto& e : m.with_split(tag)) {
    const fs::path file = m.resolve(e);
    if (!fs::exists(file)) throw std::runtime_error("volume file not found: " + file.string());
    LesionVolume v = read_volume(file);
    v.id = e.id;
    out.push_back(prepare(v, prep));
  }
  return out;
}

std::optional<CheckpointBundle> maybe_checkpoint(const std::string& path) {
  if (path.empty()) return std::nullopt;
  return load_checkpoint(path);
}

// Writes every (path, bytes) pair or, on failure, removes the ones already
// written so a failed command leaves no partial outputs behind.
void write_outputs(const std::vector<std::pair<fs::path, std::string>>& files) {
  std::vector<fs::path> done;
  try {
    for (const auto& [path, bytes] : files) {
      detail::write_atomically(path, bytes);
      done.push_back(path);
    }
  } catch (...) {
    std::error_code ec;
    for (const auto& p : done) fs::remove(p, ec);
    throw;
  }
}

void add_report_files(std::vector<std::pair<fs::path, std::string>>& files, const std::string& prefix, const RunReport& r,
                      const std::string& extra = {}) {
  if (prefix.empty()) return;
  std::ostringstream loss;
  if (!r.losses.empty()) {
    loss << "step,loss\n";
    for (std::size_t i = 0; i < r.losses.size(); ++i) loss << i << ',' << detail::exact(r.losses[i]) << '\n';
  }
  files.emplace_back(prefix + ".txt", report_summary(r) + extra);
  if (!r.lesions.empty()) files.emplace_back(prefix + ".csv", report_csv(r));
  if (!r.losses.empty()) files.emplace_back(prefix + ".loss.csv", loss.str());
}

int run_training(int stage, const Bound& b, const TrainArgs& a) {
  apply_config(b, a.config);
  const Profile p = profile_named(a.profile);
  const StageConfig cfg = stage_config(a, stage, p);
  const Manifest m = load_manifest(a.corpus);
  const auto init = maybe_checkpoint(a.checkpoint_in);
  TrainHooks hooks;
  if (a.verbose) hooks.log = &std::cerr;

  std::vector<std::pair<fs::path, std::string>> files;
  RunReport report;
  CheckpointBundle ckpt;
  if (stage == 1) {
    const auto corpus = load_split(m, "unlabeled", p.prep);
    auto r = run_stage1<float>(cfg, corpus, init ? &*init : nullptr, hooks);
    report = std::move(r.report);
    ckpt = std::move(r.checkpoint);
  } else if (stage == 2) {
    const auto slices = load_split(m, "slice", p.prep);
    auto r = run_stage2<float>(cfg, slices, init ? &*init : nullptr, hooks);
    report = std::move(r.report);
    ckpt = std::move(r.checkpoint);
  } else {
    const auto train = load_split(m, "train", p.prep);
    const auto val = load_split(m, "val", p.prep);
    auto r = run_stage3<float>(cfg, train, val, init ? &*init : nullptr, hooks);
    report = std::move(r.report);
    ckpt = std::move(r.checkpoint);
  }
  files.emplace_back(a.checkpoint_out, encode_checkpoint(ckpt));
  add_report_files(files, a.report, report);
  write_outputs(files);
  for (const auto& w : report.warnings) std::cerr << "warning: " << w << "\n";
  std::cout << report_summary(report);
  std::cout << "wall seconds: " << report.wall_seconds << "\n";
  return 0;
}

Assembly assembly_for(const CheckpointBundle& b) {
  if (b.stage == "stage2") return Assembly::Segment2D;
  if (b.stage == "stage3") return Assembly::Segment3D;
  throw std::runtime_error("checkpoint '" + b.stage + "' has no segmentation decoder; use a stage 2 or stage 3 checkpoint");
}

std::string ttest_text(const TTestResult& t) {
  std::ostringstream os;
  os << "paired t-test (DSC, this - other): mean difference " << t.mean_difference << ", t " << t.t << ", df " << t.df << ", p " << t.p
     << (t.significant ? " (significant at 0.05)" : " (not significant at 0.05)") << "\n";
  return os.str();
}

// ---------------------------------------------------------------- gen-phantoms

struct GenArgs {
  std::string out;
  std::uint64_t seed = 0;
  std::size_t unlabeled = 200, slices = 100, labeled = 60;
};

int gen_phantoms(const GenArgs& a) {
  const fs::path out(a.out);
  if (fs::exists(out) && !(fs::is_directory(out) && fs::is_empty(out)))
    throw std::runtime_error("output directory exists and is not empty: " + out.string());
  if (a.labeled < 3) throw UsageError("--labeled must be at least 3 (train/val/test)");
  // Build in a sibling directory and rename it into place at the end.
  const fs::path staging = out.string() + ".partial";
  fs::remove_all(staging);
  fs::create_directories(staging);
  try {
    std::vector<ManifestEntry> entries;
    auto emit = [&](const LesionVolume& v, const std::string& split, const std::string& id) {
      write_volume(staging / (id + ".vol"), v);
      entries.push_back({id + ".vol", split, id});
    };
    // Disjoint per-role seed ranges so the three corpora never share a phantom.
    const std::uint64_t base = a.seed * 1000003ull;
    for (std::size_t i = 0; i < a.unlabeled; ++i) {
      LesionVolume v = gen_phantom(PhantomSpec::random(detail::splitmix64(base + 1'000'000 + i)));
      v.label.reset();
      emit(v, "unlabeled", "u" + std::to_string(i));
    }
    for (std::size_t i = 0; i < a.slices; ++i) {
      const LesionVolume v = gen_phantom(PhantomSpec::random(detail::splitmix64(base + 2'000'000 + i)));
      emit(extract_recist_slice(v).image, "slice", "s" + std::to_string(i));
    }
    std::vector<std::size_t> ids(a.labeled);
    for (std::size_t i = 0; i < a.labeled; ++i) ids[i] = i;
    const auto split = split_corpus(ids, a.seed);
    for (const auto& [tag, part] : {std::pair{"train", &split.train}, {"val", &split.val}, {"test", &split.test}})
      for (std::size_t i : *part) emit(gen_phantom(PhantomSpec::random(detail::splitmix64(base + 3'000'000 + i))), tag, "l" + std::to_string(i));
    write_manifest(staging / "manifest.txt", entries);
    if (fs::exists(out)) fs::remove(out);
    fs::rename(staging, out);
  } catch (...) {
    std::error_code ec;
    fs::remove_all(staging, ec);
    throw;
  }
  std::cout << "wrote " << a.unlabeled << " unlabeled, " << a.slices << " slice and " << a.labeled << " labeled phantoms to " << out.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------- evaluate / predict

struct EvalArgs {
  std::string corpus, checkpoint_in, report, compare, profile = "desk", split = "test";
};

int run_evaluate(const EvalArgs& a) {
  const Profile p = profile_named(a.profile);
  const Manifest m = load_manifest(a.corpus);
  const CheckpointBundle ckpt = load_checkpoint(a.checkpoint_in);
  std::optional<RunReport> other;
  if (!a.compare.empty()) {
    if (!fs::exists(a.compare)) throw std::runtime_error("comparison report not found: " + a.compare);
    other.emplace();
    other->lesions = parse_report_csv(detail::read_file(a.compare));
  }
  Model<float> model(p.model, assembly_for(ckpt), 0);
  load_all(ckpt, model);
  auto samples = load_split(m, a.split, p.prep);
  RunReport r = evaluate(model, samples);
  r.stage = ckpt.stage == "stage2" ? 2 : 3;
  r.config = "checkpoint=" + a.checkpoint_in + " split=" + a.split + " profile=" + a.profile;
  std::string extra;
  if (other) extra = ttest_text(compare_reports(r, *other));
  std::vector<std::pair<fs::path, std::string>> files;
  add_report_files(files, a.report, r, extra);
  write_outputs(files);
  std::cout << report_summary(r) << extra;
  return 0;
}

struct PredictArgs {
  std::string checkpoint_in, input, output, profile = "desk";
};

int run_predict(const PredictArgs& a) {
  const Profile p = profile_named(a.profile);
  const CheckpointBundle ckpt = load_checkpoint(a.checkpoint_in);
  if (!fs::exists(a.input)) throw std::runtime_error("input volume not found: " + a.input);
  const LesionVolume raw = read_volume(a.input);
  const Assembly assembly = assembly_for(ckpt);
  if ((assembly == Assembly::Segment2D) != raw.is_2d())
    throw std::runtime_error(std::string("a ") + to_string(assembly) + " checkpoint cannot segment a " + (raw.is_2d() ? "2D" : "3D") + " input");
  Model<float> model(p.model, assembly, 0);
  load_all(ckpt, model);
  const PreparedSample s = prepare(raw, p.prep);
  BinaryMask mask;
  {
    NoGradGuard no_grad;
    mask = postprocess(model.segment(constant(s.input)).value(), s.full_dims, s.full_spacing);
  }
  // The mask lives on the cropped 0.75 mm grid the network saw before
  // down-sampling; the voxels carry the same 0/1 values as the label.
  LesionVolume out(s.full_dims, s.full_spacing, raw.recist_diameter);
  for (std::size_t i = 0; i < mask.size(); ++i) out.voxels[i] = mask.voxels[i];
  out.label = mask;
  write_outputs({{a.output, encode_volume(out)}});
  std::cout << "predicted " << mask.count() << " lesion voxels on a " << s.full_dims[0] << "x" << s.full_dims[1] << "x" << s.full_dims[2]
            << " grid\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mdust: unified 2D/3D Swin segmentation with three-stage training"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-phantoms", "write a synthetic phantom corpus and its manifest");
  gen_cmd->add_option("--out", gen.out, "output directory (must not exist or be empty)")->required();
  gen_cmd->add_option("--seed", gen.seed, "corpus seed");
  gen_cmd->add_option("--unlabeled", gen.unlabeled, "unlabeled 3D volumes");
  gen_cmd->add_option("--slices", gen.slices, "labeled 2D RECIST slices");
  gen_cmd->add_option("--labeled", gen.labeled, "labeled 3D volumes, split train/val/test");

  TrainArgs t1, t2, t3;
  Bound b1{app.add_subcommand("pretrain", "stage 1: self-supervised encoder pretraining"), {}};
  Bound b2{app.add_subcommand("finetune2d", "stage 2: 2D segmentation on RECIST slices"), {}};
  Bound b3{app.add_subcommand("finetune3d", "stage 3: 3D segmentation with validation selection"), {}};
  add_train_options(b1, t1, 1);
  add_train_options(b2, t2, 2);
  add_train_options(b3, t3, 3);

  EvalArgs ev;
  auto* ev_cmd = app.add_subcommand("evaluate", "per-lesion DSC/HD on a corpus split");
  ev_cmd->add_option("--corpus", ev.corpus, "corpus manifest")->required();
  ev_cmd->add_option("--checkpoint-in", ev.checkpoint_in, "stage 2 or stage 3 checkpoint")->required();
  ev_cmd->add_option("--split", ev.split, "split tag to evaluate");
  ev_cmd->add_option("--report", ev.report, "report prefix (<prefix>.csv and <prefix>.txt)");
  ev_cmd->add_option("--compare", ev.compare, "per-lesion CSV of another run for a paired t-test");
  ev_cmd->add_option("--profile", ev.profile, "model/preprocessing size: desk, full or tiny");

  PredictArgs pr;
  auto* pr_cmd = app.add_subcommand("predict", "segment one volume file");
  pr_cmd->add_option("--checkpoint-in", pr.checkpoint_in, "stage 2 or stage 3 checkpoint")->required();
  pr_cmd->add_option("--input", pr.input, "volume file")->required();
  pr_cmd->add_option("--output", pr.output, "mask volume file to write")->required();
  pr_cmd->add_option("--profile", pr.profile, "model/preprocessing size: desk, full or tiny");

  std::uint64_t gc_seed = 7;
  bool gc_quick = false;
  auto* gc_cmd = app.add_subcommand("gradcheck", "finite-difference gradient checks of every differentiable op");
  gc_cmd->add_option("--seed", gc_seed, "shape/value seed");
  gc_cmd->add_flag("--quick", gc_quick, "skip the whole-network check");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*gen_cmd) return gen_phantoms(gen);
    if (*b1.app) return run_training(1, b1, t1);
    if (*b2.app) return run_training(2, b2, t2);
    if (*b3.app) return run_training(3, b3, t3);
    if (*ev_cmd) return run_evaluate(ev);
    if (*pr_cmd) return run_predict(pr);
    if (*gc_cmd) {
      bool ok = true;
      for (const auto& r : gradcheck_suite(gc_seed, !gc_quick)) {
        std::printf("%-4s %-20s max_rel_error %.3e coords %zu %.2fs\n", r.passed ? "ok" : "FAIL", r.name.c_str(), r.max_rel_error, r.coordinates,
                    r.seconds);
        ok = ok && r.passed;
      }
      std::printf("%s\n", ok ? "all gradient checks passed" : "gradient checks FAILED");
      return ok ? 0 : kExitFailure;
    }
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitFailure;
}
