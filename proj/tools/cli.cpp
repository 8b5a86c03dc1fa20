// SPDX-License-Identifier: Apache-2.0

#include "cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <chrono>
#include <filesystem>
#include <optional>

#include "edmb/eval.hpp"
#include "edmb/inference.hpp"
#include "edmb/train.hpp"
#include "edmb/verify.hpp"

namespace edmb::cli {

namespace fs = std::filesystem;

namespace {

struct TrainArgs {
  std::string stage, config, data, list, out, resume, init_from;
  std::optional<std::uint64_t> seed;
  std::optional<int> steps;
  bool quiet = false;
};

struct InferArgs {
  std::string ckpt, image, out;
  double gamma = 0.0;
  bool sigma_form = false;
  bool nms = false;
};

struct SweepArgs {
  std::string ckpt, image, out_dir, gammas = "-5:0.5:11", id;
  bool sigma_form = false;
};

struct EvalArgs {
  std::string pred, gt, list, match = "auto";
  double max_dist = 0.0075;
  int thresholds = 33;
  bool multigranularity = false;
  bool no_nms = false;
};

struct BenchArgs {
  std::string config, shape = "3x320x320";
  std::uint64_t seed = 0;
  int repeat = 0;
};

struct CheckArgs {
  std::string suite = "all";
  std::uint64_t seed = 1;
};

template <typename T>
void run_train(const TrainArgs& a, TrainConfig cfg, std::ostream& out) {
  const auto data = load_dataset(a.data, a.list);
  EdmbModel<T> model(cfg.model);
  TrainHooks hooks;
  hooks.out_dir = a.out;
  hooks.init_from = a.init_from;
  hooks.resume = a.resume;
  if (!a.quiet) {
    hooks.on_step = [&out](const StepLog& s) {
      char buf[128];
      std::snprintf(buf, sizeof buf, "step %d loss %.6f time %.3fs\n", s.step, s.loss, s.seconds);
      out << buf << std::flush;
    };
  }
  train_stage(model, data, cfg, hooks);
  out << "checkpoint " << (fs::path(a.out) / "last.ckpt").string() << "\n";
}

int cmd_train(const TrainArgs& a, std::ostream& out) {
  TrainConfig cfg = load_config(a.config);
  if (!a.stage.empty()) cfg.stage = parse_stage(a.stage);
  if (a.seed) {
    cfg.seed = *a.seed;
    cfg.model.init_seed = *a.seed;
  }
  if (a.steps) cfg.max_steps = *a.steps;
  if (cfg.precision == Precision::f64) run_train<double>(a, cfg, out);
  else run_train<float>(a, cfg, out);
  return 0;
}

EdmbModel<float> load_model(const std::string& path) {
  const Checkpoint ck = load_checkpoint(path);
  EdmbModel<float> model(model_config_from(ck));
  apply_checkpoint(model, ck, true);
  return model;
}

void write_map(const std::string& path, const Image& img) {
  const auto ext = fs::path(path).extension().string();
  if (ext == ".png") write_png(path, img);
  else write_netpbm(path, img);
}

int cmd_infer(const InferArgs& a, std::ostream& out) {
  EdmbModel<float> model = load_model(a.ckpt);
  const auto dist = predict_distribution(model, image_tensor<float>(read_image(a.image)));
  Image map = map_to_image(sample_granularity(dist, a.gamma, a.sigma_form));
  if (a.nms) map = nms_thin(map);
  write_map(a.out, map);
  out << "wrote " << a.out << "\n";
  return 0;
}

int cmd_sweep(const SweepArgs& a, std::ostream& out) {
  GranularityConfig g = GranularityConfig::parse(a.gammas);
  g.sigma_form = a.sigma_form;
  EdmbModel<float> model = load_model(a.ckpt);
  const auto dist = predict_distribution(model, image_tensor<float>(read_image(a.image)));
  const std::string id = a.id.empty() ? fs::path(a.image).stem().string() : a.id;
  fs::create_directories(a.out_dir);
  for (const auto& p : granularity_sweep(dist, g, a.out_dir, id)) out << p << "\n";
  return 0;
}

Image load_prediction(const fs::path& p) {
  Image img = read_image(p.string());
  if (img.channels != 1) throw Error("prediction " + p.string() + " must be single-channel");
  return img;
}

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  EvalOptions opts;
  opts.thresholds = a.thresholds;
  opts.max_dist = a.max_dist;
  opts.method = a.match == "exact" ? MatchMethod::exact : a.match == "greedy" ? MatchMethod::greedy : MatchMethod::automatic;
  const auto ids = read_list_file(a.list);
  std::vector<std::vector<Image>> samples, gts;
  for (const auto& id : ids) {
    std::vector<fs::path> files;
    if (a.multigranularity) {
      const std::string prefix = id + "_g";
      for (const auto& e : fs::directory_iterator(a.pred)) {
        const std::string name = e.path().filename().string();
        const std::string ext = e.path().extension().string();
        if (e.is_regular_file() && name.rfind(prefix, 0) == 0 && (ext == ".pgm" || ext == ".png")) files.push_back(e.path());
      }
      std::sort(files.begin(), files.end());
    } else {
      for (const char* ext : {".pgm", ".png"}) {
        const fs::path p = fs::path(a.pred) / (id + ext);
        if (fs::is_regular_file(p)) {
          files.push_back(p);
          break;
        }
      }
    }
    if (files.empty()) throw Error("no prediction for " + id + " under " + a.pred);
    std::vector<Image> maps;
    for (const auto& f : files) maps.push_back(a.no_nms ? load_prediction(f) : nms_thin(load_prediction(f)));
    gts.push_back(load_label_set(a.gt, id));
    for (const auto& m : maps) {
      if (m.height != gts.back()[0].height || m.width != gts.back()[0].width) {
        throw Error("prediction for " + id + " does not match its ground-truth size");
      }
    }
    samples.push_back(std::move(maps));
  }
  out << format_report(eval_multigranularity(samples, gts, opts, ids));
  return 0;
}

std::array<int, 3> parse_shape(const std::string& s) {
  std::array<int, 3> d{};
  char x1 = 0, x2 = 0;
  std::istringstream is(s);
  if (!(is >> d[0] >> x1 >> d[1] >> x2 >> d[2]) || x1 != 'x' || x2 != 'x' || !is.eof() || d[0] <= 0 || d[1] <= 0 ||
      d[2] <= 0) {
    throw CLI::ValidationError("--shape", "expected CxHxW, e.g. 3x320x320, got '" + s + "'");
  }
  return d;
}

int cmd_bench(const BenchArgs& a, std::ostream& out) {
  const auto shape = parse_shape(a.shape);
  ModelConfig mc = a.config.empty() ? ModelConfig{} : load_config(a.config).model;
  mc.init_seed = a.seed;
  EdmbModel<float> model(mc);
  const FlopsParams fp = count_flops_params(model, shape[0], shape[1], shape[2]);
  char buf[160];
  out << "params=" << fp.params << "\n";
  out << "flops=" << fp.flops << "\n";
  std::snprintf(buf, sizeof buf, "gflops=%.4f\n", static_cast<double>(fp.flops) / 1e9);
  out << buf;
  out << "conv_macs=" << fp.conv_macs << "\nlinear_macs=" << fp.linear_macs << "\nscan_macs=" << fp.scan_macs << "\n";
  for (const char* part : {"global_encoder.", "fine_encoder.", "highres_encoder.", "decoder."}) {
    std::string key(part);
    key.pop_back();
    out << "params." << key << "=" << count_params(model, part) << "\n";
  }
  if (a.repeat > 0) {
    Rng rng(a.seed);
    const Tensor<float> img = rng.uniform_tensor<float>({1, shape[0], shape[1], shape[2]}, 0.0, 1.0);
    NoGradGuard guard;
    const auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < a.repeat; ++i) model.forward_eval(img, false);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / a.repeat;
    std::snprintf(buf, sizeof buf, "seconds_per_forward=%.4f\n", secs);
    out << buf;
  }
  return 0;
}

int cmd_check(const CheckArgs& a, std::ostream& out) {
  std::vector<CheckOutcome> all;
  auto print = [&out](const CheckOutcome& o) {
    out << (o.pass ? "PASS " : "FAIL ") << o.name << "  " << o.detail << "\n" << std::flush;
  };
  if (a.suite == "oracle" || a.suite == "all") {
    for (auto& o : run_oracle_suite(a.seed, print)) all.push_back(o);
  }
  if (a.suite == "grad" || a.suite == "all") {
    for (auto& o : run_grad_suite(a.seed, print)) all.push_back(o);
  }
  const auto failed = std::count_if(all.begin(), all.end(), [](const CheckOutcome& o) { return !o.pass; });
  out << (failed == 0 ? "all " + std::to_string(all.size()) + " checks passed\n"
                      : std::to_string(failed) + " of " + std::to_string(all.size()) + " checks failed\n");
  return failed == 0 ? 0 : 1;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Edge detection with Mamba encoders and learnable Gaussian edge distributions", "edmb"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Print help for every subcommand");

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train one stage and write checkpoints");
  train->add_option("--stage", ta.stage, "Stage to train, overriding the config")->check(CLI::IsMember({"global", "fine"}));
  train->add_option("--config", ta.config, "key=value training config")->required()->check(CLI::ExistingFile);
  train->add_option("--data", ta.data, "Dataset root with images/ and labels/")->required()->check(CLI::ExistingDirectory);
  train->add_option("--list", ta.list, "File listing sample ids, one per line")->required()->check(CLI::ExistingFile);
  train->add_option("--out", ta.out, "Output directory for checkpoints")->required();
  train->add_option("--resume", ta.resume, "Resume from a checkpoint of the same stage")->check(CLI::ExistingFile);
  train->add_option("--init-from", ta.init_from, "Stage-1 checkpoint to start stage 2 from")->check(CLI::ExistingFile);
  train->add_option("--seed", ta.seed, "Seed for initialisation, sampling and shuffling (overrides the config)");
  train->add_option("--steps", ta.steps, "Number of steps (overrides max_steps)")->check(CLI::PositiveNumber);
  train->add_flag("--quiet", ta.quiet, "Do not print per-step losses");

  InferArgs ia;
  auto* infer = app.add_subcommand("infer", "Write the edge map of one image at one granularity");
  infer->add_option("--ckpt", ia.ckpt, "Trained checkpoint")->required()->check(CLI::ExistingFile);
  infer->add_option("--image", ia.image, "Input image (PPM/PGM/PNG)")->required()->check(CLI::ExistingFile);
  infer->add_option("--out", ia.out, "Output map (.pgm or .png)")->required();
  infer->add_option("--gamma", ia.gamma, "Granularity; 0 gives sigmoid(mu)")->capture_default_str();
  infer->add_flag("--sigma-form", ia.sigma_form, "Shift by gamma*sigma instead of gamma*sigma^2");
  infer->add_flag("--nms", ia.nms, "Thin the map with non-maximum suppression");

  SweepArgs sa;
  auto* sweep = app.add_subcommand("sweep", "Write edge maps over a range of granularities");
  sweep->add_option("--ckpt", sa.ckpt, "Trained checkpoint")->required()->check(CLI::ExistingFile);
  sweep->add_option("--image", sa.image, "Input image (PPM/PGM/PNG)")->required()->check(CLI::ExistingFile);
  sweep->add_option("--out-dir", sa.out_dir, "Directory for <id>_g<gamma>.pgm files")->required();
  sweep->add_option("--gammas", sa.gammas, "start:step:count")->capture_default_str();
  sweep->add_option("--id", sa.id, "File name stem (default: image stem)");
  sweep->add_flag("--sigma-form", sa.sigma_form, "Shift by gamma*sigma instead of gamma*sigma^2");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "ODS/OIS evaluation of predicted edge maps");
  eval->add_option("--pred", ea.pred, "Directory of <id>.pgm predictions (or <id>_g*.pgm samples)")->required()->check(CLI::ExistingDirectory);
  eval->add_option("--gt", ea.gt, "Directory of <id>.pgm or <id>/*.pgm ground truth")->required()->check(CLI::ExistingDirectory);
  eval->add_option("--list", ea.list, "File listing ids")->required()->check(CLI::ExistingFile);
  eval->add_option("--max-dist", ea.max_dist, "Matching radius as a fraction of the image diagonal")
      ->capture_default_str()->check(CLI::Range(0.0, 1.0));
  eval->add_option("--thresholds", ea.thresholds, "Number of evenly spaced thresholds")->capture_default_str()->check(CLI::Range(1, 1000));
  eval->add_flag("--multigranularity", ea.multigranularity, "Evaluate every <id>_g*.pgm sample, best per image");
  eval->add_flag("--no-nms", ea.no_nms, "Skip thinning (inputs already thin)");
  eval->add_option("--match", ea.match, "Matcher: auto, exact or greedy")->capture_default_str()->check(CLI::IsMember({"auto", "exact", "greedy"}));

  BenchArgs ba;
  auto* bench = app.add_subcommand("bench", "Parameter and FLOP count for one forward pass");
  bench->add_option("--config", ba.config, "Config whose model.* keys define the architecture")->check(CLI::ExistingFile);
  bench->add_option("--shape", ba.shape, "Input shape CxHxW")->capture_default_str();
  bench->add_option("--seed", ba.seed, "Initialisation seed")->capture_default_str();
  bench->add_option("--repeat", ba.repeat, "Also time this many forward passes")->capture_default_str()->check(CLI::NonNegativeNumber);

  CheckArgs ca;
  auto* check = app.add_subcommand("check", "Run the built-in verification suites");
  check->add_option("--suite", ca.suite, "grad, oracle or all")->capture_default_str()->check(CLI::IsMember({"grad", "oracle", "all"}));
  check->add_option("--seed", ca.seed, "Seed for the random instances")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return 2;
  }
  try {
    if (*train) return cmd_train(ta, out);
    if (*infer) return cmd_infer(ia, out);
    if (*sweep) return cmd_sweep(sa, out);
    if (*eval) return cmd_eval(ea, out);
    if (*bench) return cmd_bench(ba, out);
    if (*check) return cmd_check(ca, out);
  } catch (const CLI::ValidationError& e) {
    err << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace edmb::cli
