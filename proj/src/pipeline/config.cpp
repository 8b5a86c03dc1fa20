// SPDX-License-Identifier: Apache-2.0

#include <fstream>
#include <sstream>

#include "edmb/train.hpp"

namespace edmb {

const std::vector<std::pair<std::string, std::string>>& config_keys() {
  static const std::vector<std::pair<std::string, std::string>> keys{
      {"stage", "global|fine; may be overridden on the command line"},
      {"batch_size", "images per step (0: 4 for global, 3 for fine)"},
      {"lr_fresh", "Adam rate for freshly initialised parameters"},
      {"lr_pretrained", "Adam rate for parameters matching pretrained_prefixes"},
      {"pretrained_prefixes", "comma-separated parameter name prefixes (default none)"},
      {"weight_decay", "L2 coefficient added to gradients"},
      {"max_steps", "optimisation steps"},
      {"seed", "training RNG seed (batches, augmentation, labels, windows, sampling)"},
      {"label_mode", "random|mixed"},
      {"mixed_threshold", "consensus fraction marking a pixel positive in mixed mode"},
      {"augment", "none|bsds|nyud|biped"},
      {"log_every", "steps between loss log lines"},
      {"checkpoint_every", "steps between checkpoints (0: final only)"},
      {"precision", "f32|f64"},
      {"loss.lambda", "negative-class balance"},
      {"loss.varphi", "KL weight"},
      {"loss.alpha2", "auxiliary ELBO weight in stage 2"},
      {"loss.alpha1", "joint-objective weight (unused by the two-stage schedule)"},
      {"loss.eps", "probability/variance clamp"},
      {"loss.literal_weights", "true: weight positives by |Y+|/|Y| and negatives by lambda|Y-|/|Y|"},
      {"loss.reduction", "sum|mean over counted pixels"},
      {"model.embed_dim", "stage-1 token width (doubles per stage)"},
      {"model.depths", "blocks per stage, e.g. 2,2,2"},
      {"model.state_dim", "SSM state size"},
      {"model.patch_size", "patch edge length"},
      {"model.pos_grid", "reference grid of the position table"},
      {"model.keep_count", "fine-encoder windows tracking gradients per step (1-4)"},
      {"model.decoder_width", "fused feature channels"},
      {"model.head_width", "head hidden channels"},
      {"model.head_depth", "Conv-Norm-ReLU modules per head"},
      {"model.sft_hidden", "SFT branch hidden channels"},
      {"model.norm", "batch|group"},
      {"model.init_seed", "parameter initialisation seed"},
  };
  return keys;
}

Stage parse_stage(const std::string& s) {
  if (s == "global") return Stage::global;
  if (s == "fine") return Stage::fine;
  throw Error("unknown stage '" + s + "' (expected global|fine)");
}

Precision parse_precision(const std::string& s) {
  if (s == "f32") return Precision::f32;
  if (s == "f64") return Precision::f64;
  throw Error("unknown precision '" + s + "' (expected f32|f64)");
}

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

double to_double(const std::string& v) {
  std::size_t pos = 0;
  const double d = std::stod(v, &pos);
  if (pos != v.size()) throw std::invalid_argument(v);
  return d;
}

long long to_int(const std::string& v) {
  std::size_t pos = 0;
  const long long i = std::stoll(v, &pos);
  if (pos != v.size()) throw std::invalid_argument(v);
  return i;
}

bool to_bool(const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw std::invalid_argument(v);
}

std::vector<std::string> split(const std::string& v, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, sep)) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

void assign(TrainConfig& c, const std::string& key, const std::string& v) {
  auto& m = c.model;
  if (key == "stage") c.stage = parse_stage(v);
  else if (key == "batch_size") c.batch_size = static_cast<int>(to_int(v));
  else if (key == "lr_fresh") c.lr_fresh = to_double(v);
  else if (key == "lr_pretrained") c.lr_pretrained = to_double(v);
  else if (key == "pretrained_prefixes") c.pretrained_prefixes = split(v, ',');
  else if (key == "weight_decay") c.weight_decay = to_double(v);
  else if (key == "max_steps") c.max_steps = static_cast<int>(to_int(v));
  else if (key == "seed") c.seed = static_cast<std::uint64_t>(to_int(v));
  else if (key == "label_mode") c.label_mode = parse_label_mode(v);
  else if (key == "mixed_threshold") c.mixed_threshold = to_double(v);
  else if (key == "augment") c.augment = parse_augment_recipe(v);
  else if (key == "log_every") c.log_every = static_cast<int>(to_int(v));
  else if (key == "checkpoint_every") c.checkpoint_every = static_cast<int>(to_int(v));
  else if (key == "precision") c.precision = parse_precision(v);
  else if (key == "loss.lambda") c.loss.lambda = to_double(v);
  else if (key == "loss.varphi") c.loss.varphi = to_double(v);
  else if (key == "loss.alpha2") c.loss.alpha2 = to_double(v);
  else if (key == "loss.alpha1") c.loss.alpha1 = to_double(v);
  else if (key == "loss.eps") c.loss.eps = to_double(v);
  else if (key == "loss.literal_weights") c.loss.literal_weights = to_bool(v);
  else if (key == "loss.reduction") {
    if (v == "sum") c.loss.reduction = Reduction::sum;
    else if (v == "mean") c.loss.reduction = Reduction::mean;
    else throw std::invalid_argument(v);
  }
  else if (key == "model.embed_dim") m.encoder.embed_dim = static_cast<int>(to_int(v));
  else if (key == "model.depths") {
    const auto parts = split(v, ',');
    if (parts.size() != 3) throw std::invalid_argument(v);
    for (int i = 0; i < 3; ++i) m.encoder.depths[static_cast<std::size_t>(i)] = static_cast<int>(to_int(parts[static_cast<std::size_t>(i)]));
  }
  else if (key == "model.state_dim") m.encoder.state_dim = static_cast<int>(to_int(v));
  else if (key == "model.patch_size") m.encoder.patch_size = static_cast<int>(to_int(v));
  else if (key == "model.pos_grid") m.encoder.pos_grid = static_cast<int>(to_int(v));
  else if (key == "model.keep_count") m.encoder.keep_count = static_cast<int>(to_int(v));
  else if (key == "model.decoder_width") m.decoder.width = static_cast<int>(to_int(v));
  else if (key == "model.head_width") m.decoder.head_width = static_cast<int>(to_int(v));
  else if (key == "model.head_depth") m.decoder.head_depth = static_cast<int>(to_int(v));
  else if (key == "model.sft_hidden") m.decoder.sft_hidden = static_cast<int>(to_int(v));
  else if (key == "model.norm") {
    if (v == "batch") m.decoder.norm = NormKind::batch;
    else if (v == "group") m.decoder.norm = NormKind::group;
    else throw std::invalid_argument(v);
  }
  else if (key == "model.init_seed") m.init_seed = static_cast<std::uint64_t>(to_int(v));
  else throw Error("unknown key");
}

void validate(const TrainConfig& c) {
  if (!(c.lr_fresh > 0) || !(c.lr_pretrained > 0)) throw Error("learning rates must be positive");
  if (c.weight_decay < 0) throw Error("weight_decay must be non-negative");
  if (c.batch_size < 0 || c.max_steps < 0 || c.log_every < 1 || c.checkpoint_every < 0) {
    throw Error("batch_size, max_steps, log_every and checkpoint_every must be non-negative (log_every >= 1)");
  }
  const auto& e = c.model.encoder;
  if (e.embed_dim < 1 || e.state_dim < 1 || e.patch_size < 1 || e.pos_grid < 1) throw Error("model sizes must be positive");
  for (int d : e.depths) if (d < 0) throw Error("model.depths must be non-negative");
  if (e.keep_count < 1 || e.keep_count > 4) throw Error("model.keep_count must lie in [1, 4]");
  const auto& d = c.model.decoder;
  if (d.width < 1 || d.head_width < 1 || d.head_depth < 0 || d.sft_hidden < 1) throw Error("decoder sizes must be positive");
  if (!(c.mixed_threshold > 0 && c.mixed_threshold <= 1)) throw Error("mixed_threshold must lie in (0, 1]");
  c.loss.validate();
}

}  // namespace

TrainConfig parse_config_text(const std::string& text, const std::string& origin) {
  TrainConfig c;
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = origin + ":" + std::to_string(lineno);
    if (eq == std::string::npos) throw Error(where + ": expected key=value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    bool known = false;
    for (const auto& k : config_keys()) known = known || k.first == key;
    if (!known) throw Error(where + ": unknown key '" + key + "'");
    try {
      assign(c, key, value);
    } catch (const Error& e) {
      throw Error(where + ": " + e.what());
    } catch (const std::exception&) {
      throw Error(where + ": invalid value '" + value + "' for " + key);
    }
  }
  try {
    validate(c);
  } catch (const Error& e) {
    throw Error(origin + ": " + e.what());
  }
  return c;
}

TrainConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open config " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config_text(ss.str(), path);
}

}  // namespace edmb
