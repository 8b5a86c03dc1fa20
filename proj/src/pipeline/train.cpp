// SPDX-License-Identifier: Apache-2.0

#include "edmb/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;

namespace edmb {

namespace {

constexpr char kCkptMagic[8] = {'E', 'D', 'M', 'B', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCkptVersion = 1;


// 64-bit values travel as four exactly representable 16-bit chunks.
RawTensor u64_raw(std::uint64_t v) {
  RawTensor t{Shape{4}, std::vector<float>(4)};
  for (int i = 0; i < 4; ++i) t.data[static_cast<std::size_t>(i)] = static_cast<float>((v >> (16 * i)) & 0xffff);
  return t;
}

std::uint64_t raw_u64(const RawTensor& t) {
  if (t.data.size() != 4) throw Error("checkpoint: malformed 64-bit metadata entry");
  std::uint64_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint64_t>(t.data[static_cast<std::size_t>(i)]) << (16 * i);
  return v;
}

template <typename T>
RawTensor to_raw(const Shape& shape, const std::vector<T>& data) {
  return {shape, std::vector<float>(data.begin(), data.end())};
}

RawTensor model_config_raw(const ModelConfig& c) {
  const auto& e = c.encoder;
  const auto& d = c.decoder;
  const std::vector<int> v{e.embed_dim, e.depths[0], e.depths[1], e.depths[2], e.state_dim, e.patch_size,
                           e.pos_grid, e.keep_count, d.width, d.head_width, d.head_depth, d.sft_hidden,
                           static_cast<int>(d.norm)};
  return {Shape{static_cast<int>(v.size())}, std::vector<float>(v.begin(), v.end())};
}

}  // namespace

ModelConfig model_config_from(const Checkpoint& ckpt) {
  const RawTensor* r = ckpt.find("meta/model");
  if (!r || r->data.size() != 13) throw Error("checkpoint: missing or malformed architecture record");
  std::vector<int> v;
  for (float f : r->data) v.push_back(static_cast<int>(f));
  ModelConfig c;
  c.encoder.embed_dim = v[0];
  c.encoder.depths = {v[1], v[2], v[3]};
  c.encoder.state_dim = v[4];
  c.encoder.patch_size = v[5];
  c.encoder.pos_grid = v[6];
  c.encoder.keep_count = v[7];
  c.decoder.width = v[8];
  c.decoder.head_width = v[9];
  c.decoder.head_depth = v[10];
  c.decoder.sft_hidden = v[11];
  if (v[12] != 0 && v[12] != 1) throw Error("checkpoint: unknown normalisation kind");
  c.decoder.norm = static_cast<NormKind>(v[12]);
  if (config_fingerprint(c) != ckpt.fingerprint()) throw Error("checkpoint: architecture record does not match fingerprint");
  return c;
}

const RawTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : entries)
    if (n == name) return &t;
  return nullptr;
}

void Checkpoint::put(const std::string& name, RawTensor t) {
  for (auto& [n, existing] : entries) {
    if (n == name) {
      existing = std::move(t);
      return;
    }
  }
  entries.emplace_back(name, std::move(t));
}

std::int64_t Checkpoint::step() const {
  const RawTensor* s = find("meta/step");
  return s ? static_cast<std::int64_t>(raw_u64(*s)) : 0;
}

std::uint64_t Checkpoint::fingerprint() const {
  const RawTensor* f = find("meta/fingerprint");
  if (!f) throw Error("checkpoint: missing fingerprint");
  return raw_u64(*f);
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("cannot open " + tmp + " for writing");
    os.write(kCkptMagic, 8);
    const std::uint32_t version = kCkptVersion;
    const auto count = static_cast<std::uint32_t>(ckpt.entries.size());
    os.write(reinterpret_cast<const char*>(&version), 4);
    os.write(reinterpret_cast<const char*>(&count), 4);
    for (const auto& [name, t] : ckpt.entries) {
      if (name.size() > 0xffff) throw Error("checkpoint: entry name too long");
      const auto len = static_cast<std::uint16_t>(name.size());
      os.write(reinterpret_cast<const char*>(&len), 2);
      os.write(name.data(), len);
      write_tensor_blob(os, t.shape, t.data);
    }
    os.flush();
    if (!os) throw Error("write failed: " + tmp);
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw Error("cannot move " + tmp + " to " + path + ": " + ec.message());
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open checkpoint " + path);
  char magic[8];
  if (!is.read(magic, 8)) throw Error(path + ": truncated checkpoint header");
  if (!std::equal(magic, magic + 8, kCkptMagic)) throw Error(path + ": not a checkpoint (bad magic)");
  std::uint32_t version = 0, count = 0;
  if (!is.read(reinterpret_cast<char*>(&version), 4) || !is.read(reinterpret_cast<char*>(&count), 4)) {
    throw Error(path + ": truncated checkpoint header");
  }
  if (version != kCkptVersion) {
    throw Error(path + ": unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ckpt;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::uint16_t len = 0;
    if (!is.read(reinterpret_cast<char*>(&len), 2)) throw Error(path + ": truncated checkpoint entry");
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw Error(path + ": truncated checkpoint entry");
    ckpt.entries.emplace_back(name, read_tensor_blob(is, path + " (" + name + ")"));
  }
  return ckpt;
}

template <typename T>
void Adam<T>::step(const std::vector<std::pair<ParamEntry<T>, double>>& entries) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (const auto& [entry, lr] : entries) {
    Tensor<T> p = entry.tensor;
    if (!p.has_grad()) continue;
    auto& [m, v] = moments_[entry.name];
    if (m.empty()) {
      m.assign(p.numel(), T(0));
      v.assign(p.numel(), T(0));
    }
    const auto g = p.grad();
    auto data = p.data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double gi = static_cast<double>(g[i]) + wd_ * static_cast<double>(data[i]);
      const double mi = beta1_ * m[i] + (1.0 - beta1_) * gi;
      const double vi = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      data[i] = static_cast<T>(data[i] - lr * (mi / c1) / (std::sqrt(vi / c2) + eps_));
    }
  }
}

template <typename T>
void Adam<T>::export_state(Checkpoint& ckpt) const {
  ckpt.put("meta/adam_step", u64_raw(static_cast<std::uint64_t>(t_)));
  for (const auto& [name, mv] : moments_) {
    const Shape s{static_cast<int>(mv.first.size())};
    ckpt.put("adam.m/" + name, to_raw(s, mv.first));
    ckpt.put("adam.v/" + name, to_raw(s, mv.second));
  }
}

template <typename T>
void Adam<T>::import_state(const Checkpoint& ckpt) {
  moments_.clear();
  const RawTensor* st = ckpt.find("meta/adam_step");
  t_ = st ? static_cast<std::int64_t>(raw_u64(*st)) : 0;
  for (const auto& [name, t] : ckpt.entries) {
    if (name.rfind("adam.m/", 0) != 0) continue;
    const std::string pname = name.substr(7);
    const RawTensor* v = ckpt.find("adam.v/" + pname);
    if (!v || v->data.size() != t.data.size()) throw Error("checkpoint: incomplete optimiser state for " + pname);
    moments_[pname] = {std::vector<T>(t.data.begin(), t.data.end()), std::vector<T>(v->data.begin(), v->data.end())};
  }
}

template <typename T>
Checkpoint make_checkpoint(const EdmbModel<T>& model, std::int64_t step) {
  Checkpoint ckpt;
  ckpt.put("meta/step", u64_raw(static_cast<std::uint64_t>(step)));
  ckpt.put("meta/fingerprint", u64_raw(config_fingerprint(model.cfg)));
  ckpt.put("meta/model", model_config_raw(model.cfg));
  for (const auto& e : model.parameters()) ckpt.put(e.name, to_raw(e.tensor.shape(), e.tensor.vec()));
  return ckpt;
}

template <typename T>
void apply_checkpoint(EdmbModel<T>& model, const Checkpoint& ckpt, bool require_all, bool only_stage1) {
  if (ckpt.fingerprint() != config_fingerprint(model.cfg)) {
    throw Error("checkpoint architecture fingerprint does not match the model configuration");
  }
  for (auto& e : model.parameters()) {
    if (only_stage1 && !is_stage1_param(e.name)) continue;
    const RawTensor* t = ckpt.find(e.name);
    if (!t) {
      if (require_all) throw Error("checkpoint is missing tensor " + e.name);
      continue;
    }
    if (t->shape != e.tensor.shape()) {
      throw Error("checkpoint tensor " + e.name + " has shape " + shape_str(t->shape) + ", model expects " +
                  shape_str(e.tensor.shape()));
    }
    Tensor<T> dst = e.tensor;
    std::copy(t->data.begin(), t->data.end(), dst.vec().begin());
  }
}

bool trained_in_stage(const std::string& name, Stage stage) {
  return stage == Stage::global ? is_stage1_param(name) : !is_stage1_param(name);
}

template <typename T>
Batch<T> make_batch(const std::vector<DatasetSample>& samples, const std::vector<int>& picks,
                    const TrainConfig& cfg, int size_unit, Rng& rng) {
  std::vector<DatasetSample> aug;
  std::vector<SelectedLabel> labels;
  int H = 0, W = 0;
  for (int idx : picks) {
    aug.push_back(augment(samples[static_cast<std::size_t>(idx)], cfg.augment, rng));
    labels.push_back(select_label(aug.back().labels, cfg.label_mode, rng, cfg.mixed_threshold));
    H = std::max(H, aug.back().image.height);
    W = std::max(W, aug.back().image.width);
  }
  H = round_up(H, size_unit);
  W = round_up(W, size_unit);
  const int B = static_cast<int>(picks.size());
  Batch<T> b{Tensor<T>({B, 3, H, W}), Tensor<T>({B, 1, H, W}), Tensor<T>({B, 1, H, W})};
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  for (int i = 0; i < B; ++i) {
    const Image img = reflect_pad(aug[static_cast<std::size_t>(i)].image, H, W);
    const Image y = constant_pad(labels[static_cast<std::size_t>(i)].y, H, W, 0.0f);
    const Image m = constant_pad(labels[static_cast<std::size_t>(i)].mask, H, W, 0.0f);
    std::copy(img.data.begin(), img.data.end(), b.images.vec().begin() + static_cast<std::ptrdiff_t>(i * 3 * plane));
    std::copy(y.data.begin(), y.data.end(), b.y.vec().begin() + static_cast<std::ptrdiff_t>(i * plane));
    std::copy(m.data.begin(), m.data.end(), b.mask.vec().begin() + static_cast<std::ptrdiff_t>(i * plane));
  }
  return b;
}

template <typename T>
Checkpoint train_stage(EdmbModel<T>& model, const std::vector<DatasetSample>& data, const TrainConfig& cfg,
                       const TrainHooks& hooks) {
  if (data.empty()) throw Error("train: empty dataset");
  cfg.loss.validate();
  Adam<T> adam(0.9, 0.999, 1e-8, cfg.weight_decay);
  std::int64_t start = 0;
  if (!hooks.resume.empty()) {
    const Checkpoint ck = load_checkpoint(hooks.resume);
    apply_checkpoint(model, ck, true);
    adam.import_state(ck);
    start = ck.step();
  } else if (cfg.stage == Stage::fine) {
    if (hooks.init_from.empty()) throw Error("train: stage fine requires a stage-1 checkpoint (--init-from)");
    apply_checkpoint(model, load_checkpoint(hooks.init_from), true, true);
  }
  std::vector<std::pair<ParamEntry<T>, double>> trainable;
  ParamList<T> all = model.parameters();
  for (const auto& e : all) {
    if (!e.trainable || !trained_in_stage(e.name, cfg.stage)) continue;
    double lr = cfg.lr_fresh;
    for (const auto& p : cfg.pretrained_prefixes)
      if (e.name.rfind(p, 0) == 0) lr = cfg.lr_pretrained;
    trainable.emplace_back(e, lr);
  }
  Rng rng(cfg.seed);
  const int n = static_cast<int>(data.size());
  std::vector<int> order(static_cast<std::size_t>(n));
  std::size_t cursor = order.size();
  auto next_index = [&]() {
    if (cursor == order.size()) {
      for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
      for (int i = n - 1; i > 0; --i) std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(rng.index(i + 1))]);
      cursor = 0;
    }
    return order[cursor++];
  };
  if (!hooks.out_dir.empty()) fs::create_directories(hooks.out_dir);
  const int batch = cfg.effective_batch();
  for (std::int64_t step = start; step < cfg.max_steps; ++step) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<int> picks;
    for (int i = 0; i < batch; ++i) picks.push_back(next_index());
    Batch<T> b = make_batch<T>(data, picks, cfg, model.cfg.size_unit(), rng);
    for (T v : b.images.data())
      if (!std::isfinite(static_cast<double>(v))) throw Error("train: non-finite input pixel at step " + std::to_string(step + 1));
    for (auto& e : all) Tensor<T>(e.tensor).zero_grad();
    Tensor<T> loss;
    try {
      EdgeDistribution<T> out = model.forward_train(b.images, cfg.stage, rng);
      loss = stage_losses(out, b.y, b.mask, cfg.loss, cfg.stage, rng);
    } catch (const Error& e) {
      throw Error("train: step " + std::to_string(step + 1) + ": " + e.what());
    }
    const double lv = static_cast<double>(loss.item());
    double gmax = 0;
    bool grad_ok = true;
    if (loss.requires_grad()) {
      backward(loss);
      for (const auto& [e, lr] : trainable) {
        if (!e.tensor.has_grad()) continue;
        for (T g : e.tensor.grad()) {
          if (!std::isfinite(static_cast<double>(g))) grad_ok = false;
          else gmax = std::max(gmax, std::abs(static_cast<double>(g)));
        }
      }
    }
    if (!std::isfinite(lv) || !grad_ok) {
      std::ostringstream msg;
      msg << "train: non-finite " << (std::isfinite(lv) ? "gradient" : "loss") << " at step " << step + 1
          << " (loss " << lv << ", max |grad| " << gmax << ")";
      throw Error(msg.str());
    }
    adam.step(trainable);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (hooks.on_step && ((step + 1) % cfg.log_every == 0 || step + 1 == cfg.max_steps)) {
      hooks.on_step({static_cast<int>(step + 1), lv, secs});
    }
    if (!hooks.out_dir.empty() && cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 &&
        step + 1 != cfg.max_steps) {
      Checkpoint ck = make_checkpoint(model, step + 1);
      adam.export_state(ck);
      save_checkpoint(ck, (fs::path(hooks.out_dir) / ("step_" + std::to_string(step + 1) + ".ckpt")).string());
    }
  }
  Checkpoint final_ckpt = make_checkpoint(model, std::max<std::int64_t>(start, cfg.max_steps));
  adam.export_state(final_ckpt);
  if (!hooks.out_dir.empty()) save_checkpoint(final_ckpt, (fs::path(hooks.out_dir) / "last.ckpt").string());
  return final_ckpt;
}

template class Adam<float>;
template class Adam<double>;
template Checkpoint make_checkpoint<float>(const EdmbModel<float>&, std::int64_t);
template Checkpoint make_checkpoint<double>(const EdmbModel<double>&, std::int64_t);
template void apply_checkpoint<float>(EdmbModel<float>&, const Checkpoint&, bool, bool);
template void apply_checkpoint<double>(EdmbModel<double>&, const Checkpoint&, bool, bool);
template Batch<float> make_batch<float>(const std::vector<DatasetSample>&, const std::vector<int>&, const TrainConfig&, int, Rng&);
template Batch<double> make_batch<double>(const std::vector<DatasetSample>&, const std::vector<int>&, const TrainConfig&, int, Rng&);
template Checkpoint train_stage<float>(EdmbModel<float>&, const std::vector<DatasetSample>&, const TrainConfig&, const TrainHooks&);
template Checkpoint train_stage<double>(EdmbModel<double>&, const std::vector<DatasetSample>&, const TrainConfig&, const TrainHooks&);

}  // namespace edmb
