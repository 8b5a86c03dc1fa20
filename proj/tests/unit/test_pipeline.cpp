// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>

#include "edmb/train.hpp"
#include "scratch_dir.hpp"
#include "synthetic.hpp"

namespace edmb {
namespace {

namespace fs = std::filesystem;

Image plane(int h, int w, std::initializer_list<float> v) {
  Image img(1, h, w);
  std::copy(v.begin(), v.end(), img.data.begin());
  return img;
}

TrainConfig tiny_config() {
  TrainConfig cfg;
  auto& e = cfg.model.encoder;
  e.embed_dim = 8;
  e.depths = {1, 1, 1};
  e.state_dim = 4;
  e.pos_grid = 8;
  auto& d = cfg.model.decoder;
  d.width = 8;
  d.head_width = 4;
  d.head_depth = 1;
  d.sft_hidden = 4;
  cfg.batch_size = 2;
  cfg.lr_fresh = 1e-3;
  cfg.max_steps = 3;
  return cfg;
}

std::vector<DatasetSample> tiny_corpus(int count = 4) {
  testing::ShapeCorpusOptions o;
  o.count = count;
  o.size = 32;
  return testing::make_shape_corpus(o);
}

// ---- configuration ---------------------------------------------------------

TEST(Config, ParsesKnownKeys) {
  const auto cfg = parse_config_text(
      "# comment\n"
      "stage = fine\n"
      "batch_size=5  # trailing\n"
      "loss.varphi = 0.25\n"
      "model.depths = 1,2,3\n"
      "model.norm = group\n"
      "precision = f64\n"
      "augment = biped\n"
      "pretrained_prefixes = global_encoder.,fine_encoder.\n"
      "\n");
  EXPECT_EQ(cfg.stage, Stage::fine);
  EXPECT_EQ(cfg.batch_size, 5);
  EXPECT_DOUBLE_EQ(cfg.loss.varphi, 0.25);
  EXPECT_EQ(cfg.model.encoder.depths, (std::array<int, 3>{1, 2, 3}));
  EXPECT_EQ(cfg.model.decoder.norm, NormKind::group);
  EXPECT_EQ(cfg.precision, Precision::f64);
  EXPECT_EQ(cfg.augment, AugmentRecipe::biped);
  EXPECT_EQ(cfg.pretrained_prefixes.size(), 2u);
}

TEST(Config, ErrorsNameTheLine) {
  auto expect_line = [](const std::string& text, const std::string& needle) {
    try {
      parse_config_text(text, "t.cfg");
      FAIL() << text;
    } catch (const Error& e) {
      const std::string m = e.what();
      EXPECT_NE(m.find(needle), std::string::npos) << m;
    }
  };
  expect_line("stage = global\nlearning_rate = 1\n", "t.cfg:2");
  expect_line("batch_size = many\n", "t.cfg:1");
  expect_line("\n\nmodel.depths = 1,2\n", "t.cfg:3");
  expect_line("no equals sign\n", "t.cfg:1");
  expect_line("loss.eps = 0.5\n", "eps");
}

TEST(Config, EveryDocumentedKeyIsAccepted) {
  const auto& keys = config_keys();
  EXPECT_GE(keys.size(), 30u);
  for (const auto& [key, doc] : keys) EXPECT_FALSE(doc.empty()) << key;
  // default.cfg spells out every key
  std::ifstream is(std::string(EDMB_SOURCE_DIR) + "/configs/default.cfg");
  std::string text((std::istreambuf_iterator<char>(is)), {});
  for (const auto& [key, doc] : keys) EXPECT_NE(text.find("\n" + key + " ="), std::string::npos) << key;
  const TrainConfig parsed = parse_config_text(text), defaults;
  EXPECT_EQ(config_fingerprint(parsed.model), config_fingerprint(defaults.model));
  EXPECT_EQ(parsed.max_steps, defaults.max_steps);
  EXPECT_EQ(parsed.loss.alpha2, defaults.loss.alpha2);
  EXPECT_TRUE(parsed.pretrained_prefixes.empty());
  for (const char* name : {"default.cfg", "overfit.cfg", "tiny_f64.cfg"}) {
    EXPECT_NO_THROW(load_config(std::string(EDMB_SOURCE_DIR) + "/configs/" + name)) << name;
  }
}

// ---- dataset ---------------------------------------------------------------

TEST(Dataset, SingleAndMultiLabelLayouts) {
  const auto root = testing::scratch_dir("dataset_layouts");
  auto corpus = tiny_corpus(2);
  testing::write_corpus(corpus, root.string());
  // second sample becomes a 5-annotator directory
  const std::string id = corpus[1].id;
  fs::remove(root / "labels" / (id + ".pgm"));
  fs::create_directories(root / "labels" / id);
  for (int k = 0; k < 5; ++k) write_netpbm((root / "labels" / id / (std::to_string(k) + ".pgm")).string(), corpus[1].labels[0]);

  const auto data = load_dataset(root.string(), (root / "list.txt").string());
  ASSERT_EQ(data.size(), 2u);
  EXPECT_EQ(data[0].id, corpus[0].id);
  EXPECT_EQ(data[0].labels.size(), 1u);
  EXPECT_EQ(data[1].labels.size(), 5u);
  EXPECT_EQ(data[0].image.channels, 3);
  for (float v : data[0].labels[0].data) EXPECT_TRUE(v == 0.0f || v == 1.0f);
  EXPECT_EQ(data[0].labels[0].data, corpus[0].labels[0].data);
}

TEST(Dataset, FailuresNameTheFile) {
  const auto root = testing::scratch_dir("dataset_bad");
  auto corpus = tiny_corpus(1);
  testing::write_corpus(corpus, root.string());
  const std::string id = corpus[0].id;
  {
    std::ofstream os(root / "images" / (id + ".ppm"), std::ios::binary);
    os << "P6\n32 garbage\n";
  }
  try {
    load_dataset(root.string(), (root / "list.txt").string());
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find(id + ".ppm"), std::string::npos) << e.what();
  }
  {
    std::ofstream os(root / "list.txt");
    os << "nope\n";
  }
  try {
    load_dataset(root.string(), (root / "list.txt").string());
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("nope"), std::string::npos) << e.what();
  }
}

TEST(Dataset, LabelSizeMismatchFails) {
  const auto root = testing::scratch_dir("dataset_mismatch");
  auto corpus = tiny_corpus(1);
  testing::write_corpus(corpus, root.string());
  write_netpbm((root / "labels" / (corpus[0].id + ".pgm")).string(), Image(1, 16, 32));
  EXPECT_THROW(load_dataset(root.string(), (root / "list.txt").string()), Error);
}

// ---- augmentation ----------------------------------------------------------

TEST(Augment, IdentityAndFlipInvolution) {
  auto s = tiny_corpus(1)[0];
  const auto same = apply_augmentation(s, AugmentDraw{});
  EXPECT_EQ(same.image.data, s.image.data);
  EXPECT_EQ(same.labels[0].data, s.labels[0].data);
  EXPECT_EQ(flip_horizontal(flip_horizontal(s.image)).data, s.image.data);
  EXPECT_EQ(flip_vertical(flip_vertical(s.image)).data, s.image.data);
  AugmentDraw both;
  both.hflip = true;
  both.vflip = true;
  EXPECT_EQ(apply_augmentation(apply_augmentation(s, both), both).image.data, s.image.data);
}

TEST(Augment, QuarterTurnPermutation) {
  // 4x4 marker 0..15 row-major; a counter-clockwise quarter turn puts the
  // right-hand column on top, read downwards.
  Image img(1, 4, 4);
  for (int i = 0; i < 16; ++i) img.data[static_cast<std::size_t>(i)] = static_cast<float>(i) / 15.0f;
  const int expect[16] = {3, 7, 11, 15, 2, 6, 10, 14, 1, 5, 9, 13, 0, 4, 8, 12};
  const Image r = rotate(img, 90.0, kIgnore);
  for (int i = 0; i < 16; ++i) EXPECT_EQ(r.data[static_cast<std::size_t>(i)], static_cast<float>(expect[i]) / 15.0f) << i;

  Image label(1, 4, 4);
  label.at(0, 0, 1) = 1;  // asymmetric: one pixel on the top row
  DatasetSample s{Image(3, 4, 4), {label}, "m"};
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < 16; ++i) s.image.data[static_cast<std::size_t>(c * 16 + i)] = img.data[static_cast<std::size_t>(i)];
  AugmentDraw d;
  d.angle_deg = 90;
  const auto out = apply_augmentation(s, d);
  // input (0, 1) lands at output (W-1-1, 0) = (2, 0)
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) EXPECT_EQ(out.labels[0].at(0, y, x), (y == 2 && x == 0) ? 1.0f : 0.0f);
  EXPECT_EQ(out.image.at(1, 2, 0), img.at(0, 0, 1));
}

TEST(Augment, RotationFillsWithIgnore) {
  Image label(1, 20, 20);
  const Image r = rotate(label, 45.0, kIgnore);
  EXPECT_EQ(r.at(0, 0, 0), kIgnore);
  EXPECT_EQ(r.at(0, 10, 10), 0.0f);
}

TEST(Augment, LabelsFollowTheRecordedTransform) {
  auto corpus = tiny_corpus(3);
  Rng rng(5);
  for (AugmentRecipe recipe : {AugmentRecipe::bsds, AugmentRecipe::nyud, AugmentRecipe::biped})
    for (int k = 0; k < 10; ++k) {
      const auto& s = corpus[static_cast<std::size_t>(k % 3)];
      const AugmentDraw d = draw_augmentation(recipe, rng);
      const auto out = apply_augmentation(s, d);
      ASSERT_EQ(out.labels.size(), s.labels.size());
      EXPECT_EQ(out.labels[0].data, apply_label_transform(s.labels[0], d).data);
      EXPECT_EQ(out.labels[0].height, out.image.height);
      EXPECT_EQ(out.labels[0].width, out.image.width);
      for (float v : out.labels[0].data) ASSERT_TRUE(v == 0.0f || v == 1.0f || v == kIgnore);
    }
}

// ---- label selection -------------------------------------------------------

TEST(SelectLabel, Degenerate) {
  const Image a = plane(1, 4, {1, 0, 1, 0});
  Rng rng(1);
  for (LabelMode m : {LabelMode::random, LabelMode::mixed}) {
    auto s = select_label({a}, m, rng);
    EXPECT_EQ(s.y.data, a.data);
    for (float v : s.mask.data) EXPECT_EQ(v, 1.0f);
  }
  auto two = select_label({a, a}, LabelMode::mixed, rng);
  EXPECT_EQ(two.y.data, a.data);
  for (float v : two.mask.data) EXPECT_EQ(v, 1.0f);
  EXPECT_THROW(select_label({}, LabelMode::mixed, rng), Error);
}

TEST(SelectLabel, ConsensusRule) {
  // pixel 0: 1 of 4 -> ignore; pixel 1: 2 of 4 -> positive; pixel 2: none -> negative
  const Image a = plane(1, 3, {1, 1, 0}), b = plane(1, 3, {0, 1, 0}), z = plane(1, 3, {0, 0, 0});
  Rng rng(2);
  auto s = select_label({a, b, z, z}, LabelMode::mixed, rng);
  EXPECT_EQ(s.mask.data, (std::vector<float>{0, 1, 1}));
  EXPECT_EQ(s.y.data[1], 1.0f);
  EXPECT_EQ(s.y.data[2], 0.0f);
}

TEST(SelectLabel, MixedPartitionsTheGrid) {
  Rng rng(3);
  std::vector<Image> maps;
  for (int k = 0; k < 5; ++k) {
    Image m(1, 8, 8);
    for (auto& v : m.data) v = rng.uniform() < 0.3 ? 1.0f : 0.0f;
    maps.push_back(m);
  }
  auto s = select_label(maps, LabelMode::mixed, rng);
  for (std::size_t i = 0; i < s.y.data.size(); ++i) {
    const bool pos = s.mask.data[i] == 1 && s.y.data[i] == 1;
    const bool neg = s.mask.data[i] == 1 && s.y.data[i] == 0;
    const bool ign = s.mask.data[i] == 0;
    EXPECT_EQ(pos + neg + ign, 1);
  }
}

TEST(SelectLabel, RandomPicksOneAnnotator) {
  const Image a = plane(1, 2, {1, 0}), b = plane(1, 2, {0, 1});
  Rng rng(4);
  int seen_a = 0, seen_b = 0;
  for (int k = 0; k < 200; ++k) {
    auto s = select_label({a, b}, LabelMode::random, rng);
    if (s.y.data == a.data) ++seen_a;
    else if (s.y.data == b.data) ++seen_b;
  }
  EXPECT_EQ(seen_a + seen_b, 200);
  EXPECT_GT(seen_a, 60);
  EXPECT_GT(seen_b, 60);
}

// ---- batching, optimiser, checkpoints --------------------------------------

TEST(Batch, PadsToSizeUnitAndMasksPadding) {
  testing::ShapeCorpusOptions o;
  o.count = 2;
  o.size = 40;
  auto data = testing::make_shape_corpus(o);
  TrainConfig cfg = tiny_config();
  Rng rng(1);
  auto b = make_batch<float>(data, {0, 1}, cfg, 32, rng);
  EXPECT_EQ(b.images.shape(), (Shape{2, 3, 64, 64}));
  EXPECT_EQ(b.mask.shape(), (Shape{2, 1, 64, 64}));
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x) {
      const float m = b.mask[static_cast<std::size_t>(y * 64 + x)];
      EXPECT_EQ(m, (y < 40 && x < 40) ? 1.0f : 0.0f);
    }
}

TEST(AdamOptimiser, FirstStepsMatchHandComputation) {
  Tensor<double> w({2}, std::vector<double>{1.0, -2.0});
  w.set_requires_grad(true);
  Adam<double> adam(0.9, 0.999, 1e-8, 0.1);
  const double lr = 0.01;
  double m[2] = {0, 0}, v[2] = {0, 0}, ref[2] = {1.0, -2.0};
  for (int t = 1; t <= 3; ++t) {
    w.zero_grad();
    Tensor<double> loss = sum(mul(w, w));  // grad 2w
    backward(loss);
    adam.step({{ParamEntry<double>{"w", w, true}, lr}});
    for (int i = 0; i < 2; ++i) {
      const double g = 2 * ref[i] + 0.1 * ref[i];
      m[i] = 0.9 * m[i] + 0.1 * g;
      v[i] = 0.999 * v[i] + 0.001 * g * g;
      const double mh = m[i] / (1 - std::pow(0.9, t)), vh = v[i] / (1 - std::pow(0.999, t));
      ref[i] -= lr * mh / (std::sqrt(vh) + 1e-8);
      EXPECT_NEAR(w[static_cast<std::size_t>(i)], ref[i], 1e-14) << "step " << t;
    }
  }
  EXPECT_EQ(adam.steps(), 3);
}

TEST(CheckpointFile, RoundTripIsBitExact) {
  const auto dir = testing::scratch_dir("ckpt_roundtrip");
  TrainConfig cfg = tiny_config();
  EdmbModel<float> m(cfg.model);
  Checkpoint ck = make_checkpoint(m, 17);
  const auto path = (dir / "a.ckpt").string();
  save_checkpoint(ck, path);
  Checkpoint back = load_checkpoint(path);
  ASSERT_EQ(back.entries.size(), ck.entries.size());
  for (std::size_t i = 0; i < ck.entries.size(); ++i) {
    EXPECT_EQ(back.entries[i].first, ck.entries[i].first);
    EXPECT_EQ(back.entries[i].second.shape, ck.entries[i].second.shape);
    EXPECT_EQ(std::memcmp(back.entries[i].second.data.data(), ck.entries[i].second.data.data(),
                          ck.entries[i].second.data.size() * sizeof(float)),
              0);
  }
  EXPECT_EQ(back.step(), 17);
  EXPECT_EQ(back.fingerprint(), config_fingerprint(cfg.model));
  const ModelConfig mc = model_config_from(back);
  EXPECT_EQ(config_fingerprint(mc), config_fingerprint(cfg.model));

  EdmbModel<float> other(ModelConfig{cfg.model.encoder, cfg.model.decoder, 99});
  apply_checkpoint(other, back, true);
  const auto pa = m.parameters(), pb = other.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i].tensor.vec(), pb[i].tensor.vec()) << pa[i].name;
}

TEST(CheckpointFile, TruncatedOrForeignFilesFail) {
  const auto dir = testing::scratch_dir("ckpt_bad");
  TrainConfig cfg = tiny_config();
  EdmbModel<float> m(cfg.model);
  const auto path = (dir / "a.ckpt").string();
  save_checkpoint(make_checkpoint(m, 1), path);
  std::string bytes;
  {
    std::ifstream is(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(is), {});
  }
  auto write = [&](const std::string& name, const std::string& b) {
    std::ofstream os(dir / name, std::ios::binary);
    os << b;
    return (dir / name).string();
  };
  for (std::size_t cut : {std::size_t{4}, std::size_t{14}, bytes.size() / 2, bytes.size() - 1})
    EXPECT_THROW(load_checkpoint(write("cut.ckpt", bytes.substr(0, cut))), Error) << cut;
  std::string bad = bytes;
  bad[3] = 'X';
  EXPECT_THROW(load_checkpoint(write("magic.ckpt", bad)), Error);
  std::string ver = bytes;
  ver[8] = 99;
  EXPECT_THROW(load_checkpoint(write("ver.ckpt", ver)), Error);

  TrainConfig wider = cfg;
  wider.model.decoder.width = 12;
  EdmbModel<float> other(wider.model);
  EXPECT_THROW(apply_checkpoint(other, load_checkpoint(path), true), Error);
}

// ---- training --------------------------------------------------------------

TEST(Training, FineStageNeedsInitialisation) {
  TrainConfig cfg = tiny_config();
  cfg.stage = Stage::fine;
  EdmbModel<float> m(cfg.model);
  EXPECT_THROW(train_stage(m, tiny_corpus(2), cfg), Error);
}

TEST(Training, NonFiniteLossAborts) {
  TrainConfig cfg = tiny_config();
  auto data = tiny_corpus(2);
  for (auto& s : data) s.image.data[5] = std::nanf("");
  EdmbModel<float> m(cfg.model);
  try {
    train_stage(m, data, cfg);
    FAIL();
  } catch (const Error& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("non-finite"), std::string::npos) << msg;
    EXPECT_NE(msg.find("step 1"), std::string::npos) << msg;
  }
}

TEST(Training, NonFiniteParametersAbortWithStep) {
  TrainConfig cfg = tiny_config();
  EdmbModel<float> m(cfg.model);
  bool poisoned = false;
  for (auto& p : m.parameters())
    if (p.name.rfind("decoder.edge_head.", 0) == 0 && p.name.find("bias") != std::string::npos) {
      p.tensor.vec()[0] = std::numeric_limits<float>::quiet_NaN();
      poisoned = true;
      break;
    }
  ASSERT_TRUE(poisoned);
  try {
    train_stage(m, tiny_corpus(2), cfg);
    FAIL();
  } catch (const Error& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("non-finite"), std::string::npos) << msg;
    EXPECT_NE(msg.find("step 1"), std::string::npos) << msg;
  }
}

TEST(Training, SeededRunsAreBitIdentical) {
  TrainConfig cfg = tiny_config();
  cfg.max_steps = 4;
  cfg.augment = AugmentRecipe::bsds;
  auto data = tiny_corpus(3);
  auto run = [&] {
    EdmbModel<double> m(cfg.model);
    std::vector<double> losses;
    TrainHooks h;
    h.on_step = [&](const StepLog& s) { losses.push_back(s.loss); };
    Checkpoint ck = train_stage(m, data, cfg, h);
    return std::make_pair(losses, ck);
  };
  auto [l1, c1] = run();
  auto [l2, c2] = run();
  EXPECT_EQ(l1, l2);
  ASSERT_EQ(c1.entries.size(), c2.entries.size());
  for (std::size_t i = 0; i < c1.entries.size(); ++i) EXPECT_EQ(c1.entries[i].second.data, c2.entries[i].second.data);
}

TEST(Training, StageTwoFreezesAndReproducesStageOne) {
  const auto dir = testing::scratch_dir("two_stage");
  TrainConfig cfg = tiny_config();
  auto data = tiny_corpus(3);
  EdmbModel<float> s1(cfg.model);
  TrainHooks h1;
  h1.out_dir = (dir / "s1").string();
  train_stage(s1, data, cfg, h1);

  Tensor<float> img = Tensor<float>({1, 3, 32, 32});
  std::copy(data[0].image.data.begin(), data[0].image.data.end(), img.vec().begin());
  const auto ref = s1.forward_eval(img, true).aux_p;

  TrainConfig c2 = cfg;
  c2.stage = Stage::fine;
  c2.max_steps = 100;
  c2.model.init_seed = 5;  // fresh weights until the checkpoint is applied
  EdmbModel<float> s2(c2.model);
  TrainHooks h2;
  h2.init_from = h1.out_dir + "/last.ckpt";
  c2.max_steps = 0;
  train_stage(s2, data, c2, h2);  // zero steps: initialisation only
  EXPECT_EQ(s2.forward_eval(img, true).aux_p.vec(), ref.vec());

  std::vector<std::vector<float>> frozen, fresh;
  const auto before = s2.parameters();
  for (const auto& p : before) (is_stage1_param(p.name) ? frozen : fresh).push_back(p.tensor.vec());
  c2.max_steps = 100;
  train_stage(s2, data, c2, h2);
  std::size_t fi = 0, ri = 0;
  int changed = 0;
  for (const auto& p : s2.parameters()) {
    if (is_stage1_param(p.name)) EXPECT_EQ(p.tensor.vec(), frozen[fi++]) << p.name;
    else changed += p.tensor.vec() != fresh[ri++];
  }
  EXPECT_GT(changed, 0);
  EXPECT_EQ(s2.forward_eval(img, true).aux_p.vec(), ref.vec());
}

TEST(Training, ResumeContinuesTheStepCounter) {
  const auto dir = testing::scratch_dir("resume");
  TrainConfig cfg = tiny_config();
  cfg.max_steps = 2;
  auto data = tiny_corpus(2);
  EdmbModel<float> m(cfg.model);
  TrainHooks h;
  h.out_dir = dir.string();
  train_stage(m, data, cfg, h);
  cfg.max_steps = 4;
  EdmbModel<float> m2(cfg.model);
  TrainHooks h2;
  h2.resume = (dir / "last.ckpt").string();
  std::vector<int> steps;
  h2.on_step = [&](const StepLog& s) { steps.push_back(s.step); };
  Checkpoint ck = train_stage(m2, data, cfg, h2);
  EXPECT_EQ(steps, (std::vector<int>{3, 4}));
  EXPECT_EQ(ck.step(), 4);
}

}  // namespace
}  // namespace edmb
