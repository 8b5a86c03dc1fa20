// SPDX-License-Identifier: Apache-2.0

#include <chrono>
#include <cstdio>

#include "edmb/gradcheck.hpp"
#include "edmb/loss.hpp"
#include "edmb/model.hpp"
#include "edmb/train.hpp"
#include "edmb/verify.hpp"

namespace edmb {

namespace {

using D = Tensor<double>;

constexpr double kGradTolerance = 1e-4;

struct GradCase {
  std::string name;
  std::vector<std::pair<std::string, D>> params;
  std::function<std::vector<D>()> forward;
  bool scalar = false;  // forward already returns a scalar objective
  int max_coords = 0;
  // Refills the evaluation point in place; used when a draw sits on exact
  // ties and too few coordinates can be differenced.
  std::function<void(Rng&)> redraw = {};
};

constexpr int kMaxRedraws = 4;

void add_params(GradCase& c, const ParamList<double>& list) {
  for (const auto& e : list)
    if (e.trainable) c.params.emplace_back(e.name, e.tensor);
}

GradCheckResult check_once(GradCase& c, std::uint64_t seed) {
  std::vector<D> proj;
  if (!c.scalar) {
    Rng rng(seed ^ 0x5eed);
    NoGradGuard guard;
    for (const auto& o : c.forward()) proj.push_back(rng.normal_tensor<double>(o.shape()));
  }
  auto objective = [&]() {
    std::vector<D> outs = c.forward();
    if (c.scalar) return outs.at(0);
    D total = sum(mul(outs[0], proj[0]));
    for (std::size_t i = 1; i < outs.size(); ++i) total = add(total, sum(mul(outs[i], proj[i])));
    return total;
  };
  std::vector<D> tensors;
  std::vector<std::string> names;
  for (auto& [n, t] : c.params) {
    tensors.push_back(t);
    names.push_back(n);
  }
  GradCheckOptions opts;
  opts.eps = 1e-4;
  opts.max_coords = c.max_coords;
  opts.seed = seed;
  return finite_diff_check(objective, tensors, opts, names);
}

// Kink skips are tolerated only as a small minority of coordinates.
bool enough_coverage(const GradCheckResult& r) { return r.skipped * 20 <= r.checked + r.skipped; }

CheckOutcome run_case(GradCase& c, std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  CheckOutcome out;
  out.name = "grad/" + c.name;
  try {
    GradCheckResult r = check_once(c, seed);
    double worst = r.max_rel_error;
    int draws = 1;
    Rng redraw_rng(seed + 101);
    while (c.redraw && !enough_coverage(r) && draws < kMaxRedraws) {
      c.redraw(redraw_rng);
      r = check_once(c, seed + static_cast<std::uint64_t>(draws));
      worst = std::max(worst, r.max_rel_error);
      ++draws;
    }
    out.pass = worst < kGradTolerance && enough_coverage(r);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    char buf[320];
    std::snprintf(buf, sizeof buf,
                  "max rel err %.3e at %s (analytic %.6e, numeric %.6e) over %d coords, %d kink skips, %d draw(s) (%.1fs)",
                  worst, r.worst.c_str(), r.worst_analytic, r.worst_numeric, r.checked, r.skipped, draws, secs);
    out.detail = buf;
  } catch (const std::exception& e) {
    out.pass = false;
    out.detail = e.what();
  }
  return out;
}

ModelConfig tiny_model() {
  ModelConfig m;
  m.encoder.embed_dim = 8;
  m.encoder.depths = {1, 1, 1};
  m.encoder.state_dim = 4;
  m.encoder.pos_grid = 6;
  m.decoder.width = 8;
  m.decoder.head_width = 4;
  m.decoder.head_depth = 1;
  m.decoder.sft_hidden = 4;
  return m;
}

D positive(Rng& rng, Shape s, double lo = 0.5, double hi = 2.0) { return rng.uniform_tensor<double>(std::move(s), lo, hi); }

std::vector<GradCase> op_cases(Rng& rng) {
  std::vector<GradCase> cases;
  {
    D x = rng.normal_tensor<double>({2, 4, 7, 7}), w = rng.normal_tensor<double>({6, 2, 3, 3}, 0.3),
      b = rng.normal_tensor<double>({6});
    cases.push_back({"conv2d", {{"x", x}, {"w", w}, {"b", b}}, [=] { return std::vector<D>{conv2d(x, w, b, 2, 1, 2)}; }});
  }
  {
    D x = rng.normal_tensor<double>({2, 3, 5}), w = rng.normal_tensor<double>({4, 5}), b = rng.normal_tensor<double>({4});
    cases.push_back({"linear", {{"x", x}, {"w", w}, {"b", b}}, [=] { return std::vector<D>{linear(x, w, b)}; }});
  }
  {
    D x = rng.normal_tensor<double>({2, 3, 6}), g = positive(rng, {6}), b = rng.normal_tensor<double>({6});
    cases.push_back({"layer_norm", {{"x", x}, {"gamma", g}, {"beta", b}}, [=] { return std::vector<D>{layer_norm(x, g, b)}; }});
  }
  for (bool training : {true, false}) {
    D x = rng.normal_tensor<double>({3, 2, 3, 3}), g = positive(rng, {2}), b = rng.normal_tensor<double>({2});
    D rm = rng.normal_tensor<double>({2}, 0.1), rv = positive(rng, {2});
    cases.push_back({training ? "batch_norm2d/train" : "batch_norm2d/eval",
                     {{"x", x}, {"gamma", g}, {"beta", b}},
                     [=]() mutable { return std::vector<D>{batch_norm2d(x, g, b, rm, rv, training)}; }});
  }
  {
    D x = rng.normal_tensor<double>({2, 4, 3, 3}), g = positive(rng, {4}), b = rng.normal_tensor<double>({4});
    cases.push_back({"group_norm", {{"x", x}, {"gamma", g}, {"beta", b}}, [=] { return std::vector<D>{group_norm(x, 2, g, b)}; }});
  }
  {
    D x = rng.normal_tensor<double>({1, 2, 3, 3});
    cases.push_back({"bilinear_resize", {{"x", x}}, [=] {
                       return std::vector<D>{bilinear_upsample(x, 2), resize_bilinear(x, 5, 7), resize_bilinear(x, 2, 2)};
                     }});
  }
  {
    D x = rng.normal_tensor<double>({1, 2, 4, 4});
    cases.push_back({"max_pool2x2", {{"x", x}}, [=] { return std::vector<D>{max_pool2x2(x)}; }});
  }
  {
    D a = rng.normal_tensor<double>({1, 2, 3, 3}), b = rng.normal_tensor<double>({1, 1, 3, 3});
    cases.push_back({"concat_crop_quadrants", {{"a", a}, {"b", b}}, [=] {
                       D c = concat_channels<double>({a, b});
                       D q = crop2d(c, 1, 0, 2, 2);
                       return std::vector<D>{assemble_quadrants(q, crop2d(c, 0, 1, 2, 2), crop2d(c, 1, 1, 2, 2), q)};
                     }});
  }
  {
    D x = rng.normal_tensor<double>({1, 2, 8, 8});
    cases.push_back({"token_layout", {{"x", x}}, [=] {
                       D t = patchify(x, 2);                      // [1,16,8]
                       D m = reverse_tokens(merge_patches(t, 4, 4));  // [1,4,32]
                       return std::vector<D>{tokens_to_spatial(m, 2, 2), spatial_to_tokens(x)};
                     }});
  }
  for (bool reverse : {false, true}) {
    D x = rng.normal_tensor<double>({2, 6, 3}), draw = rng.normal_tensor<double>({2, 6, 3}, 0.5);
    D alog = rng.uniform_tensor<double>({3, 4}, -0.5, 1.0);
    D b = rng.normal_tensor<double>({2, 6, 4}), c = rng.normal_tensor<double>({2, 6, 4});
    cases.push_back({reverse ? "selective_scan/reverse" : "selective_scan/forward",
                     {{"x", x}, {"delta_raw", draw}, {"a_log", alog}, {"b", b}, {"c", c}},
                     [=] { return std::vector<D>{selective_scan(x, softplus(draw), neg(exp(alog)), b, c, reverse)}; }});
  }
  {
    D x = rng.normal_tensor<double>({2, 3, 4}), p = positive(rng, {2, 3, 4}), y = rng.normal_tensor<double>({3, 4});
    cases.push_back({"pointwise", {{"x", x}, {"p", p}, {"y", y}}, [=] {
                       return std::vector<D>{sigmoid(x), softplus(mul_const(x, 8.0)), exp(x), log(p, 1e-6), sqrt(p),
                                             clamp(x, -1.0, 1.0), mul(x, p), sub(x, p), add_broadcast_leading(x, y),
                                             mean(mul(x, x)), add_const(relu(x), 0.5)};
                     }});
  }
  return cases;
}

std::vector<GradCase> layer_cases(Rng& rng) {
  std::vector<GradCase> cases;
  {
    auto br = std::make_shared<SsmBranch<double>>(4, 3, rng);
    D u = rng.normal_tensor<double>({2, 5, 4});
    GradCase c{"ssm_branch", {{"u", u}}, [=] { return std::vector<D>{(*br)(u, false), (*br)(u, true)}; }};
    ParamList<double> pl;
    br->collect("branch", pl);
    add_params(c, pl);
    cases.push_back(std::move(c));
  }
  {
    auto blk = std::make_shared<VimBlock<double>>(4, 3, rng);
    D t = rng.normal_tensor<double>({1, 4, 4});
    GradCase c{"vim_block", {{"tokens", t}}, [=] { return std::vector<D>{(*blk)(TokenSequence<double>{t, 2, 2}).tokens}; }};
    ParamList<double> pl;
    blk->collect("block", pl);
    add_params(c, pl);
    cases.push_back(std::move(c));
  }
  {
    PatchEmbedConfig<double> pc;
    pc.patch_size = 4;
    pc.embed_dim = 4;
    pc.pos_grid = 3;
    auto pe = std::make_shared<PatchEmbed<double>>(pc, rng);
    D img = rng.normal_tensor<double>({1, 3, 8, 8});
    GradCase c{"patch_embed", {{"image", img}}, [=] { return std::vector<D>{(*pe)(img).tokens}; }};
    ParamList<double> pl;
    pe->collect("embed", pl);
    add_params(c, pl);
    cases.push_back(std::move(c));
  }
  {
    auto pm = std::make_shared<PatchMerge<double>>(4, rng);
    D t = rng.normal_tensor<double>({1, 16, 4});
    GradCase c{"patch_merge", {{"tokens", t}}, [=] { return std::vector<D>{(*pm)(TokenSequence<double>{t, 4, 4}).tokens}; }};
    ParamList<double> pl;
    pm->collect("merge", pl);
    add_params(c, pl);
    cases.push_back(std::move(c));
  }
  {
    const ModelConfig mc = tiny_model();
    auto enc = std::make_shared<MambaEncoder<double>>(mc.encoder, rng);
    D img = rng.normal_tensor<double>({1, 3, 32, 32});
    GradCase c{"mamba_encoder", {{"image", img}}, [=] {
                 std::vector<D> outs;
                 for (const auto& lv : encode_global(*enc, img)) outs.push_back(lv.map);
                 return outs;
               }};
    c.max_coords = 12;
    ParamList<double> pl;
    enc->collect("encoder", pl);
    add_params(c, pl);
    cases.push_back(std::move(c));
  }
  {
    auto enc = std::make_shared<HighResEncoder<double>>(rng);
    D img = rng.normal_tensor<double>({1, 3, 8, 8});
    GradCase c{"highres_encoder", {{"image", img}}, [=] {
                 std::vector<D> outs;
                 for (const auto& lv : encode_highres(*enc, img)) outs.push_back(lv.map);
                 return outs;
               }};
    c.max_coords = 24;
    ParamList<double> pl;
    enc->collect("highres", pl);
    add_params(c, pl);
    cases.push_back(std::move(c));
  }
  for (NormKind nk : {NormKind::batch, NormKind::group}) {
    auto mb = std::make_shared<MBConv<double>>(4, 4, nk, rng);
    D x = rng.normal_tensor<double>({2, 4, 4, 4});
    GradCase c{nk == NormKind::batch ? "mbconv/batch" : "mbconv/group", {{"x", x}},
               [=] { return std::vector<D>{mb->forward(x, true)}; }};
    ParamList<double> pl;
    mb->collect("mbconv", pl);
    add_params(c, pl);
    cases.push_back(std::move(c));
  }
  {
    auto cff = std::make_shared<CascadedFusion<double>>(std::vector<int>{4, 3, 2}, std::vector<int>{4, 2, 1}, 4,
                                                         NormKind::batch, rng);
    D l0 = rng.normal_tensor<double>({2, 4, 2, 2}), l1 = rng.normal_tensor<double>({2, 3, 4, 4}),
      l2 = rng.normal_tensor<double>({2, 2, 8, 8});
    GradCase c{"cascaded_fusion", {{"l0", l0}, {"l1", l1}, {"l2", l2}}, [=] {
                 Pyramid<double> p{{l0, 4}, {l1, 2}, {l2, 1}};
                 return std::vector<D>{cff_fuse(*cff, p, true)};
               }};
    c.max_coords = 24;
    ParamList<double> pl;
    cff->collect("cff", pl);
    add_params(c, pl);
    cases.push_back(std::move(c));
  }
  {
    auto sft = std::make_shared<SpatialFeatureTransform<double>>(3, 2, 4, rng);
    D x = rng.normal_tensor<double>({1, 3, 3, 3}), g = rng.normal_tensor<double>({1, 2, 3, 3});
    GradCase c{"sft", {{"content", x}, {"guide", g}}, [=] { return std::vector<D>{sft_modulate(*sft, x, g)}; }};
    ParamList<double> pl;
    sft->collect("sft", pl);
    add_params(c, pl);
    cases.push_back(std::move(c));
  }
  {
    DecoderConfig dc;
    dc.head_width = 4;
    auto head = std::make_shared<Head<double>>(3, dc, rng);
    D x = rng.normal_tensor<double>({2, 3, 4, 4});
    GradCase c{"head", {{"x", x}}, [=] { return std::vector<D>{head->forward(x, true)}; }};
    c.max_coords = 24;
    ParamList<double> pl;
    head->collect("head", pl);
    add_params(c, pl);
    cases.push_back(std::move(c));
  }
  return cases;
}

std::vector<GradCase> loss_cases(Rng& rng, std::uint64_t seed) {
  std::vector<GradCase> cases;
  LossConfig lc;
  D y({2, 1, 4, 4});
  D mask({2, 1, 4, 4});
  for (std::size_t i = 0; i < y.numel(); ++i) {
    y[i] = rng.uniform() < 0.25 ? 1.0 : 0.0;
    mask[i] = rng.uniform() < 0.9 ? 1.0 : 0.0;
  }
  {
    D mu = rng.normal_tensor<double>({2, 1, 4, 4}), var = positive(rng, {2, 1, 4, 4}, 0.2, 3.0);
    cases.push_back({"kl_loss", {{"mu", mu}, {"var", var}}, [=] { return std::vector<D>{kl_loss(mu, var, lc, mask)}; }, true});
  }
  {
    D p = rng.uniform_tensor<double>({2, 1, 4, 4}, 0.05, 0.95);
    cases.push_back({"wce_loss", {{"p", p}}, [=] { return std::vector<D>{wce_loss(p, y, mask, lc)}; }, true});
  }
  {
    D mu = rng.normal_tensor<double>({2, 1, 4, 4}), var = positive(rng, {2, 1, 4, 4}, 0.2, 3.0);
    cases.push_back({"elbo_loss", {{"mu", mu}, {"var", var}}, [=] {
                       Rng r(seed);
                       return std::vector<D>{elbo_loss(sigmoid(sample_logits(mu, var, r)), y, mask, mu, var, lc)};
                     }, true});
  }
  // Whole-model objectives at the smallest admissible input. Batch norm over
  // a handful of values occasionally sees a fully dead channel, i.e. an
  // exact ReLU tie; the case then redraws its input (see run_case).
  for (Stage stage : {Stage::global, Stage::fine}) {
    ModelConfig mc = tiny_model();
    mc.init_seed = seed + 11;
    // Track every window: with fewer, the untracked windows are cut from the
    // gradient on purpose and no longer match the finite difference.
    mc.encoder.keep_count = 4;
    auto model = std::make_shared<EdmbModel<double>>(mc);
    D img = rng.uniform_tensor<double>({2, 3, 32, 32}, 0.0, 1.0);
    D yy({2, 1, 32, 32}), mm({2, 1, 32, 32}, 1.0);
    auto fill = [img, yy](Rng& r) mutable {
      for (std::size_t i = 0; i < img.numel(); ++i) img[i] = r.uniform();
      for (std::size_t i = 0; i < yy.numel(); ++i) yy[i] = r.uniform() < 0.15 ? 1.0 : 0.0;
    };
    fill(rng);
    GradCase c{stage == Stage::global ? "stage1_loss" : "stage2_loss", {}, [=] {
                 Rng r(seed + 3);
                 EdgeDistribution<double> out = model->forward_train(img, stage, r);
                 return std::vector<D>{stage_losses(out, yy, mm, lc, stage, r)};
               }, true};
    c.max_coords = 4;
    c.redraw = fill;
    for (const auto& e : model->parameters())
      if (e.trainable && trained_in_stage(e.name, stage)) c.params.emplace_back(e.name, e.tensor);
    cases.push_back(std::move(c));
  }
  return cases;
}

}  // namespace

std::vector<CheckOutcome> run_grad_suite(std::uint64_t seed, const CheckCallback& on_result) {
  Rng rng(seed);
  std::vector<GradCase> cases = op_cases(rng);
  for (auto& c : layer_cases(rng)) cases.push_back(std::move(c));
  for (auto& c : loss_cases(rng, seed)) cases.push_back(std::move(c));
  std::vector<CheckOutcome> results;
  for (auto& c : cases) {
    results.push_back(run_case(c, seed));
    if (on_result) on_result(results.back());
  }
  return results;
}

bool all_passed(const std::vector<CheckOutcome>& outcomes) {
  for (const auto& o : outcomes)
    if (!o.pass) return false;
  return !outcomes.empty();
}

}  // namespace edmb
