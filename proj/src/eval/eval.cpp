// SPDX-License-Identifier: Apache-2.0

#include "edmb/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <queue>
#include <sstream>

#include "edmb/flops.hpp"

namespace edmb {

namespace {

float clamped(const Image& img, int y, int x) {
  y = std::clamp(y, 0, img.height - 1);
  x = std::clamp(x, 0, img.width - 1);
  return img.at(0, y, x);
}

float bilinear_clamped(const Image& img, double y, double x) {
  y = std::clamp(y, 0.0, img.height - 1.0);
  x = std::clamp(x, 0.0, img.width - 1.0);
  const int y0 = static_cast<int>(y), x0 = static_cast<int>(x);
  const int y1 = std::min(y0 + 1, img.height - 1), x1 = std::min(x0 + 1, img.width - 1);
  const double fy = y - y0, fx = x - x0;
  const double v = (1 - fy) * ((1 - fx) * img.at(0, y0, x0) + fx * img.at(0, y0, x1)) +
                   fy * ((1 - fx) * img.at(0, y1, x0) + fx * img.at(0, y1, x1));
  return static_cast<float>(v);
}

Image gaussian_smooth(const Image& in) {
  double w[5];
  double total = 0;
  for (int k = -2; k <= 2; ++k) total += w[k + 2] = std::exp(-0.5 * k * k);
  for (double& v : w) v /= total;
  Image tmp(1, in.height, in.width), out(1, in.height, in.width);
  for (int y = 0; y < in.height; ++y)
    for (int x = 0; x < in.width; ++x) {
      double s = 0;
      for (int k = -2; k <= 2; ++k) s += w[k + 2] * clamped(in, y, x + k);
      tmp.at(0, y, x) = static_cast<float>(s);
    }
  for (int y = 0; y < in.height; ++y)
    for (int x = 0; x < in.width; ++x) {
      double s = 0;
      for (int k = -2; k <= 2; ++k) s += w[k + 2] * clamped(tmp, y + k, x);
      out.at(0, y, x) = static_cast<float>(s);
    }
  return out;
}

}  // namespace

Image nms_thin(const Image& prob) {
  if (prob.channels != 1) throw Error("nms_thin: expected a single-channel map");
  const Image s = gaussian_smooth(prob);
  Image out = prob;
  for (int y = 0; y < prob.height; ++y)
    for (int x = 0; x < prob.width; ++x) {
      const float v = prob.at(0, y, x);
      if (v <= 0.0f) continue;
      const double c = clamped(s, y, x);
      const double sxx = clamped(s, y, x + 1) - 2 * c + clamped(s, y, x - 1);
      const double syy = clamped(s, y + 1, x) - 2 * c + clamped(s, y - 1, x);
      const double sxy = (clamped(s, y + 1, x + 1) - clamped(s, y - 1, x + 1) - clamped(s, y + 1, x - 1) +
                          clamped(s, y - 1, x - 1)) / 4.0;
      const double mid = (sxx + syy) / 2;
      const double rad = std::sqrt((sxx - syy) * (sxx - syy) / 4 + sxy * sxy);
      const double lam = mid < 0 ? mid - rad : mid + rad;  // larger magnitude
      double nx1 = sxy, ny1 = lam - sxx;
      double nx2 = lam - syy, ny2 = sxy;
      double n1 = std::hypot(nx1, ny1), n2 = std::hypot(nx2, ny2);
      double nx, ny;
      if (n1 >= n2) {
        nx = nx1; ny = ny1;
      } else {
        nx = nx2; ny = ny2;
        n1 = n2;
      }
      if (!(n1 > 1e-12)) continue;  // flat neighbourhood, no orientation
      nx /= n1;
      ny /= n1;
      const float a = bilinear_clamped(prob, y + ny, x + nx);
      const float b = bilinear_clamped(prob, y - ny, x - nx);
      if (v < a || v < b) out.at(0, y, x) = 0.0f;
    }
  return out;
}

namespace {

struct Pixel {
  int y, x;
};

std::vector<Pixel> edge_pixels(const Image& m) {
  std::vector<Pixel> px;
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x)
      if (m.at(0, y, x) > 0.0f) px.push_back({y, x});
  return px;
}

// Hopcroft-Karp on adjacency lists; returns the pair count and left->right map.
int hopcroft_karp(const std::vector<std::vector<int>>& adj, int n_right, std::vector<int>& match_left) {
  const int n_left = static_cast<int>(adj.size());
  const int inf = std::numeric_limits<int>::max();
  match_left.assign(static_cast<std::size_t>(n_left), -1);
  std::vector<int> match_right(static_cast<std::size_t>(n_right), -1), dist(static_cast<std::size_t>(n_left));
  int matched = 0;
  while (true) {
    std::queue<int> q;
    for (int u = 0; u < n_left; ++u) {
      if (match_left[static_cast<std::size_t>(u)] < 0) {
        dist[static_cast<std::size_t>(u)] = 0;
        q.push(u);
      } else {
        dist[static_cast<std::size_t>(u)] = inf;
      }
    }
    bool found = false;
    while (!q.empty()) {
      const int u = q.front();
      q.pop();
      for (int v : adj[static_cast<std::size_t>(u)]) {
        const int w = match_right[static_cast<std::size_t>(v)];
        if (w < 0) found = true;
        else if (dist[static_cast<std::size_t>(w)] == inf) {
          dist[static_cast<std::size_t>(w)] = dist[static_cast<std::size_t>(u)] + 1;
          q.push(w);
        }
      }
    }
    if (!found) break;
    // Iterative DFS along the layered graph.
    std::vector<std::size_t> it(static_cast<std::size_t>(n_left), 0);
    for (int root = 0; root < n_left; ++root) {
      if (match_left[static_cast<std::size_t>(root)] >= 0) continue;
      std::vector<int> stack{root};
      while (!stack.empty()) {
        const int u = stack.back();
        auto& k = it[static_cast<std::size_t>(u)];
        bool advanced = false;
        while (k < adj[static_cast<std::size_t>(u)].size()) {
          const int v = adj[static_cast<std::size_t>(u)][k];
          const int w = match_right[static_cast<std::size_t>(v)];
          if (w < 0) {
            // augment along the stack
            int vv = v;
            for (auto sit = stack.rbegin(); sit != stack.rend(); ++sit) {
              const int uu = *sit;
              const int prev = match_left[static_cast<std::size_t>(uu)];
              match_left[static_cast<std::size_t>(uu)] = vv;
              match_right[static_cast<std::size_t>(vv)] = uu;
              vv = prev;
            }
            ++matched;
            stack.clear();
            advanced = true;
            break;
          }
          if (dist[static_cast<std::size_t>(w)] == dist[static_cast<std::size_t>(u)] + 1) {
            ++k;
            stack.push_back(w);
            advanced = true;
            break;
          }
          ++k;
        }
        if (!advanced) {
          dist[static_cast<std::size_t>(u)] = inf;
          stack.pop_back();
        }
      }
    }
  }
  return matched;
}

}  // namespace

MatchResult match_edges(const Image& pred, const Image& gt, double max_dist_frac, MatchMethod method) {
  if (pred.height != gt.height || pred.width != gt.width || pred.channels != 1 || gt.channels != 1) {
    throw Error("match_edges: prediction and ground truth must be single-channel maps of the same size");
  }
  const double radius = max_dist_frac * std::hypot(pred.height, pred.width);
  const int r = static_cast<int>(std::floor(radius));
  std::vector<std::pair<int, int>> offsets;  // (dy, dx) ordered by distance
  for (int dy = -r; dy <= r; ++dy)
    for (int dx = -r; dx <= r; ++dx)
      if (dy * dy + dx * dx <= radius * radius) offsets.emplace_back(dy, dx);
  std::stable_sort(offsets.begin(), offsets.end(), [](const auto& a, const auto& b) {
    return a.first * a.first + a.second * a.second < b.first * b.first + b.second * b.second;
  });
  const auto P = edge_pixels(pred);
  const auto G = edge_pixels(gt);
  std::vector<int> gt_index(static_cast<std::size_t>(gt.height) * gt.width, -1);
  for (std::size_t j = 0; j < G.size(); ++j) gt_index[static_cast<std::size_t>(G[j].y) * gt.width + G[j].x] = static_cast<int>(j);
  MatchResult res;
  res.pred_pixels = static_cast<int>(P.size());
  res.gt_pixels = static_cast<int>(G.size());
  res.pred_hit.assign(pred.data.size(), 0);
  auto neighbours = [&](const Pixel& p, auto&& fn) {
    for (const auto& [dy, dx] : offsets) {
      const int y = p.y + dy, x = p.x + dx;
      if (y < 0 || x < 0 || y >= gt.height || x >= gt.width) continue;
      const int j = gt_index[static_cast<std::size_t>(y) * gt.width + x];
      if (j >= 0 && fn(j)) return;
    }
  };
  const bool greedy = method == MatchMethod::greedy ||
                      (method == MatchMethod::automatic && P.size() + G.size() > static_cast<std::size_t>(kExactMatchLimit));
  res.used_greedy = greedy;
  if (greedy) {
    std::vector<std::uint8_t> taken(G.size(), 0);
    for (const auto& p : P) {
      neighbours(p, [&](int j) {
        if (taken[static_cast<std::size_t>(j)]) return false;
        taken[static_cast<std::size_t>(j)] = 1;
        res.pred_hit[static_cast<std::size_t>(p.y) * pred.width + p.x] = 1;
        ++res.matched;
        return true;
      });
    }
    return res;
  }
  std::vector<std::vector<int>> adj(P.size());
  for (std::size_t i = 0; i < P.size(); ++i)
    neighbours(P[i], [&](int j) {
      adj[i].push_back(j);
      return false;
    });
  std::vector<int> match_left;
  res.matched = hopcroft_karp(adj, static_cast<int>(G.size()), match_left);
  for (std::size_t i = 0; i < P.size(); ++i)
    if (match_left[i] >= 0) res.pred_hit[static_cast<std::size_t>(P[i].y) * pred.width + P[i].x] = 1;
  return res;
}

std::vector<double> default_thresholds(int n) {
  if (n < 1) throw Error("threshold count must be positive");
  std::vector<double> t;
  for (int k = 1; k <= n; ++k) t.push_back(static_cast<double>(k) / (n + 1));
  return t;
}

Counts& Counts::operator+=(const Counts& o) {
  correct_pred += o.correct_pred;
  total_pred += o.total_pred;
  matched_gt += o.matched_gt;
  total_gt += o.total_gt;
  return *this;
}

double Counts::precision() const { return total_pred > 0 ? correct_pred / total_pred : 1.0; }
double Counts::recall() const { return total_gt > 0 ? matched_gt / total_gt : 1.0; }
double f_measure(double p, double r) { return p + r > 0 ? 2 * p * r / (p + r) : 0.0; }
double Counts::f() const { return f_measure(precision(), recall()); }

std::vector<Counts> image_counts(const Image& pred, const std::vector<Image>& gts, const std::vector<double>& thresholds,
                                 const EvalOptions& opts) {
  if (gts.empty()) throw Error("evaluation: image without ground truth");
  std::vector<Counts> out;
  Image bin(1, pred.height, pred.width);
  for (double t : thresholds) {
    for (std::size_t i = 0; i < bin.data.size(); ++i) bin.data[i] = pred.data[i] >= t ? 1.0f : 0.0f;
    Counts c;
    std::vector<std::uint8_t> hit(bin.data.size(), 0);
    for (const auto& g : gts) {
      const MatchResult m = match_edges(bin, g, opts.max_dist, opts.method);
      c.matched_gt += m.matched;
      c.total_gt += m.gt_pixels;
      c.total_pred = m.pred_pixels;
      for (std::size_t i = 0; i < hit.size(); ++i) hit[i] |= m.pred_hit[i];
    }
    for (auto h : hit) c.correct_pred += h;
    out.push_back(c);
  }
  return out;
}

namespace {

EvalReport summarise(const std::vector<double>& thresholds, const std::vector<std::vector<std::vector<Counts>>>& counts,
                     const std::vector<std::string>& ids) {
  // counts[image][sample][threshold]
  EvalReport rep;
  rep.thresholds = thresholds;
  const std::size_t n_img = counts.size();
  for (std::size_t t = 0; t < thresholds.size(); ++t) {
    Counts agg;
    for (std::size_t i = 0; i < n_img; ++i) {
      std::size_t best = 0;
      for (std::size_t m = 1; m < counts[i].size(); ++m)
        if (counts[i][m][t].f() > counts[i][best][t].f()) best = m;
      agg += counts[i][best][t];
    }
    rep.precision.push_back(agg.precision());
    rep.recall.push_back(agg.recall());
    rep.f.push_back(agg.f());
    if (t == 0 || agg.f() > rep.ods) {
      rep.ods = agg.f();
      rep.ods_threshold = thresholds[t];
      rep.ods_p = agg.precision();
      rep.ods_r = agg.recall();
    }
  }
  double ois_sum = 0;
  for (std::size_t i = 0; i < n_img; ++i) {
    ImageRecord rec;
    rec.id = i < ids.size() ? ids[i] : std::to_string(i);
    rec.best_f = -1;
    for (std::size_t m = 0; m < counts[i].size(); ++m)
      for (std::size_t t = 0; t < thresholds.size(); ++t)
        if (counts[i][m][t].f() > rec.best_f) {
          rec.best_f = counts[i][m][t].f();
          rec.best_threshold = thresholds[t];
          rec.best_sample = static_cast<int>(m);
        }
    ois_sum += rec.best_f;
    rep.images.push_back(rec);
  }
  rep.ois = n_img > 0 ? ois_sum / static_cast<double>(n_img) : 0.0;
  return rep;
}

}  // namespace

EvalReport f_curve(const std::vector<Image>& preds, const std::vector<std::vector<Image>>& gts, const EvalOptions& opts,
                   const std::vector<std::string>& ids) {
  std::vector<std::vector<Image>> samples;
  for (const auto& p : preds) samples.push_back({p});
  return eval_multigranularity(samples, gts, opts, ids);
}

EvalReport eval_multigranularity(const std::vector<std::vector<Image>>& samples,
                                 const std::vector<std::vector<Image>>& gts, const EvalOptions& opts,
                                 const std::vector<std::string>& ids) {
  if (samples.size() != gts.size()) throw Error("evaluation: prediction and ground-truth counts differ");
  if (samples.empty()) throw Error("evaluation: no images");
  const std::size_t M = samples[0].size();
  for (const auto& s : samples) {
    if (s.size() != M || M == 0) throw Error("evaluation: every image needs the same number of samples");
  }
  const auto thresholds = default_thresholds(opts.thresholds);
  std::vector<std::vector<std::vector<Counts>>> counts(samples.size());
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < samples.size(); ++i) {
    for (const auto& s : samples[i]) counts[i].push_back(image_counts(s, gts[i], thresholds, opts));
  }
  return summarise(thresholds, counts, ids);
}

template <typename T>
std::int64_t count_params(const EdmbModel<T>& model, const std::string& prefix) {
  std::int64_t n = 0;
  for (const auto& e : model.parameters())
    if (e.trainable && e.name.rfind(prefix, 0) == 0) n += static_cast<std::int64_t>(e.tensor.numel());
  return n;
}

template <typename T>
FlopsParams count_flops_params(EdmbModel<T>& model, int channels, int height, int width) {
  if (channels != 3) throw Error("count_flops_params: the model takes 3-channel input");
  const int unit = model.cfg.size_unit();
  if (height % unit != 0 || width % unit != 0) {
    throw Error("count_flops_params: input size must be a multiple of " + std::to_string(unit));
  }
  FlopsParams fp;
  fp.params = count_params(model);
  MacCounter mc;
  {
    FlopScope scope(mc);
    NoGradGuard guard;
    Tensor<T> x({1, channels, height, width});
    model.forward_eval(x, false);
  }
  fp.conv_macs = static_cast<std::int64_t>(mc.conv);
  fp.linear_macs = static_cast<std::int64_t>(mc.linear);
  fp.scan_macs = static_cast<std::int64_t>(mc.scan);
  fp.flops = static_cast<std::int64_t>(mc.flops());
  return fp;
}

std::string format_report(const EvalReport& r) {
  std::ostringstream os;
  char line[160];
  os << "threshold  precision  recall     F\n";
  for (std::size_t t = 0; t < r.thresholds.size(); ++t) {
    std::snprintf(line, sizeof line, "%9.4f  %9.4f  %9.4f  %9.4f\n", r.thresholds[t], r.precision[t], r.recall[t], r.f[t]);
    os << line;
  }
  std::snprintf(line, sizeof line, "ODS  F=%.4f  P=%.4f  R=%.4f  at t=%.4f\nOIS  F=%.4f\n", r.ods, r.ods_p, r.ods_r,
                r.ods_threshold, r.ois);
  os << line;
  std::snprintf(line, sizeof line, "ods=%.6f\nois=%.6f\n", r.ods, r.ois);
  os << line;
  if (r.params >= 0) os << "params=" << r.params << "\n";
  if (r.flops >= 0) os << "flops=" << r.flops << "\n";
  return os.str();
}

template FlopsParams count_flops_params<float>(EdmbModel<float>&, int, int, int);
template FlopsParams count_flops_params<double>(EdmbModel<double>&, int, int, int);
template std::int64_t count_params<float>(const EdmbModel<float>&, const std::string&);
template std::int64_t count_params<double>(const EdmbModel<double>&, const std::string&);

}  // namespace edmb
