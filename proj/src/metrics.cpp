#include "vonet/metrics.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <stdexcept>

#include <json.hpp>

namespace vonet {

Segmentation consolidate(const std::vector<Tensor>& mask_seq, int out_h,
                         int out_w, Real threshold) {
  if (mask_seq.empty()) throw std::invalid_argument("consolidate: no masks");
  Segmentation seg;
  seg.h = out_h;
  seg.w = out_w;
  const int k = mask_seq[0].shape()[0];
  seg.null_label = k;

  for (const Tensor& masks : mask_seq) {
    if (masks.ndim() != 3 || masks.shape()[0] != k)
      throw std::invalid_argument("consolidate: expected [K, h, w] masks");
    int mh = masks.shape()[1], mw = masks.shape()[2];
    Real sy = static_cast<Real>(mh) / out_h;
    Real sx = static_cast<Real>(mw) / out_w;
    std::vector<int> labels(static_cast<size_t>(out_h) * out_w);
    const Real* d = masks.data();
    for (int y = 0; y < out_h; ++y) {
      Real fy = (y + 0.5) * sy - 0.5;
      int y0 = static_cast<int>(std::floor(fy));
      Real wy = fy - y0;
      int ya = std::clamp(y0, 0, mh - 1), yb = std::clamp(y0 + 1, 0, mh - 1);
      for (int x = 0; x < out_w; ++x) {
        Real fx = (x + 0.5) * sx - 0.5;
        int x0 = static_cast<int>(std::floor(fx));
        Real wx = fx - x0;
        int xa = std::clamp(x0, 0, mw - 1), xb = std::clamp(x0 + 1, 0, mw - 1);
        int best = 0;
        Real best_p = -1;
        for (int s = 0; s < k; ++s) {
          const Real* m = d + static_cast<int64_t>(s) * mh * mw;
          Real p = (1 - wy) * ((1 - wx) * m[ya * mw + xa] + wx * m[ya * mw + xb]) +
                   wy * ((1 - wx) * m[yb * mw + xa] + wx * m[yb * mw + xb]);
          if (p > best_p) {  // strict: ties keep the lowest slot index
            best = s;
            best_p = p;
          }
        }
        if (best_p < threshold) best = k;
        labels[static_cast<size_t>(y) * out_w + x] = best;
      }
    }
    seg.frames.push_back(std::move(labels));
  }
  return seg;
}

namespace {

Real comb2(Real n) { return n * (n - 1) / 2; }

}  // namespace

bool fg_ari(const Segmentation& pred, const std::vector<Mask16>& gt, Real* out) {
  if (pred.frames.size() != gt.size())
    throw std::invalid_argument("fg_ari: frame count mismatch");
  std::map<std::pair<int, int>, int64_t> contingency;
  std::map<int, int64_t> pred_count, gt_count;
  int64_t total = 0;
  for (size_t t = 0; t < gt.size(); ++t) {
    const Mask16& m = gt[t];
    if (m.h != pred.h || m.w != pred.w)
      throw std::invalid_argument("fg_ari: resolution mismatch");
    const auto& labels = pred.frames[t];
    for (int p = 0; p < m.h * m.w; ++p) {
      int g = m.id[p];
      if (g == 0) continue;  // foreground only
      int pl = labels[p];
      ++contingency[{pl, g}];
      ++pred_count[pl];
      ++gt_count[g];
      ++total;
    }
  }
  if (total == 0) return false;

  Real sum_ij = 0, sum_a = 0, sum_b = 0;
  for (const auto& [key, n] : contingency) sum_ij += comb2(static_cast<Real>(n));
  for (const auto& [key, n] : pred_count) sum_a += comb2(static_cast<Real>(n));
  for (const auto& [key, n] : gt_count) sum_b += comb2(static_cast<Real>(n));
  Real all = comb2(static_cast<Real>(total));
  Real expected = sum_a * sum_b / all;
  Real max_index = 0.5 * (sum_a + sum_b);
  if (max_index == expected) {
    // degenerate partitions (e.g. single cluster on both sides)
    *out = (sum_ij == max_index) ? 1.0 : 0.0;
    return true;
  }
  *out = (sum_ij - expected) / (max_index - expected);
  return true;
}

Real miou(const Segmentation& pred, const std::vector<Mask16>& gt) {
  if (pred.frames.size() != gt.size())
    throw std::invalid_argument("miou: frame count mismatch");
  // 3-D masks: a label's voxel set across all frames
  std::map<int, int64_t> pred_sizes, gt_sizes;
  std::map<std::pair<int, int>, int64_t> inter;
  for (size_t t = 0; t < gt.size(); ++t) {
    const auto& labels = pred.frames[t];
    const Mask16& m = gt[t];
    for (int p = 0; p < m.h * m.w; ++p) {
      int pl = labels[p];
      int g = m.id[p];
      ++pred_sizes[pl];
      ++gt_sizes[g];
      ++inter[{pl, g}];
    }
  }
  if (gt_sizes.empty()) return 0;

  std::vector<int> pred_labels, gt_labels;
  for (const auto& [l, n] : pred_sizes) pred_labels.push_back(l);
  for (const auto& [l, n] : gt_sizes) gt_labels.push_back(l);

  std::vector<std::vector<Real>> profit(
      pred_labels.size(), std::vector<Real>(gt_labels.size(), 0.0));
  for (size_t i = 0; i < pred_labels.size(); ++i)
    for (size_t j = 0; j < gt_labels.size(); ++j) {
      auto it = inter.find({pred_labels[i], gt_labels[j]});
      int64_t in = it == inter.end() ? 0 : it->second;
      int64_t un = pred_sizes[pred_labels[i]] + gt_sizes[gt_labels[j]] - in;
      profit[i][j] = un > 0 ? static_cast<Real>(in) / un : 0.0;
    }
  return hungarian_total(profit) / static_cast<Real>(gt_labels.size());
}

// Kuhn-Munkres with potentials on the cost matrix (cost = max - profit),
// O(n^3). Rectangular matrices are padded with zero-profit dummies.
std::vector<int> hungarian(const std::vector<std::vector<Real>>& profit) {
  if (profit.empty()) return {};
  int rows = static_cast<int>(profit.size());
  int cols = static_cast<int>(profit[0].size());
  if (cols == 0) return std::vector<int>(rows, -1);
  int n = std::max(rows, cols);

  Real max_p = 0;
  for (const auto& r : profit)
    for (Real v : r) {
      if (!std::isfinite(v)) throw std::invalid_argument("hungarian: non-finite");
      max_p = std::max(max_p, v);
    }
  auto cost = [&](int i, int j) -> Real {
    if (i >= rows || j >= cols) return max_p;  // dummy: profit 0
    return max_p - profit[i][j];
  };

  // potentials u, v; p[j] = row matched to column j (1-based sentinel at 0)
  std::vector<Real> u(n + 1, 0), v(n + 1, 0);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<Real> minv(n + 1, std::numeric_limits<Real>::infinity());
    std::vector<char> used(n + 1, false);
    do {
      used[j0] = true;
      int i0 = p[j0], j1 = -1;
      Real delta = std::numeric_limits<Real>::infinity();
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        Real cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }

  std::vector<int> match(rows, -1);
  for (int j = 1; j <= n; ++j) {
    int i = p[j];
    if (i >= 1 && i <= rows && j <= cols) match[i - 1] = j - 1;
  }
  return match;
}

Real hungarian_total(const std::vector<std::vector<Real>>& profit) {
  std::vector<int> match = hungarian(profit);
  Real total = 0;
  for (size_t i = 0; i < match.size(); ++i)
    if (match[i] >= 0) total += profit[i][match[i]];
  return total;
}

void MetricReport::finalize() {
  video_count = static_cast<int>(per_video.size());
  fg_ari_valid_count = 0;
  Real ari = 0, iou = 0;
  for (const auto& v : per_video) {
    if (v.fg_ari_valid) {
      ari += v.fg_ari;
      ++fg_ari_valid_count;
    }
    iou += v.miou;
  }
  fg_ari_mean = fg_ari_valid_count ? ari / fg_ari_valid_count : 0;
  miou_mean = video_count ? iou / video_count : 0;
}

void write_report(const std::string& path, const MetricReport& report) {
  nlohmann::json j;
  j["videos"] = nlohmann::json::array();
  for (const auto& v : report.per_video) {
    nlohmann::json row;
    row["index"] = v.index;
    row["miou"] = v.miou;
    if (v.fg_ari_valid)
      row["fg_ari"] = v.fg_ari;
    else
      row["fg_ari"] = nullptr;  // no foreground: excluded from the mean
    j["videos"].push_back(row);
  }
  j["summary"] = {{"fg_ari", report.fg_ari_mean},
                  {"miou", report.miou_mean},
                  {"video_count", report.video_count},
                  {"fg_ari_valid_count", report.fg_ari_valid_count}};
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write report: " + path);
  os << j.dump(2) << "\n";
}

}  // namespace vonet
