#include "vonet/bench.h"

#include <algorithm>
#include <cstdlib>
#include <chrono>
#include <fstream>
#include <stdexcept>

#include "vonet/model.h"
#include "vonet/threads.h"

namespace vonet {

namespace {

double median_of(std::vector<double> xs) {
  std::sort(xs.begin(), xs.end());
  size_t n = xs.size();
  return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

double iqr_of(std::vector<double> xs) {
  std::sort(xs.begin(), xs.end());
  size_t n = xs.size();
  return xs[(3 * n) / 4 == n ? n - 1 : (3 * n) / 4] - xs[n / 4];
}

}  // namespace

std::vector<BenchRow> bench_attention(const ModelConfig& cfg,
                                      const std::vector<int>& slot_counts,
                                      int image_size, int repeats, int threads,
                                      uint64_t seed) {
  if (slot_counts.empty())
    throw std::invalid_argument("bench: empty slot count list");
  if (repeats < 3) throw std::invalid_argument("bench: repeats must be >= 3");

  Rng rng(seed);
  int feat = image_size / 2;
  ParallelAttention attn(rng, cfg, feat, feat);
  Tensor features = Tensor::make({1, cfg.feature_channels, feat, feat});
  rng.fill_normal(features.values().begin(), features.values().end());

  NoGradGuard ng;
  std::vector<BenchRow> rows;
  using clock = std::chrono::steady_clock;

  for (const std::string& variant : {"parallel", "recurrent"}) {
    for (int k : slot_counts) {
      if (k < 1) throw std::invalid_argument("bench: slot count must be >= 1");
      Tensor contexts = Tensor::make({1, k, cfg.context_dim});
      rng.fill_normal(contexts.values().begin(), contexts.values().end());
      std::vector<double> times;
      for (int r = 0; r <= repeats; ++r) {  // run 0 is warm-up
        auto t0 = clock::now();
        if (variant == "parallel") {
          AttentionResult res = attn.forward(features, contexts, false, threads);
          (void)res;
        } else {
          Tensor masks = attn.recurrent_reference(features, k);
          (void)masks;
        }
        double ms =
            std::chrono::duration<double, std::milli>(clock::now() - t0).count();
        if (r > 0) times.push_back(ms);
      }
      rows.push_back({variant, k, image_size, median_of(times), iqr_of(times)});
    }
  }
  return rows;
}

void write_bench_csv(const std::string& path, const std::vector<BenchRow>& rows) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write bench csv: " + path);
  os << "variant,slots,image_size,median_ms,iqr_ms\n";
  for (const auto& r : rows)
    os << r.variant << "," << r.slots << "," << r.image_size << ","
       << r.median_ms << "," << r.iqr_ms << "\n";
}

int bench_default_threads() {
  return std::getenv("VONET_THREADS") ? default_threads() : 1;
}

double bench_ratio(const std::vector<BenchRow>& rows,
                   const std::string& variant) {
  double tmin = 0, tmax = 0;
  int kmin = 1 << 30, kmax = -1;
  for (const auto& r : rows) {
    if (r.variant != variant) continue;
    if (r.slots < kmin) {
      kmin = r.slots;
      tmin = r.median_ms;
    }
    if (r.slots > kmax) {
      kmax = r.slots;
      tmax = r.median_ms;
    }
  }
  return (kmax < 0 || tmin <= 0) ? 0 : tmax / tmin;
}

}  // namespace vonet
