#pragma once

#include <string>
#include <vector>

#include "vonet/config.h"

namespace vonet {

struct BenchRow {
  std::string variant;  // "parallel" | "recurrent"
  int slots = 0;
  int image_size = 0;
  double median_ms = 0;
  double iqr_ms = 0;
};

// Times one attention forward pass per variant and slot count on random
// inputs. The first run per configuration is a discarded warm-up; the
// parallel variant may fan slots out over `threads` workers, while the
// recurrent variant is sequential across slots by construction.
std::vector<BenchRow> bench_attention(const ModelConfig& cfg,
                                      const std::vector<int>& slot_counts,
                                      int image_size, int repeats, int threads,
                                      uint64_t seed = 42);

void write_bench_csv(const std::string& path, const std::vector<BenchRow>& rows);

// Single-threaded timing by default for stable comparisons; an explicit
// VONET_THREADS opts into fanning the parallel variant's slots across
// cores (the recurrent variant stays sequential by construction).
int bench_default_threads();

// time(max slots) / time(min slots) for one variant; returns 0 if absent.
double bench_ratio(const std::vector<BenchRow>& rows, const std::string& variant);

}  // namespace vonet
