#pragma once

#include <string>
#include <vector>

#include "vonet/config.h"
#include "vonet/dataset.h"
#include "vonet/metrics.h"
#include "vonet/model.h"

namespace vonet {

struct EvalOptions {
  int slots = 5;
  uint64_t eval_seed = 0xE7A1ULL;  // fixed noise stream for init_slots
  Real threshold = 0.3;
  AblationFlags flags;
  bool oracle_gt = false;  // metric self-test: predictions := ground truth
  int max_videos = -1;     // -1 = all
};

// Full-video unroll at evaluation time; returns per-frame slot masks at
// feature resolution.
std::vector<Tensor> unroll_masks(const VoNet& model, const LabeledVideo& video,
                                 int slots, uint64_t seed,
                                 const AblationFlags& flags);

Segmentation segment_video(const VoNet& model, const LabeledVideo& video,
                           const EvalOptions& opt);

MetricReport evaluate_dataset(const VoNet& model, const DatasetManifest& data,
                              const EvalOptions& opt);

}  // namespace vonet
