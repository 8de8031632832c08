#pragma once

#include <string>
#include <vector>

#include "vonet/dataset.h"
#include "vonet/tensor.h"

namespace vonet {

// Integer segmentation over a whole video; labels 0..K-1 are slots, K is
// the null slot for low-confidence pixels.
struct Segmentation {
  int h = 0, w = 0;
  int null_label = 0;
  std::vector<std::vector<int>> frames;
};

// Bilinearly upsamples each slot probability map to frame resolution,
// then takes the per-pixel argmax; pixels whose best probability falls
// below `threshold` go to the null slot. Ties pick the lowest slot index.
Segmentation consolidate(const std::vector<Tensor>& mask_seq, int out_h,
                         int out_w, Real threshold = 0.3);

// Adjusted Rand index over ground-truth foreground pixels pooled across
// all frames. Returns false when the video has no foreground.
bool fg_ari(const Segmentation& pred, const std::vector<Mask16>& gt,
            Real* out);

// Optimal-matching IoU: every predicted label (including null) competes
// for every ground-truth label (background included); the summed matched
// IoU is divided by the number of ground-truth labels.
Real miou(const Segmentation& pred, const std::vector<Mask16>& gt);

// Maximum-profit assignment; rectangular inputs are padded internally.
// Returns row -> column (or -1 when a row is unmatched in the wide case).
std::vector<int> hungarian(const std::vector<std::vector<Real>>& profit);
Real hungarian_total(const std::vector<std::vector<Real>>& profit);

struct VideoScore {
  int index = 0;
  Real fg_ari = 0;
  bool fg_ari_valid = false;
  Real miou = 0;
};

struct MetricReport {
  std::vector<VideoScore> per_video;
  Real fg_ari_mean = 0;  // over videos with valid foreground
  Real miou_mean = 0;
  int video_count = 0;
  int fg_ari_valid_count = 0;

  void finalize();
};

void write_report(const std::string& path, const MetricReport& report);

}  // namespace vonet
