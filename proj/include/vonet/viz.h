#pragma once

#include <array>
#include <string>

#include "vonet/dataset.h"
#include "vonet/metrics.h"
#include "vonet/model.h"

namespace vonet {

// Fixed 17-color palette indexed by slot id (16 slots + null).
std::array<uint8_t, 3> slot_color(int slot);

// Blends each frame with its slot color (null slot left untinted) and
// draws white boundaries between segments.
Image8 render_overlay(const Image8& frame, const std::vector<int>& labels,
                      int null_label);

struct VizResult {
  int overlays = 0;
  int posterior_recons = 0;
  int prior_recons = 0;
  std::string kld_csv;
};

// Writes overlay_<t>.png, recon_post_<t>.png, recon_prior_<t>.png (t >= 1
// only: the prior forecasts from a preceding step) and kld.csv with one
// row per frame and one column per slot, values divided by the slot
// embedding dimension.
VizResult render_video_viz(const VoNet& model, const LabeledVideo& video,
                           int slots, uint64_t eval_seed,
                           const std::string& out_dir);

}  // namespace vonet
