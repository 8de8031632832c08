#include "vonet/eval.h"

#include <map>

namespace vonet {

std::vector<Tensor> unroll_masks(const VoNet& model, const LabeledVideo& video,
                                 int slots, uint64_t seed,
                                 const AblationFlags& flags) {
  NoGradGuard ng;
  Rng rng(seed);
  SlotState state = model.initial_state(1, slots, rng);
  std::vector<Tensor> masks;
  masks.reserve(video.frames.size());
  for (const Image8& frame : video.frames) {
    Tensor ft = reshape(frame_to_tensor(frame), {1, 3, frame.h, frame.w});
    auto [next, cache] = model.unroll_step(state, ft, flags);
    const Shape& s = cache.attn.masks.shape();
    masks.push_back(reshape(cache.attn.masks, {s[1], s[2], s[3]}));
    state = next;
  }
  return masks;
}

namespace {

// Ground truth recast as a prediction; instance ids stay distinct and the
// background takes a label of its own.
Segmentation oracle_segmentation(const LabeledVideo& video, int slots) {
  Segmentation seg;
  seg.h = video.gt_masks.at(0).h;
  seg.w = video.gt_masks.at(0).w;
  seg.null_label = slots;
  for (const Mask16& m : video.gt_masks) {
    std::vector<int> labels(m.id.begin(), m.id.end());
    seg.frames.push_back(std::move(labels));
  }
  return seg;
}

}  // namespace

Segmentation segment_video(const VoNet& model, const LabeledVideo& video,
                           const EvalOptions& opt) {
  if (opt.oracle_gt) return oracle_segmentation(video, opt.slots);
  std::vector<Tensor> masks =
      unroll_masks(model, video, opt.slots, opt.eval_seed, opt.flags);
  return consolidate(masks, video.frames.at(0).h, video.frames.at(0).w,
                     opt.threshold);
}

MetricReport evaluate_dataset(const VoNet& model, const DatasetManifest& data,
                              const EvalOptions& opt) {
  MetricReport report;
  int count = static_cast<int>(data.videos.size());
  if (opt.max_videos >= 0) count = std::min(count, opt.max_videos);
  for (int v = 0; v < count; ++v) {
    LabeledVideo video = load_video(data, v);
    Segmentation seg = segment_video(model, video, opt);
    VideoScore score;
    score.index = v;
    score.fg_ari_valid = fg_ari(seg, video.gt_masks, &score.fg_ari);
    score.miou = miou(seg, video.gt_masks);
    report.per_video.push_back(score);
  }
  report.finalize();
  return report;
}

}  // namespace vonet
