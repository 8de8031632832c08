#include "vonet/viz.h"

#include <filesystem>
#include <fstream>

#include "vonet/eval.h"

namespace fs = std::filesystem;

namespace vonet {

std::array<uint8_t, 3> slot_color(int slot) {
  static const std::array<std::array<uint8_t, 3>, 17> palette = {{
      {230, 25, 75},   {60, 180, 75},   {255, 225, 25}, {0, 130, 200},
      {245, 130, 48},  {145, 30, 180},  {70, 240, 240}, {240, 50, 230},
      {210, 245, 60},  {250, 190, 212}, {0, 128, 128},  {220, 190, 255},
      {170, 110, 40},  {255, 250, 200}, {128, 0, 0},    {170, 255, 195},
      {128, 128, 128},
  }};
  return palette[static_cast<size_t>(slot) % palette.size()];
}

Image8 render_overlay(const Image8& frame, const std::vector<int>& labels,
                      int null_label) {
  Image8 out = frame;
  for (int y = 0; y < frame.h; ++y)
    for (int x = 0; x < frame.w; ++x) {
      int l = labels[static_cast<size_t>(y) * frame.w + x];
      uint8_t* p = out.px(y, x);
      if (l != null_label) {
        auto c = slot_color(l);
        for (int i = 0; i < 3; ++i)
          p[i] = static_cast<uint8_t>((p[i] + c[i]) / 2);
      }
      bool boundary = false;
      if (x + 1 < frame.w &&
          labels[static_cast<size_t>(y) * frame.w + x + 1] != l)
        boundary = true;
      if (y + 1 < frame.h &&
          labels[(static_cast<size_t>(y) + 1) * frame.w + x] != l)
        boundary = true;
      if (boundary) p[0] = p[1] = p[2] = 255;
    }
  return out;
}

VizResult render_video_viz(const VoNet& model, const LabeledVideo& video,
                           int slots, uint64_t eval_seed,
                           const std::string& out_dir) {
  fs::create_directories(out_dir);
  NoGradGuard ng;
  VizResult result;
  Rng rng(eval_seed);
  SlotState state = model.initial_state(1, slots, rng);
  int h = video.frames.at(0).h, w = video.frames.at(0).w;

  std::ofstream kld_csv(fs::path(out_dir) / "kld.csv");
  for (int k = 0; k < slots; ++k) kld_csv << (k ? "," : "") << "slot" << k;
  kld_csv << "\n";
  result.kld_csv = (fs::path(out_dir) / "kld.csv").string();

  for (size_t t = 0; t < video.frames.size(); ++t) {
    const Image8& frame = video.frames[t];
    Tensor ft = reshape(frame_to_tensor(frame), {1, 3, h, w});
    Tensor prev_latents = state.latents;
    auto [next, cache] = model.unroll_step(state, ft, AblationFlags{});

    // segmentation overlay at frame resolution
    const Shape& ms = cache.attn.masks.shape();
    Segmentation seg = consolidate(
        {reshape(cache.attn.masks, {ms[1], ms[2], ms[3]})}, h, w, 0.3);
    Image8 overlay = render_overlay(frame, seg.frames[0], seg.null_label);
    save_png((fs::path(out_dir) / ("overlay_" + std::to_string(t) + ".png"))
                 .string(),
             overlay);
    ++result.overlays;

    DiagonalGaussian prior_g = model.vae.prior(prev_latents);
    Tensor kl = kld(cache.posterior, prior_g);  // [1, K]
    for (int k = 0; k < slots; ++k)
      kld_csv << (k ? "," : "")
              << kl.data()[k] / static_cast<Real>(model.cfg.z_dim);
    kld_csv << "\n";

    // posterior-mean reconstruction
    auto decode_tokens = [&](const Tensor& z) {
      std::vector<int> tokens = model.token_decoder.rollout(z, nullptr);
      Tensor oh =
          model.dvae.one_hot(tokens, 1, model.dvae.grid_for(model.frame_h));
      Tensor img = model.dvae.decode(oh);
      return tensor_to_frame(reshape(img, {3, model.frame_h, model.frame_w}));
    };
    save_png((fs::path(out_dir) / ("recon_post_" + std::to_string(t) + ".png"))
                 .string(),
             decode_tokens(cache.posterior.mean));
    ++result.posterior_recons;

    if (t >= 1) {
      save_png(
          (fs::path(out_dir) / ("recon_prior_" + std::to_string(t) + ".png"))
              .string(),
          decode_tokens(prior_g.mean));
      ++result.prior_recons;
    }
    state = next;
  }
  return result;
}

}  // namespace vonet
