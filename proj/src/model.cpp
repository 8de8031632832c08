#include <stdexcept>

#include "vonet/model.h"

namespace vonet {

VoNet::VoNet(const ModelConfig& cfg_, int frame_h_, int frame_w_, uint64_t seed)
    : cfg(cfg_), frame_h(frame_h_), frame_w(frame_w_) {
  if (frame_h % 2 != 0 || frame_w % 2 != 0)
    throw std::invalid_argument("model: frame dims must be even");
  Rng rng(seed ^ 0x5eedf00dULL);
  backbone = Backbone(rng, cfg);
  attention = ParallelAttention(rng, cfg, frame_h / 2, frame_w / 2);
  dynamics = SlotDynamics(rng, cfg);
  vae = SequentialVae(rng, cfg);
  dvae = Dvae(rng, cfg);
  token_decoder = TokenDecoder(rng, cfg, frame_h / cfg.dvae_downsample);
}

SlotState VoNet::initial_state(int n, int slots, Rng& rng) const {
  Tensor noise = Tensor::make({n, slots, cfg.slot_dim});
  rng.fill_normal(noise.values().begin(), noise.values().end());
  Tensor r0 = dynamics.init_slots(noise);
  SlotState st;
  st.latents = r0;
  st.contexts = dynamics.context(r0);
  st.step = 0;
  return st;
}

SlotState VoNet::state_from_latents(const Tensor& latents, int64_t step) const {
  SlotState st;
  st.latents = latents;
  st.contexts = dynamics.context(latents);
  st.step = step;
  return st;
}

std::pair<SlotState, StepCache> VoNet::unroll_step(
    const SlotState& state, const Tensor& frames,
    const AblationFlags& flags) const {
  if (frames.shape()[0] != state.latents.shape()[0])
    throw std::invalid_argument("unroll_step: batch mismatch");
  StepCache cache;
  Tensor features = backbone.forward(frames);
  cache.attn = attention.forward(features, state.contexts, flags.wo_unet);
  cache.y = dynamics.encode(features, cache.attn.masks);
  cache.prev_latents = state.latents;

  SlotState next;
  next.latents = dynamics.update(cache.y, state.latents);
  next.contexts = dynamics.context(next.latents);
  next.step = state.step + 1;
  cache.posterior = vae.posterior(next.latents);
  return {next, cache};
}

ParamList VoNet::params() const {
  ParamList out;
  backbone.collect("backbone", out);
  attention.collect("attention", out);
  dynamics.collect("dynamics", out);
  vae.collect("vae", out);
  dvae.collect("dvae", out);
  token_decoder.collect("decoder", out);
  return out;
}

}  // namespace vonet
