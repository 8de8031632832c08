#include <stdexcept>

#include "vonet/model.h"

namespace vonet {

SlotDynamics::SlotDynamics(Rng& rng, const ModelConfig& cfg) {
  int d = cfg.slot_dim;
  init_tf = TransformerStack(rng, d, cfg.init_tf_heads, cfg.init_tf_blocks);
  enc_project = Linear(rng, cfg.feature_channels, d);
  gru = GruCell(rng, d, d);
  slot_mlp = Mlp(rng, {d, d, d});
  ln = LayerNorm(d);
  ctx_mlp = Mlp(rng, {d, d, cfg.context_dim});
}

Tensor SlotDynamics::init_slots(const Tensor& noise) const {
  if (noise.ndim() != 3 || noise.shape()[1] == 0)
    throw std::invalid_argument("init_slots: need [n, K>=1, D] noise");
  return init_tf.forward(noise);
}

Tensor SlotDynamics::encode(const Tensor& features, const Tensor& masks) const {
  int n = features.shape()[0], cf = features.shape()[1];
  int h = features.shape()[2], w = features.shape()[3];
  if (masks.ndim() != 4 || masks.shape()[0] != n || masks.shape()[2] != h ||
      masks.shape()[3] != w)
    throw std::invalid_argument("encode: mask shape does not match features");
  int slots = masks.shape()[1];
  // y_k = mean_p mask_k(p) * feature(p), then a linear adapter to D
  Tensor mflat = reshape(masks, {n, slots, h * w});
  Tensor fflat = permute(reshape(features, {n, cf, h * w}), {0, 2, 1});
  Tensor pooled = mul(matmul(mflat, fflat), 1.0 / static_cast<Real>(h * w));
  return enc_project.forward(pooled);
}

Tensor SlotDynamics::update(const Tensor& y, const Tensor& r_prev) const {
  if (y.shape() != r_prev.shape())
    throw std::invalid_argument("update: latent shape mismatch");
  Tensor rp = gru.forward(y, r_prev);
  return ln.forward(add(rp, slot_mlp.forward(rp)));
}

Tensor SlotDynamics::context(const Tensor& r) const { return ctx_mlp.forward(r); }

void SlotDynamics::collect(const std::string& prefix, ParamList& out) const {
  init_tf.collect(prefix + ".init_tf", out);
  enc_project.collect(prefix + ".enc_project", out);
  gru.collect(prefix + ".gru", out);
  slot_mlp.collect(prefix + ".slot_mlp", out);
  ln.collect(prefix + ".ln", out);
  ctx_mlp.collect(prefix + ".ctx_mlp", out);
}

}  // namespace vonet
