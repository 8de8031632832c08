#include <stdexcept>

#include "vonet/model.h"

namespace vonet {

namespace {

constexpr Real kLogVarLo = -10.0, kLogVarHi = 10.0;

DiagonalGaussian split_gaussian(const Tensor& packed, int z_dim) {
  DiagonalGaussian g;
  g.mean = slice(packed, -1, 0, z_dim);
  g.log_var = clamp(slice(packed, -1, z_dim, z_dim), kLogVarLo, kLogVarHi);
  return g;
}

}  // namespace

SequentialVae::SequentialVae(Rng& rng, const ModelConfig& cfg)
    : z_dim(cfg.z_dim) {
  int d = cfg.slot_dim;
  post_mlp = Mlp(rng, {d, d, 2 * cfg.z_dim});
  prior_tf =
      TransformerStack(rng, d, cfg.prior_tf_heads, cfg.prior_tf_blocks);
  prior_mlp = Mlp(rng, {d, d, 2 * cfg.z_dim});
}

DiagonalGaussian SequentialVae::posterior(const Tensor& r) const {
  return split_gaussian(post_mlp.forward(r), z_dim);
}

DiagonalGaussian SequentialVae::prior(const Tensor& r_prev_all) const {
  if (r_prev_all.ndim() != 3)
    throw std::invalid_argument("prior: need [n, K, D] latents");
  Tensor forecast = prior_tf.forward(r_prev_all);
  return split_gaussian(prior_mlp.forward(forecast), z_dim);
}

void SequentialVae::collect(const std::string& prefix, ParamList& out) const {
  post_mlp.collect(prefix + ".post_mlp", out);
  prior_tf.collect(prefix + ".prior_tf", out);
  prior_mlp.collect(prefix + ".prior_mlp", out);
}

Tensor vae_sample(const DiagonalGaussian& g, const Tensor& noise) {
  if (noise.shape() != g.mean.shape())
    throw std::invalid_argument("vae_sample: noise shape mismatch");
  return add(g.mean, mul(exp(mul(g.log_var, 0.5)), noise));
}

Tensor kld(const DiagonalGaussian& q, const DiagonalGaussian& p) {
  if (q.mean.shape() != p.mean.shape())
    throw std::invalid_argument("kld: dimension mismatch");
  // 0.5 * sum_d (exp(lq - lp) + (mp - mq)^2 / exp(lp) - 1 + lp - lq)
  Tensor diff = sub(p.mean, q.mean);
  Tensor lratio = sub(q.log_var, p.log_var);
  Tensor term = add(exp(lratio), mul(mul(diff, diff), exp(neg(p.log_var))));
  term = add(sub(term, lratio), -1.0);
  return mul(sum(term, {-1}), 0.5);
}

Tensor balanced_kld(const DiagonalGaussian& q, const DiagonalGaussian& p,
                    Real kappa) {
  if (kappa < 0 || kappa > 1)
    throw std::invalid_argument("balanced_kld: kappa outside [0, 1]");
  DiagonalGaussian qs{detach(q.mean), detach(q.log_var)};
  DiagonalGaussian ps{detach(p.mean), detach(p.log_var)};
  return add(mul(kld(qs, p), kappa), mul(kld(q, ps), 1.0 - kappa));
}

}  // namespace vonet
