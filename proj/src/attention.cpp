#include <cmath>
#include <stdexcept>

#include "vonet/model.h"
#include "vonet/threads.h"

namespace vonet {

UNet::UNet(Rng& rng, int in_channels, const std::vector<int>& channels,
           int bottleneck_dim, int feat_h_, int feat_w_)
    : feat_h(feat_h_), feat_w(feat_w_) {
  const int m = static_cast<int>(channels.size());
  if (m < 2) throw std::invalid_argument("unet: need at least 2 blocks");
  int pools = m - 1;  // no pooling on the first down block
  if (feat_h % (1 << pools) != 0 || feat_w % (1 << pools) != 0)
    throw std::invalid_argument("unet: feature map not divisible by 2^" +
                                std::to_string(pools));
  bottleneck_h = feat_h >> pools;
  bottleneck_w = feat_w >> pools;
  trunk_channels = channels.back();

  int cin = in_channels;
  for (int i = 0; i < m; ++i) {
    down_convs.emplace_back(rng, cin, channels[i], 3, 1, 1, false);
    down_norms.emplace_back(channels[i]);
    cin = channels[i];
  }
  int flat = trunk_channels * bottleneck_h * bottleneck_w;
  bottleneck_mlp = Mlp(rng, {flat, bottleneck_dim, bottleneck_dim}, true);
  up_project = Linear(rng, bottleneck_dim, flat);

  // up block j consumes the previous output concatenated with either the
  // projected bottleneck (j = 0) or a skip from the matching down block
  for (int j = 0; j < m; ++j) {
    int cout = channels[m - 1 - j];
    int cin_up = (j == 0) ? 2 * trunk_channels : 2 * channels[m - j];
    up_convs.emplace_back(rng, cin_up, cout, 3, 1, 1, false);
    up_norms.emplace_back(cout);
  }
  out_conv = Conv2d(rng, channels[0], 1, 1, 1, 0, true);
}

UNetDownState UNet::down(const Tensor& x) const {
  return down_rest(relu(down_norms[0].forward(down_convs[0].forward(x))));
}

Tensor UNet::shared_conv(const Tensor& shared_x) const {
  int c = shared_x.shape()[1];
  Tensor wf = slice(down_convs[0].w, 1, 0, c);
  return conv2d(shared_x, wf, Tensor(), 1, 1);
}

Tensor UNet::first_layer(const Tensor& shared_out, const Tensor& per_slot_x,
                         int slots) const {
  int n = shared_out.shape()[0];
  int c0 = shared_out.shape()[1];
  int h = shared_out.shape()[2], w = shared_out.shape()[3];
  int shared_c = down_convs[0].w.shape()[1] - per_slot_x.shape()[1];
  Tensor wr = slice(down_convs[0].w, 1, shared_c, per_slot_x.shape()[1]);
  Tensor hr = conv2d(per_slot_x, wr, Tensor(), 1, 1);  // [n*K, c0, h, w]
  Tensor hsum = add(reshape(hr, {n, slots, c0, h, w}),
                    reshape(shared_out, {n, 1, c0, h, w}));
  return relu(down_norms[0].forward(reshape(hsum, {n * slots, c0, h, w})));
}

UNetDownState UNet::down_rest(const Tensor& h1) const {
  const int m = static_cast<int>(down_convs.size());
  UNetDownState st;
  st.skips.resize(m);
  Tensor h = h1;
  for (int i = 1; i < m; ++i) {
    h = relu(down_norms[i].forward(down_convs[i].forward(h)));
    st.skips[i] = h;  // pre-pool activation feeds the skip connection
    h = maxpool2x2(h);
  }
  st.trunk = h;
  return st;
}

Tensor UNet::bottleneck(const UNetDownState& st) const {
  int n = st.trunk.shape()[0];
  return bottleneck_mlp.forward(reshape(st.trunk, {n, -1}));
}

Tensor UNet::up(const Tensor& q, const UNetDownState& st) const {
  const int m = static_cast<int>(down_convs.size());
  int n = st.trunk.shape()[0];
  Tensor qmap = reshape(up_project.forward(q),
                        {n, trunk_channels, bottleneck_h, bottleneck_w});
  Tensor h = concat({st.trunk, qmap}, 1);
  for (int j = 0; j < m; ++j) {
    h = relu(up_norms[j].forward(up_convs[j].forward(h)));
    if (j < m - 1) {
      h = upsample_nearest2x(h);
      h = concat({h, st.skips[m - 1 - j]}, 1);
    }
  }
  return out_conv.forward(h);
}

void UNet::collect(const std::string& prefix, ParamList& out) const {
  for (size_t i = 0; i < down_convs.size(); ++i) {
    down_convs[i].collect(prefix + ".down" + std::to_string(i), out);
    down_norms[i].collect(prefix + ".dnorm" + std::to_string(i), out);
  }
  bottleneck_mlp.collect(prefix + ".mlp", out);
  up_project.collect(prefix + ".up_project", out);
  for (size_t i = 0; i < up_convs.size(); ++i) {
    up_convs[i].collect(prefix + ".up" + std::to_string(i), out);
    up_norms[i].collect(prefix + ".unorm" + std::to_string(i), out);
  }
  out_conv.collect(prefix + ".out", out);
}

// ---- parallel attention ----

ParallelAttention::ParallelAttention(Rng& rng, const ModelConfig& cfg,
                                     int feat_h, int feat_w)
    : context_dim(cfg.context_dim) {
  ctx_project = Linear(rng, cfg.context_dim, cfg.feature_channels);
  int in_channels = cfg.feature_channels + cfg.context_dim + 1;
  unet = UNet(rng, in_channels, cfg.unet_channels, cfg.bottleneck_dim, feat_h,
              feat_w);
  mask_tf = TransformerStack(rng, cfg.bottleneck_dim, cfg.mask_tf_heads,
                             cfg.mask_tf_blocks);
}

Tensor ParallelAttention::estimate(const Tensor& features,
                                   const Tensor& contexts) const {
  if (contexts.ndim() != 3 || contexts.shape()[1] == 0)
    throw std::invalid_argument("estimate: need [n, K>=1, Dc] contexts");
  int n = features.shape()[0], cf = features.shape()[1];
  int h = features.shape()[2], w = features.shape()[3];
  if (contexts.shape()[0] != n)
    throw std::invalid_argument("estimate: batch mismatch");
  Tensor proj = ctx_project.forward(contexts);        // [n, K, Cf]
  Tensor flat = reshape(features, {n, cf, h * w});    // [n, Cf, P]
  return reshape(matmul(proj, flat), {n, contexts.shape()[1], h, w});
}

AttentionResult ParallelAttention::forward(const Tensor& features,
                                           const Tensor& contexts,
                                           bool wo_unet, int threads) const {
  AttentionResult res;
  res.est_logits = estimate(features, contexts);
  if (wo_unet) {
    res.logits = res.est_logits;
    res.masks = softmax(res.logits, 1);
    return res;
  }
  int n = features.shape()[0], cf = features.shape()[1];
  int h = features.shape()[2], w = features.shape()[3];
  int slots = contexts.shape()[1];
  int dc = contexts.shape()[2];

  Tensor est_ls = log_softmax(res.est_logits, 1);
  Tensor ctx_b = broadcast_to(reshape(contexts, {n, slots, dc, 1, 1}),
                              {n, slots, dc, h, w});
  Tensor est_b = reshape(est_ls, {n, slots, 1, h, w});
  Tensor per_slot =
      reshape(concat({ctx_b, est_b}, 2), {n * slots, dc + 1, h, w});
  Tensor h1 = unet.first_layer(unet.shared_conv(features), per_slot, slots);

  int nk = n * slots;
  Tensor hvec, delta;
  UNetDownState ds;
  std::vector<UNetDownState> chunk_states;
  std::vector<std::pair<int, int>> ranges;
  // Chunks of a few rows keep the U-Net activations cache-resident at
  // large slot counts; per-sample results are unaffected.
  const int chunk_rows = 4;
  if (nk <= chunk_rows && threads <= 1) {
    ds = unet.down_rest(h1);
    hvec = unet.bottleneck(ds);  // [n*K, d]
  } else {
    // per-slot rows are independent until the mask transformer; fan the
    // down path out over the pool and stitch the bottleneck vectors back
    int chunks = std::max((nk + chunk_rows - 1) / chunk_rows,
                          std::min(threads, nk));
    chunks = std::min(chunks, nk);
    for (int c = 0; c < chunks; ++c) {
      int b0 = static_cast<int>(static_cast<int64_t>(nk) * c / chunks);
      int b1 = static_cast<int>(static_cast<int64_t>(nk) * (c + 1) / chunks);
      if (b1 > b0) ranges.emplace_back(b0, b1 - b0);
    }
    chunk_states.resize(ranges.size());
    std::vector<Tensor> hparts(ranges.size());
    parallel_for_chunks(static_cast<int>(ranges.size()), threads,
                        [&](int lo, int hi) {
                          for (int i = lo; i < hi; ++i) {
                            Tensor xi = slice(h1, 0, ranges[i].first,
                                              ranges[i].second);
                            chunk_states[i] = unet.down_rest(xi);
                            hparts[i] = unet.bottleneck(chunk_states[i]);
                          }
                        });
    hvec = concat(hparts, 0);
  }
  int d = hvec.shape()[1];
  res.latent_h = reshape(hvec, {n, slots, d});
  res.latent_q = mask_tf.forward(res.latent_h);
  Tensor q2 = reshape(res.latent_q, {n * slots, d});
  if (ranges.empty()) {
    delta = unet.up(q2, ds);
  } else {
    std::vector<Tensor> dparts(ranges.size());
    parallel_for_chunks(static_cast<int>(ranges.size()), threads,
                        [&](int lo, int hi) {
                          for (int i = lo; i < hi; ++i) {
                            Tensor qi = slice(q2, 0, ranges[i].first,
                                              ranges[i].second);
                            dparts[i] = unet.up(qi, chunk_states[i]);
                          }
                        });
    delta = concat(dparts, 0);
  }

  // The U-Net emits log-space deltas on top of the estimated masks. Adding
  // them to the raw logits equals adding to the log-softmax, up to the
  // per-pixel constant the cross-slot softmax cancels; this form makes a
  // zeroed output layer an exact identity.
  res.logits = add(res.est_logits, reshape(delta, {n, slots, h, w}));
  res.masks = softmax(res.logits, 1);
  return res;
}

Tensor ParallelAttention::recurrent_reference(const Tensor& features,
                                              int slots) const {
  if (slots < 1) throw std::invalid_argument("recurrent attention: slots < 1");
  int n = features.shape()[0];
  int h = features.shape()[2], w = features.shape()[3];
  Tensor scope = Tensor::full({n, 1, h, w}, 1.0);
  Tensor zero_ctx = Tensor::zeros({n, context_dim, h, w});
  Tensor shared = unet.shared_conv(features);  // hoisted, as a fast parallel
                                               // implementation also would
  std::vector<Tensor> masks;
  for (int k = 0; k + 1 < slots; ++k) {
    Tensor per_slot = concat({zero_ctx, log(add(scope, 1e-20))}, 1);
    Tensor h1 = unet.first_layer(shared, per_slot, 1);
    UNetDownState ds = unet.down_rest(h1);
    Tensor hvec = unet.bottleneck(ds);  // [n, d]
    Tensor q = mask_tf.forward(reshape(hvec, {n, 1, -1}));
    Tensor logits = unet.up(reshape(q, {n, -1}), ds);
    Tensor alpha = sigmoid(logits);
    masks.push_back(mul(scope, alpha));
    scope = mul(scope, add(neg(alpha), 1.0));
  }
  masks.push_back(scope);
  return concat(masks, 1);
}

void ParallelAttention::collect(const std::string& prefix, ParamList& out) const {
  ctx_project.collect(prefix + ".ctx_project", out);
  unet.collect(prefix + ".unet", out);
  mask_tf.collect(prefix + ".mask_tf", out);
}

}  // namespace vonet
