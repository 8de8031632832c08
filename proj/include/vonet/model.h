#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "vonet/config.h"
#include "vonet/nn.h"
#include "vonet/rng.h"
#include "vonet/tensor.h"

namespace vonet {

// ---- backbone ----

// Pre-activation residual block; the optional projection shortcut handles
// channel/stride changes.
struct ResidualBlock {
  InstanceNorm2d n1, n2;
  Conv2d conv1, conv2;
  Conv2d shortcut;  // defined only when shape changes
  bool has_shortcut = false;

  ResidualBlock() = default;
  ResidualBlock(Rng& rng, int cin, int cout, int stride);
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

// Residual stack (first block stride 2) + linear 1x1 projection + learned
// projection of a coordinate grid as the position embedding. Output
// spatial shape is half the input frame.
struct Backbone {
  std::vector<ResidualBlock> blocks;
  Conv2d proj;
  Conv2d pos;  // 1x1 over the 4-channel coordinate grid

  Backbone() = default;
  Backbone(Rng& rng, const ModelConfig& cfg);
  Tensor forward(const Tensor& frames) const;  // [n,3,H,W] -> [n,Cf,H/2,W/2]
  void collect(const std::string& prefix, ParamList& out) const;
};

Tensor coord_grid(int h, int w);  // [1,4,h,w]: x, y, 1-x, 1-y

// ---- parallel attention ----

struct UNetDownState {
  Tensor trunk;               // deepest activation [n, C_M, hb, wb]
  std::vector<Tensor> skips;  // pre-pool conv outputs of blocks 2..M
};

// U-Net over the feature map. The bottleneck is flattened through an MLP;
// callers run the mask transformer between down() and up().
struct UNet {
  std::vector<Conv2d> down_convs;
  std::vector<InstanceNorm2d> down_norms;
  std::vector<Conv2d> up_convs;
  std::vector<InstanceNorm2d> up_norms;
  Mlp bottleneck_mlp;  // flatten -> (d, d), both ReLU
  Linear up_project;   // transformer output -> trunk-shaped map
  Conv2d out_conv;     // 1x1 -> 1 logit map
  int feat_h = 0, feat_w = 0, bottleneck_h = 0, bottleneck_w = 0;
  int trunk_channels = 0;

  UNet() = default;
  UNet(Rng& rng, int in_channels, const std::vector<int>& channels,
       int bottleneck_dim, int feat_h, int feat_w);

  UNetDownState down(const Tensor& x) const;
  Tensor bottleneck(const UNetDownState& st) const;  // [n, d]
  Tensor up(const Tensor& q, const UNetDownState& st) const;  // [n,1,h,w]

  // The first conv split along input channels: the leading `shared`
  // channels are identical for all slots of a frame, so their half runs
  // once per frame and broadcasts over slots. Equivalent to down() on the
  // concatenated input.
  Tensor shared_conv(const Tensor& shared_x) const;  // [n, c0, h, w]
  Tensor first_layer(const Tensor& shared_out, const Tensor& per_slot_x,
                     int slots) const;  // [n*K, c0, h, w]
  UNetDownState down_rest(const Tensor& h1) const;

  void collect(const std::string& prefix, ParamList& out) const;
};

struct AttentionResult {
  Tensor masks;       // [n, K, h, w], softmax across slots per pixel
  Tensor logits;      // final pre-softmax logits
  Tensor est_logits;  // estimated logits from the context/feature dot product
  Tensor latent_h;    // bottleneck vectors [n, K, d] (undefined for wo_unet)
  Tensor latent_q;    // mask-transformer outputs [n, K, d]
};

class ParallelAttention {
 public:
  ParallelAttention() = default;
  ParallelAttention(Rng& rng, const ModelConfig& cfg, int feat_h, int feat_w);

  // contexts: [n, K, Dc]; features: [n, Cf, h, w]. With threads > 1 the
  // independent per-slot U-Net passes run on a thread pool; the joint
  // mask transformer stays single-threaded. Outputs do not depend on the
  // thread count.
  Tensor estimate(const Tensor& features, const Tensor& contexts) const;
  AttentionResult forward(const Tensor& features, const Tensor& contexts,
                          bool wo_unet = false, int threads = 1) const;
  // MONet-style scope recursion over the same U-Net body; K - 1 passes.
  Tensor recurrent_reference(const Tensor& features, int slots) const;

  void collect(const std::string& prefix, ParamList& out) const;

  Linear ctx_project;  // Dc -> Cf for the estimated masks
  UNet unet;
  TransformerStack mask_tf;
  int context_dim = 0;
};

// ---- slot dynamics ----

class SlotDynamics {
 public:
  SlotDynamics() = default;
  SlotDynamics(Rng& rng, const ModelConfig& cfg);

  // noise: [n, K, D] unit Gaussian draws.
  Tensor init_slots(const Tensor& noise) const;
  // masked average pooling + projection: [n,K,D] per-frame latents.
  Tensor encode(const Tensor& features, const Tensor& masks) const;
  // r' = GRU(y, r_prev); r = LayerNorm(r' + MLP(r')).
  Tensor update(const Tensor& y, const Tensor& r_prev) const;
  Tensor context(const Tensor& r) const;  // [n,K,Dc]

  void collect(const std::string& prefix, ParamList& out) const;

  TransformerStack init_tf;
  Linear enc_project;
  GruCell gru;
  Mlp slot_mlp;
  LayerNorm ln;
  Mlp ctx_mlp;
};

// ---- sequential VAE ----

struct DiagonalGaussian {
  Tensor mean;     // [..., Dz]
  Tensor log_var;  // clamped to [-10, 10]
};

class SequentialVae {
 public:
  SequentialVae() = default;
  SequentialVae(Rng& rng, const ModelConfig& cfg);

  DiagonalGaussian posterior(const Tensor& r) const;
  // Prior for every slot from all K previous latents: [n,K,D] -> Gaussians.
  DiagonalGaussian prior(const Tensor& r_prev_all) const;

  void collect(const std::string& prefix, ParamList& out) const;

  Mlp post_mlp;   // D -> D -> 2*Dz
  TransformerStack prior_tf;
  Mlp prior_mlp;  // D -> D -> 2*Dz
  int z_dim = 0;
};

Tensor vae_sample(const DiagonalGaussian& g, const Tensor& noise);
// Closed-form KL(q || p) for diagonal Gaussians, summed over the last dim.
Tensor kld(const DiagonalGaussian& q, const DiagonalGaussian& p);
// kappa * KL(sg(q) || p) + (1 - kappa) * KL(q || sg(p)); value equals kld.
Tensor balanced_kld(const DiagonalGaussian& q, const DiagonalGaussian& p,
                    Real kappa);

// ---- dVAE + autoregressive token decoder ----

class Dvae {
 public:
  Dvae() = default;
  Dvae(Rng& rng, const ModelConfig& cfg);

  Tensor encode_logits(const Tensor& frames) const;  // [n, V, G, G]
  // Hard tokens by per-cell argmax (deterministic).
  std::vector<int> hard_tokens(const Tensor& logits) const;  // n*G*G
  // Gumbel-softmax relaxed one-hots at temperature tau (differentiable).
  Tensor gumbel_soft(const Tensor& logits, Real tau, Rng& rng) const;
  Tensor one_hot(const std::vector<int>& tokens, int n, int grid) const;
  Tensor decode(const Tensor& one_hots) const;  // [n, 3, H, W] in (0,1)

  int grid_for(int frame_h) const { return frame_h / downsample; }
  void collect(const std::string& prefix, ParamList& out) const;

  std::vector<Conv2d> enc;
  std::vector<Conv2d> dec;
  int vocab = 0;
  int downsample = 4;
};

struct TokenDecoderBlock {
  LayerNorm ln1, ln2, ln3;
  MultiheadAttention self_attn, cross_attn;
  Linear fc1, fc2;

  TokenDecoderBlock() = default;
  TokenDecoderBlock(Rng& rng, int dim, int heads);
  Tensor forward(const Tensor& x, const Tensor& slots) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

// GPT-style decoder over patch tokens, cross-attending to the slot
// samples (which carry no positional structure).
class TokenDecoder {
 public:
  TokenDecoder() = default;
  TokenDecoder(Rng& rng, const ModelConfig& cfg, int grid);

  // tokens: n*T ints (row-major patches); slots: [n, K, Dz].
  Tensor logits(const std::vector<int>& tokens, int n,
                const Tensor& slots) const;  // [n, T, V]
  Tensor nll(const std::vector<int>& tokens, int n, const Tensor& slots) const;
  // Autoregressive rollout; greedy when sample_rng is null.
  std::vector<int> rollout(const Tensor& slots, Rng* sample_rng) const;

  void collect(const std::string& prefix, ParamList& out) const;

  Tensor tok_embed;  // [V, Dd]
  Tensor pos_embed;  // [T, Dd]
  Tensor bos;        // [1, Dd]
  Linear slot_project;
  std::vector<TokenDecoderBlock> blocks;
  LayerNorm ln_f;
  Linear head;  // zero-init: uniform distribution at initialization
  int grid = 0, vocab = 0;
};

// ---- full model ----

struct SlotState {
  Tensor latents;   // [n, K, D]
  Tensor contexts;  // [n, K, Dc]
  int64_t step = 0;

  int batch() const { return latents.shape()[0]; }
  int slots() const { return latents.shape()[1]; }
};

struct StepCache {
  AttentionResult attn;
  Tensor y;                  // per-frame latents [n, K, D]
  Tensor prev_latents;       // latents the prior conditions on
  DiagonalGaussian posterior;
};

class VoNet {
 public:
  VoNet(const ModelConfig& cfg, int frame_h, int frame_w, uint64_t seed);

  SlotState initial_state(int n, int slots, Rng& rng) const;
  SlotState state_from_latents(const Tensor& latents, int64_t step) const;
  std::pair<SlotState, StepCache> unroll_step(const SlotState& state,
                                              const Tensor& frames,
                                              const AblationFlags& flags) const;

  ParamList params() const;

  ModelConfig cfg;
  int frame_h = 0, frame_w = 0;
  Backbone backbone;
  ParallelAttention attention;
  SlotDynamics dynamics;
  SequentialVae vae;
  Dvae dvae;
  TokenDecoder token_decoder;
};

}  // namespace vonet
