#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace vonet {

// Architecture sizes. "desk" keeps everything CPU-testable, "full" is the
// large configuration, "toy" is small enough for finite-difference checks.
struct ModelConfig {
  // backbone: residual blocks (first stride 2) + 1x1 projection + pos embed
  int backbone_blocks = 3;
  int backbone_channels = 32;
  int feature_channels = 64;

  // parallel attention U-Net
  std::vector<int> unet_channels = {16, 32, 64};
  int bottleneck_dim = 128;  // bottleneck MLP width and mask-transformer d_model
  int mask_tf_blocks = 3;
  int mask_tf_heads = 3;

  // slot dynamics
  int slot_dim = 32;     // per-frame and per-trajectory latent size
  int context_dim = 32;  // context vector size
  int init_tf_blocks = 3;
  int init_tf_heads = 3;

  // sequential VAE
  int z_dim = 32;
  int prior_tf_blocks = 2;
  int prior_tf_heads = 3;

  // token decoder
  int vocab = 64;
  int dvae_downsample = 4;
  int dvae_channels = 32;
  int dec_layers = 2;
  int dec_heads = 2;
  int dec_dim = 64;

  static ModelConfig desk();
  static ModelConfig full();
  static ModelConfig toy();
  static ModelConfig named(const std::string& profile);
};

struct AblationFlags {
  bool wo_unet = false;
  double kl_scale_divisor = 1.0;  // KL-beta/W variant
  bool wo_replay = false;
  bool wo_klbal = false;

  // Parses a comma-separated selector: wo-unet | kl-div:<W> | wo-replay |
  // wo-klbal. Throws on anything else.
  static AblationFlags parse(const std::string& selector);
  std::string describe() const;
};

struct TrainConfig {
  std::string profile = "desk";
  ModelConfig model = ModelConfig::desk();

  int slots = 5;
  int segment_len = 3;
  int batch_size = 8;
  int total_updates = 2000;

  double kappa = 0.7;
  double beta_end = -1.0;  // resolved to 20 / z_dim when negative
  double lr_low = 1e-5;
  double lr_high = 1e-4;
  double grad_clip = 0.1;

  int replay_length = 1000;  // frames kept per stream
  int replay_width = 16;     // parallel video streams
  int collect_steps = 2;     // frames each stream advances per update

  double tau_start = 1.0;
  double tau_end = 0.1;
  double tau_anneal_frac = 0.15;

  // schedule breakpoints as fractions of total_updates (at 150k updates:
  // 5k warmup, hold until 100k, beta ramp over the first 50k)
  double warmup_frac = 1.0 / 30.0;
  double hold_frac = 2.0 / 3.0;
  double beta_ramp_frac = 1.0 / 3.0;

  uint64_t seed = 0;
  int checkpoint_every = 0;  // 0 means every 10% of total updates
  AblationFlags ablation;

  double resolved_beta_end() const;
  double beta_at(int64_t update) const;
  double lr_at(int64_t update) const;
  double tau_at(int64_t update) const;
  void validate() const;
};

// INI-style config with [model], [train] and [ablation] sections. Unknown
// keys or sections are rejected.
TrainConfig parse_train_config(const std::string& text);
TrainConfig load_train_config(const std::string& path);
std::string serialize_config(const TrainConfig& cfg);
uint64_t config_digest(const TrainConfig& cfg);

}  // namespace vonet
