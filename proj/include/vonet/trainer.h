#pragma once

#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "vonet/config.h"
#include "vonet/dataset.h"
#include "vonet/model.h"
#include "vonet/replay.h"

namespace vonet {

struct LossBreakdown {
  Real total = 0;
  Real nll = 0;
  Real aux = 0;  // dVAE reconstruction term
  std::vector<Real> kld_per_slot;

  Real kld_sum() const;
  Real kld_mean() const;
};

struct LossResult {
  Tensor loss;  // scalar graph root
  LossBreakdown breakdown;
  SlotState final_state;
  std::vector<StepCache> caches;
  std::vector<DiagonalGaussian> priors;  // one per step
};

// Unrolls a segment, assembling nll + beta * sum_k kld + dvae aux.
// Rows flagged for reset are seeded by init_slots in-graph (noise from
// rng); posterior samples and gumbel noise also draw from rng.
LossResult compute_loss(const VoNet& model, const SampledBatch& batch,
                        const TrainConfig& cfg, Real beta, Real tau, Rng& rng);

// ---- checkpoints ----

struct Checkpoint {
  TrainConfig cfg;
  int frame_h = 0, frame_w = 0;
  uint64_t update = 0;
  uint64_t digest = 0;
};

void save_checkpoint(const std::string& path, const VoNet& model,
                     const TrainConfig& cfg, uint64_t update);
// Rebuilds the model recorded in the file; throws on digest mismatch with
// `expected_cfg` when provided.
std::pair<Checkpoint, std::unique_ptr<VoNet>> load_checkpoint(
    const std::string& path, const TrainConfig* expected_cfg = nullptr);

// ---- training loop ----

struct TrainHistory {
  std::vector<LossBreakdown> steps;
  std::vector<Real> grad_norms;       // pre-clip values
  std::vector<Real> post_clip_norms;  // what the optimizer actually sees
  std::vector<std::string> checkpoints;
  std::string log_path;
  std::string final_checkpoint;
};

// Thrown when the loss goes non-finite; carries the diagnostic dump path.
struct TrainAbort : std::runtime_error {
  explicit TrainAbort(const std::string& msg, std::string dump)
      : std::runtime_error(msg), dump_path(std::move(dump)) {}
  std::string dump_path;
};

class Trainer {
 public:
  Trainer(TrainConfig cfg, const DatasetManifest& data,
          const std::string& out_dir);

  // Lockstep collect/update loop; `concurrent_collect` opts into parallel
  // stream collection (buffer appends stay serialized).
  TrainHistory run(bool concurrent_collect = false);

  VoNet& model() { return *model_; }
  ReplayBuffer& buffer() { return buffer_; }

 private:
  TrainConfig cfg_;
  const DatasetManifest& data_;
  std::string out_dir_;
  std::unique_ptr<VoNet> model_;
  ReplayBuffer buffer_;
  Collector collector_;
  Rng rng_;
};

}  // namespace vonet
