#pragma once

#include <cstdint>
#include <deque>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "vonet/dataset.h"
#include "vonet/model.h"
#include "vonet/rng.h"

namespace vonet {

// One stored step: the input frame plus the slot state from which that
// frame is processed. is_initial marks a video's first frame, whose
// stored state is replaced by a fresh draw at training time.
struct ReplayEntry {
  std::vector<uint8_t> frame;  // h*w*3
  std::vector<Real> latents;   // K*D per-trajectory latents (pre-frame)
  bool is_initial = false;
};

// A mini-batch of temporally contiguous segments. Rows flagged in
// `reset` ignore stored_latents and are seeded by init_slots in-graph.
struct SampledBatch {
  std::vector<Tensor> frames;  // segment_len tensors of [B, 3, h, w]
  Tensor stored_latents;       // [B, K, D], zeros where reset
  std::vector<char> reset;     // B flags
};

// Ring buffer of `width` independent video streams, each keeping the
// most recent `length` frames. Append and sample serialize on one lock
// so concurrent collectors never hand out torn segments.
class ReplayBuffer {
 public:
  ReplayBuffer(int width, int length, int frame_h, int frame_w, int slots,
               int slot_dim);

  void append(int stream, ReplayEntry entry);
  int64_t size() const;
  int64_t capacity() const {
    return static_cast<int64_t>(width_) * length_;
  }
  bool ready(int segment_len, int batch_size) const;

  // Uniform over all valid (stream, start) windows; a window is valid when
  // no entry after its first is a video start. Returns nullopt when the
  // buffer cannot yet serve the request.
  std::optional<SampledBatch> sample(int batch_size, int segment_len, Rng& rng,
                                     bool force_reset) const;

 private:
  int count_valid_starts(int segment_len) const;

  int width_, length_, frame_h_, frame_w_, slots_, slot_dim_;
  std::vector<std::deque<ReplayEntry>> streams_;
  mutable std::mutex mu_;
};

// Advances `width` video streams through the dataset with the latest
// parameters, storing (frame, state, flag) tuples. Streams are seeded
// deterministically, so any thread count yields the same buffer.
class Collector {
 public:
  Collector(const DatasetManifest& data, int width, int slots, uint64_t seed);

  // Each stream advances `steps` frames; entries appended in stream order.
  void collect(const VoNet& model, ReplayBuffer& buffer, int steps,
               int threads = 1);

 private:
  struct Stream {
    LabeledVideo video;
    int cursor = 0;
    Tensor latents;   // [1, K, D] values only
    Tensor contexts;  // [1, K, Dc]
    Rng rng{0};
    std::vector<ReplayEntry> pending;
  };

  void advance(const VoNet& model, Stream& s, int steps);
  void start_next_video(const VoNet& model, Stream& s);

  const DatasetManifest* data_;
  int slots_;
  std::vector<Stream> streams_;
};

}  // namespace vonet
