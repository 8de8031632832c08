#include "vonet/replay.h"

#include <stdexcept>

#include "vonet/threads.h"

namespace vonet {

ReplayBuffer::ReplayBuffer(int width, int length, int frame_h, int frame_w,
                           int slots, int slot_dim)
    : width_(width), length_(length), frame_h_(frame_h), frame_w_(frame_w),
      slots_(slots), slot_dim_(slot_dim), streams_(width) {
  if (width < 1 || length < 1)
    throw std::invalid_argument("replay buffer: width and length must be >= 1");
}

void ReplayBuffer::append(int stream, ReplayEntry entry) {
  if (stream < 0 || stream >= width_)
    throw std::out_of_range("replay buffer: stream index");
  std::lock_guard<std::mutex> lock(mu_);
  auto& q = streams_[stream];
  q.push_back(std::move(entry));
  while (static_cast<int>(q.size()) > length_) q.pop_front();
}

int64_t ReplayBuffer::size() const {
  std::lock_guard<std::mutex> lock(mu_);
  int64_t n = 0;
  for (const auto& q : streams_) n += static_cast<int64_t>(q.size());
  return n;
}

int ReplayBuffer::count_valid_starts(int segment_len) const {
  int valid = 0;
  for (const auto& q : streams_) {
    int n = static_cast<int>(q.size());
    for (int s = 0; s + segment_len <= n; ++s) {
      bool ok = true;
      for (int j = 1; j < segment_len; ++j)
        if (q[s + j].is_initial) {
          ok = false;
          break;
        }
      if (ok) ++valid;
    }
  }
  return valid;
}

bool ReplayBuffer::ready(int segment_len, int batch_size) const {
  std::lock_guard<std::mutex> lock(mu_);
  return count_valid_starts(segment_len) >= batch_size;
}

std::optional<SampledBatch> ReplayBuffer::sample(int batch_size, int segment_len,
                                                 Rng& rng,
                                                 bool force_reset) const {
  std::lock_guard<std::mutex> lock(mu_);
  std::vector<std::pair<int, int>> starts;  // (stream, offset)
  for (int w = 0; w < width_; ++w) {
    const auto& q = streams_[w];
    int n = static_cast<int>(q.size());
    for (int s = 0; s + segment_len <= n; ++s) {
      bool ok = true;
      for (int j = 1; j < segment_len; ++j)
        if (q[s + j].is_initial) {
          ok = false;
          break;
        }
      if (ok) starts.emplace_back(w, s);
    }
  }
  if (static_cast<int>(starts.size()) < batch_size) return std::nullopt;

  SampledBatch batch;
  batch.stored_latents = Tensor::zeros({batch_size, slots_, slot_dim_});
  batch.reset.assign(batch_size, 0);

  std::vector<std::pair<int, int>> chosen(batch_size);
  for (int b = 0; b < batch_size; ++b)
    chosen[b] = starts[rng.uniform_int(static_cast<int>(starts.size()))];

  for (int b = 0; b < batch_size; ++b) {
    const auto& q = streams_[chosen[b].first];
    const ReplayEntry& first = q[chosen[b].second];
    bool reset = force_reset || first.is_initial;
    batch.reset[b] = reset ? 1 : 0;
    if (!reset)
      std::copy(first.latents.begin(), first.latents.end(),
                batch.stored_latents.data() +
                    static_cast<int64_t>(b) * slots_ * slot_dim_);
  }

  for (int t = 0; t < segment_len; ++t) {
    Tensor step = Tensor::make({batch_size, 3, frame_h_, frame_w_});
    Real* d = step.data();
    for (int b = 0; b < batch_size; ++b) {
      const auto& q = streams_[chosen[b].first];
      const ReplayEntry& e = q[chosen[b].second + t];
      for (int c = 0; c < 3; ++c)
        for (int p = 0; p < frame_h_ * frame_w_; ++p)
          d[((static_cast<int64_t>(b) * 3 + c) * frame_h_ * frame_w_) + p] =
              e.frame[static_cast<size_t>(p) * 3 + c] / 255.0;
    }
    batch.frames.push_back(step);
  }
  return batch;
}

// ---- collector ----

Collector::Collector(const DatasetManifest& data, int width, int slots,
                     uint64_t seed)
    : data_(&data), slots_(slots), streams_(width) {
  if (data.videos.empty())
    throw std::invalid_argument("collector: dataset has no videos");
  Rng base(seed ^ 0xc011ec70ULL);
  for (size_t i = 0; i < streams_.size(); ++i) {
    streams_[i].rng = base.fork(i);
    streams_[i].cursor = -1;  // forces a fresh video on first advance
  }
}

void Collector::start_next_video(const VoNet& model, Stream& s) {
  int idx = s.rng.uniform_int(static_cast<int>(data_->videos.size()));
  s.video = load_video(*data_, idx);
  s.cursor = 0;
  NoGradGuard ng;
  Tensor noise = Tensor::make({1, slots_, model.cfg.slot_dim});
  s.rng.fill_normal(noise.values().begin(), noise.values().end());
  s.latents = model.dynamics.init_slots(noise);
  s.contexts = model.dynamics.context(s.latents);
}

void Collector::advance(const VoNet& model, Stream& s, int steps) {
  NoGradGuard ng;
  for (int i = 0; i < steps; ++i) {
    if (s.cursor < 0 || s.cursor >= static_cast<int>(s.video.frames.size()))
      start_next_video(model, s);

    const Image8& frame = s.video.frames[s.cursor];
    ReplayEntry entry;
    entry.frame = frame.rgb;
    entry.latents.assign(s.latents.values().begin(), s.latents.values().end());
    entry.is_initial = (s.cursor == 0);
    s.pending.push_back(std::move(entry));

    SlotState state;
    state.latents = s.latents;
    state.contexts = s.contexts;
    state.step = s.cursor;
    Tensor ft = reshape(frame_to_tensor(frame), {1, 3, frame.h, frame.w});
    auto [next, cache] = model.unroll_step(state, ft, AblationFlags{});
    s.latents = next.latents;
    s.contexts = next.contexts;
    ++s.cursor;
  }
}

void Collector::collect(const VoNet& model, ReplayBuffer& buffer, int steps,
                        int threads) {
  int w = static_cast<int>(streams_.size());
  parallel_for_chunks(w, threads, [&](int begin, int end) {
    for (int i = begin; i < end; ++i) advance(model, streams_[i], steps);
  });
  // appending in stream order keeps the buffer content independent of
  // the thread count
  for (int i = 0; i < w; ++i) {
    for (auto& e : streams_[i].pending) buffer.append(i, std::move(e));
    streams_[i].pending.clear();
  }
}

}  // namespace vonet
