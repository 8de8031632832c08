#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vonet/tensor.h"

namespace vonet {

struct Image8 {
  int h = 0, w = 0;
  std::vector<uint8_t> rgb;  // h*w*3, row-major

  uint8_t* px(int y, int x) { return rgb.data() + (y * w + x) * 3; }
  const uint8_t* px(int y, int x) const { return rgb.data() + (y * w + x) * 3; }
};

struct Mask16 {
  int h = 0, w = 0;
  std::vector<uint16_t> id;  // h*w, 0 = background

  uint16_t& at(int y, int x) { return id[y * w + x]; }
  uint16_t at(int y, int x) const { return id[y * w + x]; }
};

void save_png(const std::string& path, const Image8& img);
void save_png(const std::string& path, const Mask16& mask);
Image8 load_image_png(const std::string& path);
Mask16 load_mask_png(const std::string& path);

// Frames stacked to [n, 3, h, w] doubles in [0, 1].
Tensor frames_to_tensor(const std::vector<const Image8*>& frames);
Tensor frame_to_tensor(const Image8& frame);
Image8 tensor_to_frame(const Tensor& t);  // [3, h, w] -> clamped 8-bit

// ---- synthetic moving-shapes dataset ----

struct DatasetSpec {
  int num_videos = 0;
  int frames_per_video = 24;
  int height = 64;
  int width = 64;
  int shapes_min = 2;
  int shapes_max = 3;
  std::vector<std::string> shape_kinds = {"circle", "square", "triangle"};
  double velocity_min = 0.5;
  double velocity_max = 2.0;
  uint64_t seed = 0;

  void validate() const;
};

struct VideoEntry {
  std::string path;  // directory relative to the dataset root
  int frames = 0;
  int height = 0, width = 0;
};

struct DatasetManifest {
  int version = 1;
  DatasetSpec spec;
  std::vector<VideoEntry> videos;
  std::string root;  // absolute or cwd-relative directory of the dataset
};

struct LabeledVideo {
  std::vector<Image8> frames;
  std::vector<Mask16> gt_masks;
};

// Renders every video under root_dir and writes `<root>/manifest`.
// Per-video work is independent; worker threads pull from a shared index.
DatasetManifest generate_dataset(const DatasetSpec& spec,
                                 const std::string& root_dir, int threads = 1);
DatasetManifest load_manifest(const std::string& root_dir);
LabeledVideo load_video(const DatasetManifest& manifest, int index);

}  // namespace vonet
