#include "vonet/dataset.h"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <thread>

#include <json.hpp>

#include "vonet/rng.h"

namespace fs = std::filesystem;
using nlohmann::json;

namespace vonet {

// ---- PNG I/O ----

void save_png(const std::string& path, const Image8& img) {
  cv::Mat m(img.h, img.w, CV_8UC3);
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x) {
      const uint8_t* p = img.px(y, x);
      m.at<cv::Vec3b>(y, x) = cv::Vec3b(p[2], p[1], p[0]);  // RGB -> BGR
    }
  if (!cv::imwrite(path, m))
    throw std::runtime_error("failed to write png: " + path);
}

void save_png(const std::string& path, const Mask16& mask) {
  cv::Mat m(mask.h, mask.w, CV_16UC1);
  for (int y = 0; y < mask.h; ++y)
    for (int x = 0; x < mask.w; ++x) m.at<uint16_t>(y, x) = mask.at(y, x);
  if (!cv::imwrite(path, m))
    throw std::runtime_error("failed to write png: " + path);
}

Image8 load_image_png(const std::string& path) {
  cv::Mat m = cv::imread(path, cv::IMREAD_COLOR);
  if (m.empty()) throw std::runtime_error("missing or unreadable png: " + path);
  Image8 img;
  img.h = m.rows;
  img.w = m.cols;
  img.rgb.resize(static_cast<size_t>(m.rows) * m.cols * 3);
  for (int y = 0; y < m.rows; ++y)
    for (int x = 0; x < m.cols; ++x) {
      cv::Vec3b v = m.at<cv::Vec3b>(y, x);
      uint8_t* p = img.px(y, x);
      p[0] = v[2];
      p[1] = v[1];
      p[2] = v[0];
    }
  return img;
}

Mask16 load_mask_png(const std::string& path) {
  cv::Mat m = cv::imread(path, cv::IMREAD_UNCHANGED);
  if (m.empty()) throw std::runtime_error("missing or unreadable png: " + path);
  if (m.type() != CV_16UC1)
    throw std::runtime_error("mask png is not 16-bit single channel: " + path);
  Mask16 mask;
  mask.h = m.rows;
  mask.w = m.cols;
  mask.id.resize(static_cast<size_t>(m.rows) * m.cols);
  for (int y = 0; y < m.rows; ++y)
    for (int x = 0; x < m.cols; ++x) mask.at(y, x) = m.at<uint16_t>(y, x);
  return mask;
}

Tensor frames_to_tensor(const std::vector<const Image8*>& frames) {
  if (frames.empty()) throw std::invalid_argument("frames_to_tensor: empty batch");
  int h = frames[0]->h, w = frames[0]->w;
  int n = static_cast<int>(frames.size());
  Tensor t = Tensor::make({n, 3, h, w});
  Real* d = t.data();
  for (int i = 0; i < n; ++i) {
    const Image8& f = *frames[i];
    if (f.h != h || f.w != w)
      throw std::invalid_argument("frames_to_tensor: inconsistent sizes");
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          d[((static_cast<int64_t>(i) * 3 + c) * h + y) * w + x] =
              f.rgb[(y * w + x) * 3 + c] / 255.0;
  }
  return t;
}

Tensor frame_to_tensor(const Image8& frame) {
  Tensor t = frames_to_tensor({&frame});
  return reshape(t, {3, frame.h, frame.w});
}

Image8 tensor_to_frame(const Tensor& t) {
  if (t.ndim() != 3 || t.shape()[0] != 3)
    throw std::invalid_argument("tensor_to_frame: expected [3, h, w]");
  Image8 img;
  img.h = t.shape()[1];
  img.w = t.shape()[2];
  img.rgb.resize(static_cast<size_t>(img.h) * img.w * 3);
  const Real* d = t.data();
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < img.h; ++y)
      for (int x = 0; x < img.w; ++x) {
        Real v = d[(static_cast<int64_t>(c) * img.h + y) * img.w + x];
        v = std::min(1.0, std::max(0.0, v));
        img.rgb[(y * img.w + x) * 3 + c] = static_cast<uint8_t>(
            std::lround(v * 255.0));
      }
  return img;
}

// ---- generator ----

void DatasetSpec::validate() const {
  if (num_videos < 0) throw std::invalid_argument("num_videos must be >= 0");
  if (frames_per_video < 1)
    throw std::invalid_argument("frames_per_video must be >= 1");
  if (height < 16 || width < 16)
    throw std::invalid_argument("height and width must be >= 16");
  if (shapes_min < 0 || shapes_max < shapes_min)
    throw std::invalid_argument("invalid shapes_per_video range");
  if (velocity_min < 0 || velocity_max < velocity_min)
    throw std::invalid_argument("invalid velocity range");
  for (const auto& k : shape_kinds)
    if (k != "circle" && k != "square" && k != "triangle")
      throw std::invalid_argument("unknown shape kind: " + k);
  if (shape_kinds.empty() && shapes_max > 0)
    throw std::invalid_argument("no shape kinds configured");
}

namespace {

enum class Kind { Circle, Square, Triangle };

struct MovingShape {
  Kind kind;
  double cx, cy;    // center, continuous coordinates
  double vx, vy;    // pixels per frame
  double radius;    // bounding radius; shapes stay inside the frame
  uint8_t color[3];
};

bool inside(const MovingShape& s, double px, double py) {
  double dx = px - s.cx, dy = py - s.cy;
  switch (s.kind) {
    case Kind::Circle:
      return dx * dx + dy * dy <= s.radius * s.radius;
    case Kind::Square: {
      double hs = s.radius * 0.78;
      return std::fabs(dx) <= hs && std::fabs(dy) <= hs;
    }
    case Kind::Triangle: {
      // upright triangle inscribed in the bounding circle
      double ax = 0, ay = -s.radius;
      double bx = -0.866 * s.radius, by = 0.5 * s.radius;
      double cx2 = 0.866 * s.radius, cy2 = 0.5 * s.radius;
      auto side = [&](double x1, double y1, double x2, double y2) {
        return (x2 - x1) * (dy - y1) - (y2 - y1) * (dx - x1);
      };
      double s1 = side(ax, ay, bx, by);
      double s2 = side(bx, by, cx2, cy2);
      double s3 = side(cx2, cy2, ax, ay);
      return (s1 >= 0 && s2 >= 0 && s3 >= 0) || (s1 <= 0 && s2 <= 0 && s3 <= 0);
    }
  }
  return false;
}

// Reflects the center into [lo, hi], flipping the velocity on each bounce.
void bounce(double& p, double& v, double lo, double hi) {
  if (hi <= lo) {  // no room to move
    p = (lo + hi) / 2;
    v = 0;
    return;
  }
  while (p < lo || p > hi) {
    if (p < lo) {
      p = 2 * lo - p;
      v = -v;
    } else {
      p = 2 * hi - p;
      v = -v;
    }
  }
}

void render_video(const DatasetSpec& spec, uint64_t video_index, Rng rng,
                  const std::string& dir) {
  int H = spec.height, W = spec.width;
  uint8_t bg[3];
  for (auto& c : bg)
    c = static_cast<uint8_t>(20 + rng.uniform_int(216));  // avoid extremes

  int count = spec.shapes_min + rng.uniform_int(spec.shapes_max - spec.shapes_min + 1);
  std::vector<MovingShape> shapes;
  double rmin = std::min(H, W) / 10.0, rmax = std::min(H, W) / 5.0;
  for (int i = 0; i < count; ++i) {
    MovingShape s;
    s.kind = [&] {
      const std::string& k =
          spec.shape_kinds[rng.uniform_int(static_cast<int>(spec.shape_kinds.size()))];
      if (k == "circle") return Kind::Circle;
      if (k == "square") return Kind::Square;
      return Kind::Triangle;
    }();
    s.radius = rng.uniform(rmin, rmax);
    s.cx = rng.uniform(s.radius, W - 1 - s.radius);
    s.cy = rng.uniform(s.radius, H - 1 - s.radius);
    double speed = rng.uniform(spec.velocity_min, spec.velocity_max);
    double angle = rng.uniform(0, 2 * M_PI);
    s.vx = speed * std::cos(angle);
    s.vy = speed * std::sin(angle);
    // colors stay away from the background so objects remain visible
    for (int attempt = 0; attempt < 64; ++attempt) {
      for (auto& c : s.color) c = static_cast<uint8_t>(rng.uniform_int(256));
      int d = 0;
      for (int c = 0; c < 3; ++c) d = std::max(d, std::abs(int(s.color[c]) - int(bg[c])));
      if (d > 60) break;
    }
    shapes.push_back(s);
  }

  for (int t = 0; t < spec.frames_per_video; ++t) {
    Image8 frame;
    frame.h = H;
    frame.w = W;
    frame.rgb.resize(static_cast<size_t>(H) * W * 3);
    for (int p = 0; p < H * W; ++p)
      for (int c = 0; c < 3; ++c) frame.rgb[p * 3 + c] = bg[c];
    Mask16 mask;
    mask.h = H;
    mask.w = W;
    mask.id.assign(static_cast<size_t>(H) * W, 0);

    // painter's order: shape i occludes all shapes spawned before it
    for (int i = 0; i < count; ++i) {
      const MovingShape& s = shapes[i];
      int y0 = std::max(0, static_cast<int>(std::floor(s.cy - s.radius)));
      int y1 = std::min(H - 1, static_cast<int>(std::ceil(s.cy + s.radius)));
      int x0 = std::max(0, static_cast<int>(std::floor(s.cx - s.radius)));
      int x1 = std::min(W - 1, static_cast<int>(std::ceil(s.cx + s.radius)));
      for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x)
          if (inside(s, x, y)) {
            uint8_t* p = frame.px(y, x);
            p[0] = s.color[0];
            p[1] = s.color[1];
            p[2] = s.color[2];
            mask.at(y, x) = static_cast<uint16_t>(i + 1);
          }
    }

    save_png(dir + "/frame_" + std::to_string(t) + ".png", frame);
    save_png(dir + "/mask_" + std::to_string(t) + ".png", mask);

    for (auto& s : shapes) {
      s.cx += s.vx;
      s.cy += s.vy;
      bounce(s.cx, s.vx, s.radius, W - 1 - s.radius);
      bounce(s.cy, s.vy, s.radius, H - 1 - s.radius);
    }
  }
  (void)video_index;
}

json spec_to_json(const DatasetSpec& s) {
  return json{{"num_videos", s.num_videos},
              {"frames_per_video", s.frames_per_video},
              {"height", s.height},
              {"width", s.width},
              {"shapes_min", s.shapes_min},
              {"shapes_max", s.shapes_max},
              {"shape_kinds", s.shape_kinds},
              {"velocity_min", s.velocity_min},
              {"velocity_max", s.velocity_max},
              {"seed", s.seed}};
}

DatasetSpec spec_from_json(const json& j) {
  DatasetSpec s;
  s.num_videos = j.at("num_videos");
  s.frames_per_video = j.at("frames_per_video");
  s.height = j.at("height");
  s.width = j.at("width");
  s.shapes_min = j.at("shapes_min");
  s.shapes_max = j.at("shapes_max");
  s.shape_kinds = j.at("shape_kinds").get<std::vector<std::string>>();
  s.velocity_min = j.at("velocity_min");
  s.velocity_max = j.at("velocity_max");
  s.seed = j.at("seed");
  return s;
}

}  // namespace

DatasetManifest generate_dataset(const DatasetSpec& spec,
                                 const std::string& root_dir, int threads) {
  spec.validate();
  std::error_code ec;
  fs::create_directories(root_dir, ec);
  if (ec || !fs::is_directory(root_dir))
    throw std::runtime_error("cannot create dataset directory: " + root_dir);

  DatasetManifest manifest;
  manifest.spec = spec;
  manifest.root = root_dir;
  for (int v = 0; v < spec.num_videos; ++v) {
    VideoEntry e;
    e.path = "video_" + std::to_string(v);
    e.frames = spec.frames_per_video;
    e.height = spec.height;
    e.width = spec.width;
    manifest.videos.push_back(e);
    fs::create_directories(fs::path(root_dir) / e.path);
  }

  Rng base(spec.seed);
  // Per-video RNG streams are forked up-front so the output is identical
  // for any thread count.
  std::vector<Rng> streams;
  streams.reserve(spec.num_videos);
  for (int v = 0; v < spec.num_videos; ++v) streams.push_back(base.fork(v));

  std::atomic<int> next{0};
  auto worker = [&] {
    for (;;) {
      int v = next.fetch_add(1);
      if (v >= spec.num_videos) break;
      render_video(spec, v, streams[v],
                   (fs::path(root_dir) / manifest.videos[v].path).string());
    }
  };
  int nthreads = std::max(1, std::min(threads, spec.num_videos));
  if (nthreads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int i = 0; i < nthreads; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  json j;
  j["version"] = manifest.version;
  j["spec"] = spec_to_json(spec);
  j["videos"] = json::array();
  for (const auto& e : manifest.videos)
    j["videos"].push_back(json{{"path", e.path},
                               {"frames", e.frames},
                               {"height", e.height},
                               {"width", e.width}});
  std::ofstream out(fs::path(root_dir) / "manifest");
  if (!out) throw std::runtime_error("cannot write manifest in " + root_dir);
  out << j.dump(2) << "\n";
  return manifest;
}

DatasetManifest load_manifest(const std::string& root_dir) {
  std::ifstream in(fs::path(root_dir) / "manifest");
  if (!in)
    throw std::runtime_error("missing manifest: " +
                             (fs::path(root_dir) / "manifest").string());
  json j = json::parse(in);
  DatasetManifest m;
  m.version = j.at("version");
  if (m.version != 1)
    throw std::runtime_error("unsupported manifest version " +
                             std::to_string(m.version));
  m.spec = spec_from_json(j.at("spec"));
  m.root = root_dir;
  for (const auto& je : j.at("videos")) {
    VideoEntry e;
    e.path = je.at("path");
    e.frames = je.at("frames");
    e.height = je.at("height");
    e.width = je.at("width");
    m.videos.push_back(e);
  }
  return m;
}

LabeledVideo load_video(const DatasetManifest& manifest, int index) {
  if (index < 0 || index >= static_cast<int>(manifest.videos.size()))
    throw std::out_of_range("video index " + std::to_string(index) +
                            " out of range (have " +
                            std::to_string(manifest.videos.size()) + ")");
  const VideoEntry& e = manifest.videos[index];
  LabeledVideo v;
  for (int t = 0; t < e.frames; ++t) {
    fs::path dir = fs::path(manifest.root) / e.path;
    Image8 frame = load_image_png((dir / ("frame_" + std::to_string(t) + ".png")).string());
    Mask16 mask = load_mask_png((dir / ("mask_" + std::to_string(t) + ".png")).string());
    if (frame.h != e.height || frame.w != e.width || mask.h != e.height ||
        mask.w != e.width)
      throw std::runtime_error("video " + std::to_string(index) +
                               " frame " + std::to_string(t) +
                               " does not match manifest size");
    v.frames.push_back(std::move(frame));
    v.gt_masks.push_back(std::move(mask));
  }
  return v;
}

}  // namespace vonet
