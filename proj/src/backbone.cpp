#include <stdexcept>

#include "vonet/model.h"

namespace vonet {

ResidualBlock::ResidualBlock(Rng& rng, int cin, int cout, int stride)
    : n1(cin), n2(cout) {
  conv1 = Conv2d(rng, cin, cout, 3, stride, 1, false);
  conv2 = Conv2d(rng, cout, cout, 3, 1, 1, false);
  if (stride != 1 || cin != cout) {
    shortcut = Conv2d(rng, cin, cout, 1, stride, 0, false);
    has_shortcut = true;
  }
}

Tensor ResidualBlock::forward(const Tensor& x) const {
  Tensor h = conv1.forward(relu(n1.forward(x)));
  h = conv2.forward(relu(n2.forward(h)));
  Tensor sc = has_shortcut ? shortcut.forward(x) : x;
  return add(sc, h);
}

void ResidualBlock::collect(const std::string& prefix, ParamList& out) const {
  n1.collect(prefix + ".n1", out);
  n2.collect(prefix + ".n2", out);
  conv1.collect(prefix + ".conv1", out);
  conv2.collect(prefix + ".conv2", out);
  if (has_shortcut) shortcut.collect(prefix + ".shortcut", out);
}

Tensor coord_grid(int h, int w) {
  Tensor g = Tensor::make({1, 4, h, w});
  Real* d = g.data();
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      Real fx = w > 1 ? static_cast<Real>(x) / (w - 1) : 0.0;
      Real fy = h > 1 ? static_cast<Real>(y) / (h - 1) : 0.0;
      d[0 * h * w + y * w + x] = fx;
      d[1 * h * w + y * w + x] = fy;
      d[2 * h * w + y * w + x] = 1.0 - fx;
      d[3 * h * w + y * w + x] = 1.0 - fy;
    }
  return g;
}

Backbone::Backbone(Rng& rng, const ModelConfig& cfg) {
  int ch = cfg.backbone_channels;
  blocks.emplace_back(rng, 3, ch, 2);
  for (int i = 1; i < cfg.backbone_blocks; ++i) blocks.emplace_back(rng, ch, ch, 1);
  proj = Conv2d(rng, ch, cfg.feature_channels, 1, 1, 0, true);
  pos = Conv2d(rng, 4, cfg.feature_channels, 1, 1, 0, false);
}

Tensor Backbone::forward(const Tensor& frames) const {
  if (frames.ndim() != 4 || frames.shape()[1] != 3)
    throw std::invalid_argument("backbone: expected [n,3,h,w] input");
  if (frames.shape()[2] % 2 != 0 || frames.shape()[3] % 2 != 0)
    throw std::invalid_argument("backbone: frame dims must be even");
  Tensor h = frames;
  for (const auto& b : blocks) h = b.forward(h);
  h = proj.forward(h);
  Tensor grid = coord_grid(h.shape()[2], h.shape()[3]);
  return add(h, pos.forward(grid));
}

void Backbone::collect(const std::string& prefix, ParamList& out) const {
  for (size_t i = 0; i < blocks.size(); ++i)
    blocks[i].collect(prefix + ".block" + std::to_string(i), out);
  proj.collect(prefix + ".proj", out);
  pos.collect(prefix + ".pos", out);
}

}  // namespace vonet
