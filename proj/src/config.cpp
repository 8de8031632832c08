#include "vonet/config.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

namespace vonet {

ModelConfig ModelConfig::desk() { return ModelConfig{}; }

ModelConfig ModelConfig::full() {
  ModelConfig m;
  m.backbone_blocks = 5;
  m.backbone_channels = 64;
  m.feature_channels = 128;
  m.unet_channels = {32, 64, 64, 128, 128};
  m.bottleneck_dim = 512;
  m.slot_dim = 128;
  m.context_dim = 128;
  m.z_dim = 128;
  m.vocab = 4096;
  m.dvae_channels = 64;
  m.dec_layers = 4;
  m.dec_heads = 4;
  m.dec_dim = 192;
  return m;
}

ModelConfig ModelConfig::toy() {
  ModelConfig m;
  m.backbone_blocks = 2;
  m.backbone_channels = 8;
  m.feature_channels = 16;
  m.unet_channels = {8, 16};
  m.bottleneck_dim = 32;
  m.slot_dim = 16;
  m.context_dim = 16;
  m.z_dim = 16;
  m.vocab = 16;
  m.dvae_channels = 8;
  m.dec_layers = 1;
  m.dec_heads = 1;
  m.dec_dim = 16;
  return m;
}

ModelConfig ModelConfig::named(const std::string& profile) {
  if (profile == "desk") return desk();
  if (profile == "full") return full();
  if (profile == "toy") return toy();
  throw std::invalid_argument("unknown model profile: " + profile);
}

AblationFlags AblationFlags::parse(const std::string& selector) {
  AblationFlags f;
  std::stringstream ss(selector);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty() || item == "none") continue;
    if (item == "wo-unet") {
      f.wo_unet = true;
    } else if (item == "wo-replay") {
      f.wo_replay = true;
    } else if (item == "wo-klbal") {
      f.wo_klbal = true;
    } else if (item.rfind("kl-div:", 0) == 0) {
      f.kl_scale_divisor = std::stod(item.substr(7));
      if (f.kl_scale_divisor <= 0)
        throw std::invalid_argument("kl-div divisor must be positive");
    } else {
      throw std::invalid_argument("unknown ablation: " + item);
    }
  }
  return f;
}

std::string AblationFlags::describe() const {
  std::string s;
  if (wo_unet) s += "wo-unet,";
  if (kl_scale_divisor != 1.0)
    s += "kl-div:" + std::to_string(kl_scale_divisor) + ",";
  if (wo_replay) s += "wo-replay,";
  if (wo_klbal) s += "wo-klbal,";
  if (!s.empty()) s.pop_back();
  return s.empty() ? "none" : s;
}

double TrainConfig::resolved_beta_end() const {
  double b = beta_end >= 0 ? beta_end : 20.0 / model.z_dim;
  return b / ablation.kl_scale_divisor;
}

double TrainConfig::beta_at(int64_t update) const {
  int64_t ramp = std::max<int64_t>(1, static_cast<int64_t>(
                                          std::llround(beta_ramp_frac * total_updates)));
  double frac = std::min(1.0, static_cast<double>(update) / ramp);
  return frac * resolved_beta_end();
}

double TrainConfig::lr_at(int64_t update) const {
  int64_t warm = std::max<int64_t>(
      1, static_cast<int64_t>(std::llround(warmup_frac * total_updates)));
  int64_t hold_end = static_cast<int64_t>(std::llround(hold_frac * total_updates));
  if (update <= warm)
    return lr_low + (lr_high - lr_low) * static_cast<double>(update) / warm;
  if (update <= hold_end) return lr_high;
  int64_t tail = std::max<int64_t>(1, total_updates - hold_end);
  double frac = std::min(1.0, static_cast<double>(update - hold_end) / tail);
  return lr_high + (lr_low - lr_high) * frac;
}

double TrainConfig::tau_at(int64_t update) const {
  int64_t ramp = std::max<int64_t>(
      1, static_cast<int64_t>(std::llround(tau_anneal_frac * total_updates)));
  double frac = std::min(1.0, static_cast<double>(update) / ramp);
  return tau_start + (tau_end - tau_start) * frac;
}

void TrainConfig::validate() const {
  if (slots < 1) throw std::invalid_argument("slots must be >= 1");
  if (segment_len < 1) throw std::invalid_argument("segment_len must be >= 1");
  if (kappa < 0 || kappa > 1) throw std::invalid_argument("kappa must be in [0,1]");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (total_updates < 1) throw std::invalid_argument("total_updates must be >= 1");
  if (replay_width < 1) throw std::invalid_argument("replay_width must be >= 1");
  if (replay_length < segment_len)
    throw std::invalid_argument("replay_length must cover a segment");
}

namespace {

struct KV {
  std::map<std::string, std::map<std::string, std::string>> sections;
};

KV parse_ini(const std::string& text) {
  KV kv;
  std::string section = "train";
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  auto trim = [](std::string s) {
    size_t a = s.find_first_not_of(" \t\r");
    size_t b = s.find_last_not_of(" \t\r");
    return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t.front() == '[' && t.back() == ']') {
      section = trim(t.substr(1, t.size() - 2));
      continue;
    }
    size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line " + std::to_string(lineno) +
                                  ": expected key = value");
    kv.sections[section][trim(t.substr(0, eq))] = trim(t.substr(eq + 1));
  }
  return kv;
}

}  // namespace

TrainConfig parse_train_config(const std::string& text) {
  KV kv = parse_ini(text);
  TrainConfig cfg;

  auto take = [](std::map<std::string, std::string>& m, const std::string& key,
                 auto&& fn) {
    auto it = m.find(key);
    if (it != m.end()) {
      fn(it->second);
      m.erase(it);
    }
  };
  auto to_i = [](const std::string& v) { return std::stoi(v); };
  auto to_d = [](const std::string& v) { return std::stod(v); };

  for (auto& [name, section] : kv.sections) {
    if (name == "train") {
      take(section, "profile", [&](const std::string& v) {
        cfg.profile = v;
        cfg.model = ModelConfig::named(v);
      });
      take(section, "slots", [&](const std::string& v) { cfg.slots = to_i(v); });
      take(section, "segment_len",
           [&](const std::string& v) { cfg.segment_len = to_i(v); });
      take(section, "batch_size",
           [&](const std::string& v) { cfg.batch_size = to_i(v); });
      take(section, "total_updates",
           [&](const std::string& v) { cfg.total_updates = to_i(v); });
      take(section, "kappa", [&](const std::string& v) { cfg.kappa = to_d(v); });
      take(section, "beta_end",
           [&](const std::string& v) { cfg.beta_end = to_d(v); });
      take(section, "lr_low", [&](const std::string& v) { cfg.lr_low = to_d(v); });
      take(section, "lr_high",
           [&](const std::string& v) { cfg.lr_high = to_d(v); });
      take(section, "grad_clip",
           [&](const std::string& v) { cfg.grad_clip = to_d(v); });
      take(section, "seed",
           [&](const std::string& v) { cfg.seed = std::stoull(v); });
      take(section, "checkpoint_every",
           [&](const std::string& v) { cfg.checkpoint_every = to_i(v); });
      take(section, "warmup_frac",
           [&](const std::string& v) { cfg.warmup_frac = to_d(v); });
      take(section, "hold_frac",
           [&](const std::string& v) { cfg.hold_frac = to_d(v); });
      take(section, "beta_ramp_frac",
           [&](const std::string& v) { cfg.beta_ramp_frac = to_d(v); });
      take(section, "tau_start",
           [&](const std::string& v) { cfg.tau_start = to_d(v); });
      take(section, "tau_end",
           [&](const std::string& v) { cfg.tau_end = to_d(v); });
      take(section, "tau_anneal_frac",
           [&](const std::string& v) { cfg.tau_anneal_frac = to_d(v); });
      take(section, "replay_length",
           [&](const std::string& v) { cfg.replay_length = to_i(v); });
      take(section, "replay_width",
           [&](const std::string& v) { cfg.replay_width = to_i(v); });
      take(section, "collect_steps",
           [&](const std::string& v) { cfg.collect_steps = to_i(v); });
    } else if (name == "model") {
      ModelConfig& m = cfg.model;
      take(section, "backbone_blocks",
           [&](const std::string& v) { m.backbone_blocks = to_i(v); });
      take(section, "backbone_channels",
           [&](const std::string& v) { m.backbone_channels = to_i(v); });
      take(section, "feature_channels",
           [&](const std::string& v) { m.feature_channels = to_i(v); });
      take(section, "bottleneck_dim",
           [&](const std::string& v) { m.bottleneck_dim = to_i(v); });
      take(section, "slot_dim",
           [&](const std::string& v) { m.slot_dim = to_i(v); });
      take(section, "context_dim",
           [&](const std::string& v) { m.context_dim = to_i(v); });
      take(section, "z_dim", [&](const std::string& v) { m.z_dim = to_i(v); });
      take(section, "vocab", [&](const std::string& v) { m.vocab = to_i(v); });
      take(section, "dec_dim",
           [&](const std::string& v) { m.dec_dim = to_i(v); });
      take(section, "dec_layers",
           [&](const std::string& v) { m.dec_layers = to_i(v); });
      take(section, "dec_heads",
           [&](const std::string& v) { m.dec_heads = to_i(v); });
      take(section, "unet_channels", [&](const std::string& v) {
        m.unet_channels.clear();
        std::stringstream ss(v);
        std::string part;
        while (std::getline(ss, part, ','))
          m.unet_channels.push_back(to_i(part));
      });
    } else if (name == "ablation") {
      take(section, "flags", [&](const std::string& v) {
        cfg.ablation = AblationFlags::parse(v);
      });
    } else {
      throw std::invalid_argument("unknown config section: [" + name + "]");
    }
    if (!section.empty())
      throw std::invalid_argument("unknown config key: [" + name + "] " +
                                  section.begin()->first);
  }
  cfg.validate();
  return cfg;
}

TrainConfig load_train_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_train_config(ss.str());
}

std::string serialize_config(const TrainConfig& cfg) {
  std::ostringstream os;
  os.precision(17);
  os << "[train]\n";
  os << "profile = " << cfg.profile << "\n";
  os << "slots = " << cfg.slots << "\n";
  os << "segment_len = " << cfg.segment_len << "\n";
  os << "batch_size = " << cfg.batch_size << "\n";
  os << "total_updates = " << cfg.total_updates << "\n";
  os << "kappa = " << cfg.kappa << "\n";
  os << "beta_end = " << cfg.beta_end << "\n";
  os << "lr_low = " << cfg.lr_low << "\n";
  os << "lr_high = " << cfg.lr_high << "\n";
  os << "grad_clip = " << cfg.grad_clip << "\n";
  os << "seed = " << cfg.seed << "\n";
  os << "checkpoint_every = " << cfg.checkpoint_every << "\n";
  os << "warmup_frac = " << cfg.warmup_frac << "\n";
  os << "hold_frac = " << cfg.hold_frac << "\n";
  os << "beta_ramp_frac = " << cfg.beta_ramp_frac << "\n";
  os << "tau_start = " << cfg.tau_start << "\n";
  os << "tau_end = " << cfg.tau_end << "\n";
  os << "tau_anneal_frac = " << cfg.tau_anneal_frac << "\n";
  os << "replay_length = " << cfg.replay_length << "\n";
  os << "replay_width = " << cfg.replay_width << "\n";
  os << "collect_steps = " << cfg.collect_steps << "\n";
  os << "[model]\n";
  const ModelConfig& m = cfg.model;
  os << "backbone_blocks = " << m.backbone_blocks << "\n";
  os << "backbone_channels = " << m.backbone_channels << "\n";
  os << "feature_channels = " << m.feature_channels << "\n";
  os << "unet_channels = ";
  for (size_t i = 0; i < m.unet_channels.size(); ++i)
    os << (i ? "," : "") << m.unet_channels[i];
  os << "\n";
  os << "bottleneck_dim = " << m.bottleneck_dim << "\n";
  os << "slot_dim = " << m.slot_dim << "\n";
  os << "context_dim = " << m.context_dim << "\n";
  os << "z_dim = " << m.z_dim << "\n";
  os << "vocab = " << m.vocab << "\n";
  os << "dec_dim = " << m.dec_dim << "\n";
  os << "dec_layers = " << m.dec_layers << "\n";
  os << "dec_heads = " << m.dec_heads << "\n";
  os << "[ablation]\n";
  os << "flags = " << cfg.ablation.describe() << "\n";
  return os.str();
}

uint64_t config_digest(const TrainConfig& cfg) {
  std::string s = serialize_config(cfg);
  uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace vonet
