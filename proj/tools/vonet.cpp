#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>

#include "vonet/bench.h"
#include "vonet/config.h"
#include "vonet/dataset.h"
#include "vonet/eval.h"
#include "vonet/threads.h"
#include "vonet/trainer.h"
#include "vonet/viz.h"

namespace fs = std::filesystem;
using namespace vonet;

namespace {

std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(std::stoi(item));
  }
  return out;
}

int run_gen_data(const std::string& out_dir, int num_videos, int frames,
                 int size, const std::string& shapes, uint64_t seed,
                 double vel_min, double vel_max) {
  DatasetSpec spec;
  spec.num_videos = num_videos;
  spec.frames_per_video = frames;
  spec.height = size;
  spec.width = size;
  spec.seed = seed;
  spec.velocity_min = vel_min;
  spec.velocity_max = vel_max;
  auto colon = shapes.find(':');
  if (colon == std::string::npos)
    throw std::invalid_argument("--shapes expects min:max");
  spec.shapes_min = std::stoi(shapes.substr(0, colon));
  spec.shapes_max = std::stoi(shapes.substr(colon + 1));
  spec.validate();
  DatasetManifest m = generate_dataset(spec, out_dir, default_threads());
  std::cout << (fs::path(out_dir) / "manifest").string() << "\n";
  std::cout << "videos: " << m.videos.size() << "\n";
  return 0;
}

int run_train(const std::string& config_path, const std::string& data_dir,
              const std::string& out_dir, int steps_override,
              int64_t seed_override, const std::string& ablation,
              bool concurrent) {
  TrainConfig cfg =
      config_path.empty() ? TrainConfig{} : load_train_config(config_path);
  if (steps_override > 0) cfg.total_updates = steps_override;
  if (seed_override >= 0) cfg.seed = static_cast<uint64_t>(seed_override);
  if (!ablation.empty()) cfg.ablation = AblationFlags::parse(ablation);
  cfg.validate();

  DatasetManifest data = load_manifest(data_dir);
  Trainer trainer(cfg, data, out_dir);
  TrainHistory history = trainer.run(concurrent);
  std::cout << "final checkpoint: " << history.final_checkpoint << "\n";
  std::cout << "metric log: " << history.log_path << "\n";
  return 0;
}

int run_eval(const std::string& checkpoint, const std::string& data_dir,
             const std::string& report_path, const std::string& config_path,
             int max_videos, bool oracle_gt, uint64_t eval_seed) {
  std::unique_ptr<VoNet> model;
  Checkpoint ck;
  if (!config_path.empty()) {
    TrainConfig expected = load_train_config(config_path);
    std::tie(ck, model) = load_checkpoint(checkpoint, &expected);
  } else {
    std::tie(ck, model) = load_checkpoint(checkpoint);
  }
  DatasetManifest data = load_manifest(data_dir);
  if (data.spec.height != ck.frame_h || data.spec.width != ck.frame_w)
    throw std::invalid_argument("dataset resolution does not match checkpoint");

  EvalOptions opt;
  opt.slots = ck.cfg.slots;
  opt.flags = ck.cfg.ablation;
  opt.oracle_gt = oracle_gt;
  opt.max_videos = max_videos;
  opt.eval_seed = eval_seed;
  MetricReport report = evaluate_dataset(*model, data, opt);
  write_report(report_path, report);
  std::printf("fg_ari %.6f miou %.6f over %d videos\n", report.fg_ari_mean,
              report.miou_mean, report.video_count);
  return 0;
}

int run_viz(const std::string& checkpoint, const std::string& data_dir,
            int video_index, const std::string& out_dir, uint64_t eval_seed) {
  auto [ck, model] = load_checkpoint(checkpoint);
  DatasetManifest data = load_manifest(data_dir);
  if (video_index < 0 || video_index >= static_cast<int>(data.videos.size()))
    throw std::out_of_range("video index out of range");
  LabeledVideo video = load_video(data, video_index);
  VizResult res =
      render_video_viz(*model, video, ck.cfg.slots, eval_seed, out_dir);
  std::cout << "overlays: " << res.overlays
            << " posterior recons: " << res.posterior_recons
            << " prior recons: " << res.prior_recons << "\n";
  std::cout << "kld csv: " << res.kld_csv << "\n";
  return 0;
}

int run_bench(const std::string& slots_csv, int size, int repeats,
              const std::string& out_csv, const std::string& profile) {
  std::vector<int> slot_counts = parse_int_list(slots_csv);
  ModelConfig cfg = ModelConfig::named(profile);
  int threads = bench_default_threads();
  std::vector<BenchRow> rows =
      bench_attention(cfg, slot_counts, size, repeats, threads);
  if (!out_csv.empty()) write_bench_csv(out_csv, rows);
  for (const auto& r : rows)
    std::printf("%s k=%d %dpx median %.3f ms iqr %.3f ms\n", r.variant.c_str(),
                r.slots, r.image_size, r.median_ms, r.iqr_ms);
  std::printf("parallel ratio %.3f recurrent ratio %.3f (threads=%d)\n",
              bench_ratio(rows, "parallel"), bench_ratio(rows, "recurrent"),
              threads);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"vonet: unsupervised video object learning toolkit"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  std::string gen_out, gen_shapes = "2:3";
  int gen_videos = 10, gen_frames = 24, gen_size = 64;
  uint64_t gen_seed = 0;
  double gen_vmin = 0.5, gen_vmax = 2.0;
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--num-videos", gen_videos);
  gen->add_option("--frames", gen_frames);
  gen->add_option("--size", gen_size, "square frame size in pixels");
  gen->add_option("--shapes", gen_shapes, "shapes per video, min:max");
  gen->add_option("--seed", gen_seed);
  gen->add_option("--velocity-min", gen_vmin);
  gen->add_option("--velocity-max", gen_vmax);

  // train
  auto* train = app.add_subcommand("train", "train a model");
  std::string tr_config, tr_data, tr_out = "runs/train", tr_ablation;
  int tr_steps = -1;
  int64_t tr_seed = -1;
  bool tr_concurrent = false;
  train->add_option("--config", tr_config, "ini config file");
  train->add_option("--data", tr_data, "dataset directory")->required();
  train->add_option("--out", tr_out, "output directory");
  train->add_option("--steps", tr_steps, "override total updates");
  train->add_option("--seed", tr_seed, "override seed");
  train->add_option("--ablation", tr_ablation,
                    "wo-unet | kl-div:<W> | wo-replay | wo-klbal (comma separated)");
  train->add_flag("--concurrent", tr_concurrent,
                  "collect streams on worker threads");

  // eval
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string ev_ckpt, ev_data, ev_report = "report.json", ev_config;
  int ev_max = -1;
  bool ev_oracle = false;
  uint64_t ev_seed = 0xE7A1ULL;
  eval->add_option("--checkpoint", ev_ckpt)->required();
  eval->add_option("--data", ev_data)->required();
  eval->add_option("--out", ev_report, "report path");
  eval->add_option("--config", ev_config, "verify checkpoint against this config");
  eval->add_option("--max-videos", ev_max);
  eval->add_option("--eval-seed", ev_seed);
  eval->add_flag("--oracle-gt", ev_oracle)->group("");  // metric self-test

  // viz
  auto* viz = app.add_subcommand("viz", "render overlays and reconstructions");
  std::string vz_ckpt, vz_data, vz_out = "viz";
  int vz_index = 0;
  uint64_t vz_seed = 0xE7A1ULL;
  viz->add_option("--checkpoint", vz_ckpt)->required();
  viz->add_option("--data", vz_data)->required();
  viz->add_option("--video", vz_index, "video index");
  viz->add_option("--out", vz_out, "output directory");
  viz->add_option("--eval-seed", vz_seed);

  // bench-attn
  auto* bench = app.add_subcommand("bench-attn", "attention scaling benchmark");
  std::string bn_slots = "5,11,16,24", bn_out, bn_profile = "desk";
  int bn_size = 128, bn_repeats = 10;
  bench->add_option("--slots", bn_slots, "comma-separated slot counts");
  bench->add_option("--size", bn_size, "image size in pixels");
  bench->add_option("--repeats", bn_repeats);
  bench->add_option("--out", bn_out, "csv path");
  bench->add_option("--profile", bn_profile, "desk | full | toy");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed())
      return run_gen_data(gen_out, gen_videos, gen_frames, gen_size, gen_shapes,
                          gen_seed, gen_vmin, gen_vmax);
    if (train->parsed())
      return run_train(tr_config, tr_data, tr_out, tr_steps, tr_seed,
                       tr_ablation, tr_concurrent);
    if (eval->parsed())
      return run_eval(ev_ckpt, ev_data, ev_report, ev_config, ev_max, ev_oracle,
                      ev_seed);
    if (viz->parsed()) return run_viz(vz_ckpt, vz_data, vz_index, vz_out, vz_seed);
    if (bench->parsed())
      return run_bench(bn_slots, bn_size, bn_repeats, bn_out, bn_profile);
  } catch (const TrainAbort& e) {
    std::cerr << "vonet: abort: " << e.what() << " (dump: " << e.dump_path
              << ")\n";
    return 3;
  } catch (const std::invalid_argument& e) {
    std::cerr << "vonet: error: " << e.what() << "\n";
    return 2;
  } catch (const std::out_of_range& e) {
    std::cerr << "vonet: error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "vonet: error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
