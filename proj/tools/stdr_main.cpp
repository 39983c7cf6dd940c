#include <CLI11.hpp>

#include <chrono>
#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "stdr/config.hpp"
#include "stdr/scenes.hpp"
#include "stdr/trainer.hpp"

namespace fs = std::filesystem;

namespace {

constexpr const char* kVersion = "stdr 1.0.0";

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// --set key=value, value parsed as JSON (numbers, bools, arrays)
void apply_overrides(stdr::Config& cfg, const std::vector<std::string>& sets) {
  for (const std::string& kv : sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0)
      throw stdr::InvalidInput("config: --set expects key=value, got '" + kv + "'");
    const std::string key = kv.substr(0, eq);
    const std::string raw = kv.substr(eq + 1);
    nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
    if (value.is_discarded())
      throw stdr::InvalidInput("config: cannot parse value for key '" + key + "': " + raw);
    nlohmann::json patch;
    patch[key] = std::move(value);
    stdr::apply_config_json(cfg, patch);
  }
}

struct GenerateArgs {
  std::string out;
  stdr::SceneSpec spec;
  std::string motion = "linear";
};

int cmd_generate(const GenerateArgs& a) {
  stdr::SceneSpec spec = a.spec;
  spec.motion = stdr::parse_motion(a.motion);
  const stdr::Dataset ds = stdr::generate_scene(spec);
  stdr::save_dataset(ds, a.out);
  std::cout << "generated " << a.out << ": " << ds.init_points.size() << " init points, K="
            << ds.timestamps << ", " << spec.cameras << "+1 cameras, " << ds.frames.size()
            << " frames (" << ds.width << "x" << ds.height << ")\n";
  return 0;
}

struct TrainArgs {
  std::string dataset, out, config_path, resume;
  std::vector<std::string> sets;
  std::int64_t iterations = 0;
  std::uint64_t seed = 0;
  bool iterations_set = false, seed_set = false, no_stdr = false;
};

int cmd_train(const TrainArgs& a) {
  const stdr::Dataset ds = stdr::load_dataset(a.dataset);

  stdr::TrainState st;
  if (a.resume.empty()) {
    stdr::Config cfg;
    if (!a.config_path.empty()) cfg = stdr::load_config(a.config_path);
    apply_overrides(cfg, a.sets);
    if (a.iterations_set) cfg.iterations = (int)a.iterations;
    if (a.seed_set) cfg.seed = a.seed;
    if (a.no_stdr) cfg.stdr = false;
    cfg.validate();
    st = stdr::init_train_state(cfg, ds);
  } else {
    // resume keeps the checkpoint's configuration; overrides apply on top,
    // but changing anything structural invalidates the stored state
    st = stdr::load_checkpoint(a.resume);
    if (!a.config_path.empty())
      throw stdr::InvalidInput("train: --config cannot be combined with --resume");
    apply_overrides(st.config, a.sets);
    if (a.iterations_set) st.config.iterations = (int)a.iterations;
    if (a.seed_set) st.config.seed = a.seed;
    if (a.no_stdr) st.config.stdr = false;
    st.config.validate();
  }

  fs::create_directories(a.out);
  const std::string ckpt_path = (fs::path(a.out) / "checkpoint.bin").string();
  stdr::save_config(st.config, (fs::path(a.out) / "config.json").string());

  std::ofstream csv(fs::path(a.out) / "metrics.csv");
  if (!csv) throw stdr::IoError("train: cannot write metrics.csv in " + a.out);
  csv << "iteration,phase,l1,dssim,l_temp,l_spatial,total\n";

  const auto t0 = std::chrono::steady_clock::now();
  stdr::run_training(st, ds, [&](const stdr::TrainState& s, const stdr::LossReport& r) {
    csv << r.iteration << ',' << stdr::phase_name(r.phase) << ',' << fmt_double(r.l1) << ','
        << fmt_double(r.dssim) << ',' << fmt_double(r.l_temp) << ',' << fmt_double(r.l_spatial)
        << ',' << fmt_double(r.total) << '\n';
    if (s.iteration % s.config.checkpoint_every == 0) stdr::save_checkpoint(s, ckpt_path);
    if (s.iteration % 500 == 0) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::printf("iter %" PRId64 " phase=%s total=%.6f (%.1f s)\n", r.iteration,
                  stdr::phase_name(r.phase), r.total, secs);
      std::fflush(stdout);
    }
  });
  csv.flush();
  if (!csv) throw stdr::IoError("train: metrics.csv write failed in " + a.out);
  stdr::save_checkpoint(st, ckpt_path);
  std::cout << "trained to iteration " << st.iteration << ", checkpoint at " << ckpt_path << "\n";
  return 0;
}

struct RenderArgs {
  std::string checkpoint, out;
  int camera = 0;
  int timestamp = 0;
};

int cmd_render(const RenderArgs& a) {
  stdr::TrainState st = stdr::load_checkpoint(a.checkpoint);
  const stdr::Image img = stdr::render_view(st, a.camera, a.timestamp);
  stdr::save_png(a.out, img);
  std::cout << "wrote " << a.out << " (camera " << a.camera << ", timestamp " << a.timestamp
            << ", iteration " << st.iteration << ")\n";
  return 0;
}

struct EvalArgs {
  std::string checkpoint, dataset, out, split = "held_out";
};

int cmd_eval(const EvalArgs& a) {
  if (a.split != "held_out" && a.split != "training")
    throw stdr::InvalidInput("eval: --split must be 'held_out' or 'training'");
  stdr::TrainState st = stdr::load_checkpoint(a.checkpoint);
  const stdr::Dataset ds = stdr::load_dataset(a.dataset);
  const std::vector<stdr::EvalRow> rows = stdr::evaluate_frames(st, ds, a.split == "held_out");

  std::ofstream csv(a.out);
  if (!csv) throw stdr::IoError("eval: cannot write " + a.out);
  csv << "camera,timestamp,psnr,ssim\n";
  double psnr_sum = 0.0, ssim_sum = 0.0;
  for (const stdr::EvalRow& r : rows) {
    csv << r.camera_id << ',' << r.timestamp << ',' << fmt_double(r.psnr) << ','
        << fmt_double(r.ssim) << '\n';
    std::cout << "camera " << r.camera_id << " t" << r.timestamp << ": psnr=" << fmt_double(r.psnr)
              << " ssim=" << fmt_double(r.ssim) << "\n";
    psnr_sum += r.psnr;
    ssim_sum += r.ssim;
  }
  const double psnr_mean = psnr_sum / (double)rows.size();
  const double ssim_mean = ssim_sum / (double)rows.size();
  csv << "mean,," << fmt_double(psnr_mean) << ',' << fmt_double(ssim_mean) << '\n';
  csv.flush();
  if (!csv) throw stdr::IoError("eval: write failed for " + a.out);
  std::cout << "mean over " << rows.size() << " " << a.split << " frames: psnr=" << fmt_double(psnr_mean)
            << " ssim=" << fmt_double(ssim_mean) << "\n";
  return 0;
}

struct InspectArgs {
  std::string checkpoint, out;
};

int cmd_inspect_masks(const InspectArgs& a) {
  stdr::TrainState st = stdr::load_checkpoint(a.checkpoint);
  const stdr::MaskDistribution dist{
      st.mask_frozen ? st.frozen_probs : stdr::softmax_columns(st.cloud.mask_logits)};

  std::ofstream csv(a.out);
  if (!csv) throw stdr::IoError("inspect-masks: cannot write " + a.out);
  csv << "gaussian";
  for (int t = 0; t < st.timestamps; ++t) csv << ",p_t" << t;
  csv << ",entropy\n";
  for (Eigen::Index i = 0; i < dist.count(); ++i) {
    csv << i;
    for (Eigen::Index t = 0; t < dist.timestamps(); ++t) csv << ',' << fmt_double(dist.prob(i, t));
    csv << ',' << fmt_double(dist.entropy(i)) << '\n';
  }
  csv.flush();
  if (!csv) throw stdr::IoError("inspect-masks: write failed for " + a.out);
  std::cout << "wrote " << a.out << " (" << dist.count() << " gaussians, K=" << st.timestamps
            << (st.mask_frozen ? ", frozen)\n" : ")\n");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dynamic gaussian splatting trainer with temporal opacity masks"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(0, 1);

  GenerateArgs gen;
  CLI::App* generate = app.add_subcommand("generate", "synthesize a dataset directory");
  generate->add_option("--out", gen.out, "output dataset directory")->required();
  generate->add_option("--timestamps", gen.spec.timestamps, "timestamp count K");
  generate->add_option("--static-points", gen.spec.n_static, "static gaussian count");
  generate->add_option("--dynamic-points", gen.spec.n_dynamic, "dynamic gaussian count");
  generate->add_option("--motion", gen.motion, "motion pattern: linear | circular");
  generate->add_option("--amplitude", gen.spec.amplitude, "motion amplitude");
  generate->add_option("--cameras", gen.spec.cameras, "training camera count (one more held out)");
  generate->add_option("--camera-radius", gen.spec.camera_radius, "camera ring radius");
  generate->add_option("--camera-elevation", gen.spec.camera_elevation, "camera ring elevation");
  generate->add_option("--blob-z", gen.spec.blob_z, "dynamic blob center height");
  generate->add_option("--blob-spread", gen.spec.blob_spread, "dynamic blob member scatter");
  generate->add_option("--blob-sigma-min", gen.spec.blob_sigma_min, "smallest blob member radius");
  generate->add_option("--blob-sigma-max", gen.spec.blob_sigma_max, "largest blob member radius");
  generate->add_flag("--blob-colorful", gen.spec.blob_colorful,
                     "full-range blob member colors instead of the red palette");
  generate->add_option("--width", gen.spec.width, "image width");
  generate->add_option("--height", gen.spec.height, "image height");
  generate->add_option("--seed", gen.spec.seed, "scene random seed");

  TrainArgs tr;
  CLI::App* train = app.add_subcommand("train", "optimize a model on a dataset");
  train->add_option("--dataset", tr.dataset, "dataset directory")->required();
  train->add_option("--out", tr.out, "output directory")->required();
  train->add_option("--config", tr.config_path, "JSON config file");
  train->add_option("--set", tr.sets, "config override key=value (value is JSON)");
  CLI::Option* tr_iters = train->add_option("--iterations", tr.iterations, "total iteration count");
  CLI::Option* tr_seed = train->add_option("--seed", tr.seed, "training seed");
  train->add_flag("--no-stdr", tr.no_stdr,
                  "baseline: unmodulated opacity, no regularizers, position-only deformation input");
  train->add_option("--resume", tr.resume, "checkpoint to continue from");

  RenderArgs rd;
  CLI::App* render = app.add_subcommand("render", "render one view from a checkpoint");
  render->add_option("--checkpoint", rd.checkpoint, "checkpoint file")->required();
  render->add_option("--camera", rd.camera, "camera id")->required();
  render->add_option("--timestamp", rd.timestamp, "timestamp index")->required();
  render->add_option("--out", rd.out, "output PNG path")->required();

  EvalArgs ev;
  CLI::App* eval = app.add_subcommand("eval", "PSNR/SSIM table for a checkpoint on a dataset");
  eval->add_option("--checkpoint", ev.checkpoint, "checkpoint file")->required();
  eval->add_option("--dataset", ev.dataset, "dataset directory")->required();
  eval->add_option("--split", ev.split, "frame split: held_out | training");
  eval->add_option("--out", ev.out, "output CSV path")->required();

  InspectArgs ins;
  CLI::App* inspect = app.add_subcommand("inspect-masks", "dump the mask distribution as CSV");
  inspect->add_option("--checkpoint", ins.checkpoint, "checkpoint file")->required();
  inspect->add_option("--out", ins.out, "output CSV path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }
  tr.iterations_set = tr_iters->count() > 0;
  tr.seed_set = tr_seed->count() > 0;

  try {
    if (*generate) return cmd_generate(gen);
    if (*train) return cmd_train(tr);
    if (*render) return cmd_render(rd);
    if (*eval) return cmd_eval(ev);
    if (*inspect) return cmd_inspect_masks(ins);
    std::cerr << app.help();
    return 1;
  } catch (const stdr::IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const stdr::InvalidInput& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
