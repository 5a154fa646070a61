// Command-line front end over the C API.
#include <cstdio>
#include <memory>
#include <string>

#include "CLI11.hpp"
#include "videodirector/videodirector.h"

namespace {

struct ModelDeleter {
  void operator()(vd_model* p) const { vd_model_free(p); }
};
struct TrajDeleter {
  void operator()(vd_trajectory* p) const { vd_trajectory_free(p); }
};
struct BankDeleter {
  void operator()(vd_bank* p) const { vd_bank_free(p); }
};
using ModelPtr = std::unique_ptr<vd_model, ModelDeleter>;
using TrajPtr = std::unique_ptr<vd_trajectory, TrajDeleter>;
using BankPtr = std::unique_ptr<vd_bank, BankDeleter>;

struct Failure {
  vd_status status;
};

void check(vd_status s) {
  if (s != VD_OK) throw Failure{s};
}

const char* opt(const std::string& s) { return s.empty() ? nullptr : s.c_str(); }

TrajPtr load_traj(const std::string& dir) {
  vd_trajectory* t = nullptr;
  check(vd_trajectory_load(dir.c_str(), &t));
  return TrajPtr(t);
}

BankPtr load_bank(const std::string& dir) {
  vd_bank* b = nullptr;
  check(vd_bank_load(dir.c_str(), &b));
  return BankPtr(b);
}

// Explicit --weights wins; otherwise the path recorded at inversion time.
ModelPtr load_model(const std::string& weights, const vd_trajectory* traj) {
  const std::string path = !weights.empty() ? weights : (traj ? vd_trajectory_weights(traj) : "");
  if (path.empty()) {
    std::fprintf(stderr, "error: no weights directory (pass --weights)\n");
    throw Failure{VD_ERR_ARGUMENT};
  }
  vd_model* m = nullptr;
  check(vd_model_load(path.c_str(), &m));
  return ModelPtr(m);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Text-guided video editing on a toy diffusion model"};
  app.require_subcommand(1);
  bool dump_frames = false;
  app.add_flag("--dump-frames", dump_frames, "Write per-frame PGM strips next to array outputs");

  std::string spec, out;
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic video dataset");
  gen->add_option("--spec", spec, "Dataset spec (JSON)")->required();
  gen->add_option("--out", out, "Output directory")->required();

  std::string data;
  int steps = 0;
  auto* train = app.add_subcommand("train", "Train the toy denoiser");
  train->add_option("--data", data, "Dataset directory")->required();
  train->add_option("--steps", steps, "Optimizer steps")->required()->check(CLI::NonNegativeNumber);
  train->add_option("--out", out, "Weights directory")->required();

  std::string video, prompt, weights;
  int sampling_steps = 0;
  auto* invert = app.add_subcommand("invert", "DDIM-invert a video");
  invert->add_option("--video", video, "Input video array (F, C, H, W)")->required();
  invert->add_option("--prompt", prompt, "Source prompt")->required();
  invert->add_option("--weights", weights, "Weights directory")->required();
  invert->add_option("--out", out, "Trajectory directory")->required();
  invert->add_option("--steps", sampling_steps, "Sampling steps (default 20)");

  std::string traj_dir, config, masks, report;
  auto* tune = app.add_subcommand("tune", "Optimize per-step null-text embeddings");
  tune->add_option("--traj", traj_dir, "Trajectory directory")->required();
  tune->add_option("--config", config, "Session config (JSON)")->required();
  tune->add_option("--out", out, "Null-text bank directory")->required();
  tune->add_option("--masks", masks, "Foreground mask directory");
  tune->add_option("--weights", weights, "Override the trajectory's weights");

  std::string bank_dir;
  auto* recon = app.add_subcommand("reconstruct", "Reconstruct the source video");
  recon->add_option("--traj", traj_dir, "Trajectory directory")->required();
  recon->add_option("--bank", bank_dir, "Null-text bank directory")->required();
  recon->add_option("--out", out, "Output array")->required();
  recon->add_option("--report", report, "Per-step deviation CSV")->required();
  recon->add_option("--config", config, "Session config (JSON)");
  recon->add_option("--masks", masks, "Foreground mask directory");
  recon->add_option("--weights", weights, "Override the trajectory's weights");

  std::string source_prompt, edit_prompt;
  auto* edit = app.add_subcommand("edit", "Edit a video with a new prompt");
  edit->add_option("--traj", traj_dir, "Trajectory directory")->required();
  edit->add_option("--bank", bank_dir, "Null-text bank directory")->required();
  edit->add_option("--source-prompt", source_prompt, "Source prompt")->required();
  edit->add_option("--edit-prompt", edit_prompt, "Edit prompt")->required();
  edit->add_option("--masks", masks, "Foreground mask directory")->required();
  edit->add_option("--config", config, "Session config (JSON)")->required();
  edit->add_option("--out", out, "Output directory")->required();
  edit->add_option("--weights", weights, "Override the trajectory's weights");

  std::string a_path, b_path, mask_path;
  auto* metrics = app.add_subcommand("metrics", "PSNR between two arrays");
  metrics->add_option("--a", a_path, "First array")->required();
  metrics->add_option("--b", b_path, "Second array")->required();
  metrics->add_option("--mask", mask_path, "Mask array (F, H, W) or full shape");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      std::size_t n = 0;
      check(vd_gen_data(spec.c_str(), out.c_str(), &n));
      std::printf("wrote %zu videos to %s\n", n, out.c_str());
    } else if (*train) {
      check(vd_train(data.c_str(), steps, out.c_str()));
      std::printf("weights saved to %s\n", out.c_str());
    } else if (*invert) {
      const ModelPtr model = load_model(weights, nullptr);
      vd_trajectory* t = nullptr;
      check(vd_invert(model.get(), video.c_str(), prompt.c_str(), sampling_steps, &t));
      const TrajPtr traj(t);
      check(vd_trajectory_save(traj.get(), out.c_str()));
      std::printf("trajectory saved to %s\n", out.c_str());
    } else if (*tune) {
      const TrajPtr traj = load_traj(traj_dir);
      const ModelPtr model = load_model(weights, traj.get());
      vd_bank* b = nullptr;
      check(vd_tune(model.get(), traj.get(), config.c_str(), opt(masks), out.c_str(), &b));
      const BankPtr bank(b);
      check(vd_bank_save(bank.get(), out.c_str()));
      std::printf("null-text bank saved to %s\n", out.c_str());
    } else if (*recon) {
      const TrajPtr traj = load_traj(traj_dir);
      const BankPtr bank = load_bank(bank_dir);
      const ModelPtr model = load_model(weights, traj.get());
      check(vd_reconstruct(model.get(), traj.get(), bank.get(), opt(config), opt(masks),
                           out.c_str(), report.c_str()));
      if (dump_frames) {
        check(vd_dump_frames(out.c_str(), (out + ".frames").c_str()));
      }
      std::printf("reconstruction written to %s\n", out.c_str());
    } else if (*edit) {
      const TrajPtr traj = load_traj(traj_dir);
      const BankPtr bank = load_bank(bank_dir);
      const ModelPtr model = load_model(weights, traj.get());
      check(vd_edit(model.get(), traj.get(), bank.get(), source_prompt.c_str(),
                    edit_prompt.c_str(), masks.c_str(), config.c_str(), out.c_str(),
                    dump_frames ? 1 : 0));
      std::printf("edit written to %s\n", out.c_str());
    } else if (*metrics) {
      vd_metrics m{};
      check(vd_metrics_files(a_path.c_str(), b_path.c_str(), opt(mask_path), &m));
      std::printf("psnr,%.6f\nmse,%.9g\n", m.psnr, m.mse);
      if (m.has_mask) std::printf("masked_psnr,%.6f\nmasked_mse,%.9g\n", m.masked_psnr, m.masked_mse);
    }
  } catch (const Failure& f) {
    const char* msg = vd_last_error();
    std::fprintf(stderr, "error (%s): %s\n", vd_status_name(f.status), msg[0] ? msg : "failed");
    return static_cast<int>(f.status);
  }
  return 0;
}
