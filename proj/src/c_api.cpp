#include "videodirector/videodirector.h"

#include <filesystem>
#include <fstream>
#include <new>
#include <optional>
#include <string>

#include "videodirector/config.hpp"
#include "videodirector/dataset.hpp"
#include "videodirector/error.hpp"
#include "videodirector/pipeline.hpp"

struct vd_model {
  vdir::Denoiser denoiser;
  std::string path;
};

struct vd_trajectory {
  vdir::Trajectory traj;
};

struct vd_bank {
  vdir::NullTextBank bank;
};

namespace {

thread_local std::string g_last_error;

vd_status status_for(vdir::ErrorKind kind) {
  switch (kind) {
    case vdir::ErrorKind::io: return VD_ERR_IO;
    case vdir::ErrorKind::format: return VD_ERR_FORMAT;
    case vdir::ErrorKind::validation: return VD_ERR_VALIDATION;
    case vdir::ErrorKind::range: return VD_ERR_RANGE;
    case vdir::ErrorKind::shape: return VD_ERR_SHAPE;
    case vdir::ErrorKind::diverged: return VD_ERR_DIVERGED;
  }
  return VD_ERR_INTERNAL;
}

template <typename F>
vd_status guarded(F&& body) {
  g_last_error.clear();
  try {
    body();
    return VD_OK;
  } catch (const vdir::Error& e) {
    g_last_error = e.what();
    return status_for(e.kind());
  } catch (const std::filesystem::filesystem_error& e) {
    g_last_error = e.what();
    return VD_ERR_IO;
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
    return VD_ERR_INTERNAL;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return VD_ERR_INTERNAL;
  } catch (...) {
    g_last_error = "unknown error";
    return VD_ERR_INTERNAL;
  }
}

vd_status argument_error(const char* what) {
  g_last_error = std::string("null argument: ") + what;
  return VD_ERR_ARGUMENT;
}

vdir::SessionConfig session_config(const char* path) {
  return path ? vdir::SessionConfig::load(path) : vdir::SessionConfig{};
}

std::optional<vdir::MaskSet> masks_from(const char* dir) {
  if (!dir) return std::nullopt;
  return vdir::read_masks(dir);
}

std::ofstream open_report(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) vdir::fail(vdir::ErrorKind::io, "cannot write " + path.string());
  out.precision(9);
  return out;
}

void dump_strips(const vdir::NDArray& video, const std::filesystem::path& dir,
                 const std::string& stem) {
  std::filesystem::create_directories(dir);
  for (std::size_t c = 0; c < video.dim(1); ++c) {
    vdir::write_pgm(dir / (stem + "_c" + std::to_string(c) + ".pgm"), vdir::frame_strip(video, c));
  }
}

}  // namespace

extern "C" {

const char* vd_last_error(void) { return g_last_error.c_str(); }

const char* vd_status_name(vd_status status) {
  switch (status) {
    case VD_OK: return "ok";
    case VD_ERR_IO: return "io";
    case VD_ERR_FORMAT: return "format";
    case VD_ERR_VALIDATION: return "validation";
    case VD_ERR_RANGE: return "range";
    case VD_ERR_SHAPE: return "shape";
    case VD_ERR_DIVERGED: return "diverged";
    case VD_ERR_ARGUMENT: return "argument";
    case VD_ERR_INTERNAL: return "internal";
  }
  return "unknown";
}

vd_status vd_gen_data(const char* spec_path, const char* out_dir, size_t* num_videos) {
  if (!spec_path || !out_dir) return argument_error("spec_path/out_dir");
  return guarded([&] {
    const auto spec = vdir::DatasetSpec::load(spec_path);
    const auto videos = vdir::generate_dataset(spec);
    vdir::write_dataset(out_dir, spec, videos);
    if (num_videos) *num_videos = videos.size();
  });
}

vd_status vd_train(const char* data_dir, int steps, const char* out_dir) {
  if (!data_dir || !out_dir) return argument_error("data_dir/out_dir");
  return guarded([&] {
    vdir::require(steps >= 0, vdir::ErrorKind::validation, "steps must be nonnegative");
    const vdir::Dataset data = vdir::read_dataset(data_dir);
    const auto& shape = data.examples.front().video.shape();
    vdir::require(shape.size() == 4, vdir::ErrorKind::shape, "videos must be (F, C, H, W)");
    vdir::DenoiserConfig cfg;
    cfg.frames = shape[0];
    cfg.channels = shape[1];
    cfg.height = shape[2];
    cfg.width = shape[3];
    cfg.seed = data.seed;
    const vdir::NoiseSchedule sched = vdir::ScheduleParams{}.make();
    vdir::Rng rng = vdir::Rng(data.seed).fork(0x7261696e);
    const auto result = vdir::train_toy(cfg, data.examples, steps, sched, rng);
    result.weights.save(out_dir);
    auto out = open_report(std::filesystem::path(out_dir) / "loss.csv");
    out << "step,loss\n";
    for (std::size_t i = 0; i < result.loss_trace.size(); ++i) {
      out << i << ',' << result.loss_trace[i] << '\n';
    }
  });
}

vd_status vd_model_load(const char* weights_dir, vd_model** out) {
  if (!weights_dir || !out) return argument_error("weights_dir/out");
  *out = nullptr;
  return guarded([&] {
    *out = new vd_model{vdir::Denoiser(vdir::DenoiserWeights::load(weights_dir)), weights_dir};
  });
}

void vd_model_free(vd_model* model) { delete model; }

vd_status vd_invert(const vd_model* model, const char* video_path, const char* prompt,
                    int sampling_steps, vd_trajectory** out) {
  if (!model || !video_path || !prompt || !out) return argument_error("model/video/prompt/out");
  *out = nullptr;
  return guarded([&] {
    const vdir::NDArray video = vdir::read_array(video_path);
    const auto& info = model->denoiser.weights().schedule;
    vdir::ScheduleParams params{info.num_train_steps, info.beta_start, info.beta_end,
                                sampling_steps > 0 ? sampling_steps : 20};
    auto traj = vdir::run_ddim_inversion(video, prompt, params, model->denoiser);
    traj.weights_path = std::filesystem::absolute(model->path).string();
    *out = new vd_trajectory{std::move(traj)};
  });
}

vd_status vd_trajectory_load(const char* dir, vd_trajectory** out) {
  if (!dir || !out) return argument_error("dir/out");
  *out = nullptr;
  return guarded([&] { *out = new vd_trajectory{vdir::Trajectory::load(dir)}; });
}

vd_status vd_trajectory_save(const vd_trajectory* traj, const char* dir) {
  if (!traj || !dir) return argument_error("traj/dir");
  return guarded([&] { traj->traj.save(dir); });
}

const char* vd_trajectory_weights(const vd_trajectory* traj) {
  return traj ? traj->traj.weights_path.c_str() : "";
}

void vd_trajectory_free(vd_trajectory* traj) { delete traj; }

vd_status vd_tune(const vd_model* model, const vd_trajectory* traj, const char* config_path,
                  const char* masks_dir, const char* report_dir, vd_bank** out) {
  if (!model || !traj || !out) return argument_error("model/traj/out");
  *out = nullptr;
  return guarded([&] {
    const auto cfg = session_config(config_path);
    cfg.check_schedule(traj->traj.schedule);
    const auto masks = masks_from(masks_dir);
    auto result = vdir::optimize_null_text(traj->traj, model->denoiser,
                                           masks ? &*masks : nullptr, cfg.tune_config());
    if (report_dir) {
      auto csv = open_report(std::filesystem::path(report_dir) / "loss.csv");
      csv << "step,iter,loss\n";
      for (std::size_t i = 0; i < result.loss_traces.size(); ++i) {
        for (std::size_t k = 0; k < result.loss_traces[i].size(); ++k) {
          csv << i << ',' << k << ',' << result.loss_traces[i][k] << '\n';
        }
      }
      vdir::write_stdg_diagnostics(std::filesystem::path(report_dir) / "stdg.csv",
                                   result.diagnostics);
    }
    *out = new vd_bank{std::move(result.bank)};
  });
}

vd_status vd_bank_load(const char* dir, vd_bank** out) {
  if (!dir || !out) return argument_error("dir/out");
  *out = nullptr;
  return guarded([&] { *out = new vd_bank{vdir::NullTextBank::load(dir)}; });
}

vd_status vd_bank_save(const vd_bank* bank, const char* dir) {
  if (!bank || !dir) return argument_error("bank/dir");
  return guarded([&] { bank->bank.save(dir); });
}

void vd_bank_free(vd_bank* bank) { delete bank; }

vd_status vd_reconstruct(const vd_model* model, const vd_trajectory* traj, const vd_bank* bank,
                         const char* config_path, const char* masks_dir, const char* out_file,
                         const char* report_csv) {
  if (!model || !traj || !bank || !out_file) return argument_error("model/traj/bank/out_file");
  return guarded([&] {
    const auto cfg = session_config(config_path);
    cfg.check_schedule(traj->traj.schedule);
    const auto masks = masks_from(masks_dir);
    vdir::TuneConfig tune = cfg.tune_config();
    tune.mode = bank->bank.mode;
    const auto r = vdir::reconstruct(traj->traj, bank->bank, model->denoiser,
                                     masks ? &*masks : nullptr, tune);
    vdir::write_array(out_file, r.latent);
    if (report_csv) {
      const vdir::NoiseSchedule sched = traj->traj.schedule.make();
      const auto m = vdir::compute_metrics(r.latent, traj->traj.latents[0]);
      auto csv = open_report(report_csv);
      csv << "step,t,deviation\n";
      for (std::size_t i = 0; i < r.deviation.size(); ++i) {
        csv << i << ',' << sched.indices()[i] << ',' << r.deviation[i] << '\n';
      }
      csv << "# psnr_vs_input," << m.psnr << '\n';
    }
  });
}

vd_status vd_edit(const vd_model* model, const vd_trajectory* traj, const vd_bank* bank,
                  const char* source_prompt, const char* edit_prompt, const char* masks_dir,
                  const char* config_path, const char* out_dir, int dump_frames) {
  if (!model || !traj || !bank || !source_prompt || !edit_prompt || !out_dir) {
    return argument_error("model/traj/bank/prompts/out_dir");
  }
  return guarded([&] {
    const auto cfg = session_config(config_path);
    cfg.check_schedule(traj->traj.schedule);
    vdir::EditSession session;
    session.source_prompt = source_prompt;
    session.edit_prompt = edit_prompt;
    session.trajectory = traj->traj;
    session.bank = bank->bank;
    session.masks = masks_from(masks_dir);
    session.schedule = cfg.control;
    session.flags = cfg.flags;
    session.reweight = cfg.reweight;
    session.stdg = cfg.stdg;
    session.stdg_enabled = cfg.stdg_enabled;
    session.stdg_editing = cfg.stdg_editing;
    session.omega = cfg.omega;
    session.seed = cfg.seed;
    const auto r = vdir::edit_video(session, model->denoiser);

    const std::filesystem::path dir(out_dir);
    std::filesystem::create_directories(dir);
    vdir::write_array(dir / "edited.vdt", r.edited);
    vdir::write_array(dir / "reconstruction.vdt", r.reconstruction);
    {
      auto csv = open_report(dir / "metrics.csv");
      csv << "metric,value\n";
      csv << "psnr," << r.metrics.psnr << '\n';
      csv << "mse," << r.metrics.mse << '\n';
      if (r.metrics.masked_psnr) {
        csv << "background_masked_psnr," << *r.metrics.masked_psnr << '\n';
        csv << "background_masked_mse," << *r.metrics.masked_mse << '\n';
      }
      for (std::size_t i = 0; i < r.metrics.trajectory_deviation.size(); ++i) {
        csv << "deviation_" << i << ',' << r.metrics.trajectory_deviation[i] << '\n';
      }
    }
    {
      auto txt = open_report(dir / "alignment.txt");
      txt << r.alignment.report();
    }
    vdir::write_stdg_diagnostics(dir / "stdg.csv", r.diagnostics);
    if (dump_frames) {
      dump_strips(traj->traj.latents[0], dir / "frames", "input");
      dump_strips(r.reconstruction, dir / "frames", "reconstruction");
      dump_strips(r.edited, dir / "frames", "edited");
    }
  });
}

vd_status vd_metrics_files(const char* a_path, const char* b_path, const char* mask_path,
                           vd_metrics* out) {
  if (!a_path || !b_path || !out) return argument_error("a/b/out");
  return guarded([&] {
    const vdir::NDArray a = vdir::read_array(a_path);
    const vdir::NDArray b = vdir::read_array(b_path);
    std::optional<vdir::NDArray> mask;
    if (mask_path) mask = vdir::read_array(mask_path);
    const auto m = vdir::compute_metrics(a, b, mask ? &*mask : nullptr);
    out->psnr = m.psnr;
    out->mse = m.mse;
    out->has_mask = m.masked_psnr.has_value() ? 1 : 0;
    out->masked_psnr = m.masked_psnr.value_or(0.0);
    out->masked_mse = m.masked_mse.value_or(0.0);
  });
}

vd_status vd_dump_frames(const char* array_path, const char* out_dir) {
  if (!array_path || !out_dir) return argument_error("array_path/out_dir");
  return guarded([&] {
    const vdir::NDArray video = vdir::read_array(array_path);
    vdir::require(video.ndim() == 4, vdir::ErrorKind::shape, "expected an (F, C, H, W) array");
    dump_strips(video, out_dir, std::filesystem::path(array_path).stem().string());
  });
}

}  // extern "C"
