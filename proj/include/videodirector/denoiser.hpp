#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "videodirector/autograd.hpp"
#include "videodirector/ndarray.hpp"
#include "videodirector/rng.hpp"
#include "videodirector/scheduler.hpp"

namespace vdir {

struct DenoiserConfig {
  std::size_t frames = 8;
  std::size_t channels = 4;
  std::size_t height = 8;
  std::size_t width = 8;
  std::size_t model_width = 32;
  std::size_t heads = 2;
  std::size_t text_len = 8;
  std::size_t text_dim = 16;
  std::size_t num_blocks = 2;
  std::size_t mlp_ratio = 2;
  std::uint64_t seed = 0;

  void validate() const;
  std::size_t tokens() const { return height * width; }
  std::size_t head_dim() const { return model_width / heads; }
  Shape latent_shape() const { return {frames, channels, height, width}; }
  Shape frame_text_shape() const { return {frames, text_len, text_dim}; }
};

// Lowercased words with non-alphanumeric characters stripped.
std::vector<std::string> tokenize(const std::string& prompt);

struct TextEmbedding {
  std::vector<std::string> tokens;  // real tokens, at most text_len
  NDArray vectors;                  // (l, c); padding rows are zero
};

TextEmbedding encode_text(const std::string& prompt, const DenoiserConfig& cfg);
// (l, c) -> (F, l, c) with identical rows.
NDArray per_frame(const NDArray& text, std::size_t frames);

struct BlockRecord {
  NDArray temporal_maps;  // (H*W*h, F, F), row b = location * h + head
  NDArray self_queries;   // (F, H*W, d)
  NDArray self_keys;      // (F, H*W, d)
  NDArray self_values;    // (F, H*W, d)
  NDArray self_maps;      // (F*h, H*W, H*W)
  NDArray cross_maps;     // (F*h, H*W, l)
};

struct AttentionRecord {
  std::vector<BlockRecord> blocks;
  bool empty() const { return blocks.empty(); }
};

// Intercepts attention sites during a forward pass. Returning a value
// replaces the computed quantity; replacements are constants (no gradient).
class AttentionHook {
 public:
  virtual ~AttentionHook() = default;
  // q, k, v: (F, H*W, d). Returns the pre-projection output (F, H*W, d).
  virtual std::optional<NDArray> self_attention(std::size_t block, const NDArray& q,
                                                const NDArray& k, const NDArray& v) {
    (void)block, (void)q, (void)k, (void)v;
    return std::nullopt;
  }
  // maps: (F*h, H*W, l). Returns replacement maps of the same shape.
  virtual std::optional<NDArray> cross_maps(std::size_t block, const NDArray& maps) {
    (void)block, (void)maps;
    return std::nullopt;
  }
};

struct TrainingScheduleInfo {
  int num_train_steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 2e-2;
};

struct DenoiserWeights {
  DenoiserConfig config;
  TrainingScheduleInfo schedule;
  std::vector<std::string> names;  // deterministic order
  std::vector<NDArray> arrays;

  static DenoiserWeights initialize(const DenoiserConfig& cfg);
  const NDArray& get(const std::string& name) const;

  void save(const std::filesystem::path& dir) const;
  static DenoiserWeights load(const std::filesystem::path& dir);
};

enum class FeatureKind { temporal_maps, self_keys };

struct FeatureCotangent {
  FeatureKind kind;
  std::size_t block;
  NDArray cotangent;  // shaped like the selected feature
};

struct DenoiseOutput {
  NDArray eps;
  AttentionRecord record;  // empty unless requested
};

class FeatureProbe;

// Text-conditioned video noise predictor: per block, spatial self-attention
// over H*W tokens of each frame, cross-attention to per-frame text, temporal
// attention over frames at each location, then an MLP.
class Denoiser {
 public:
  explicit Denoiser(DenoiserWeights weights);

  const DenoiserConfig& config() const noexcept { return weights_.config; }
  const DenoiserWeights& weights() const noexcept { return weights_; }

  // text: (l, c) shared by all frames, or (F, l, c) per frame.
  DenoiseOutput denoise(const NDArray& z_t, int t, const NDArray& text, bool record,
                        AttentionHook* hook = nullptr) const;

  // Vector-Jacobian product of z_t -> selected features.
  NDArray grad_wrt_latent(const NDArray& z_t, int t, const NDArray& text,
                          std::span<const FeatureCotangent> cotangents) const;

  struct TextVjp {
    NDArray eps;
    NDArray grad_text;  // (F, l, c)
  };
  // eps(z_t, t, text) and cotangent^T * d eps / d text.
  TextVjp text_vjp(const NDArray& z_t, int t, const NDArray& text,
                   const NDArray& cotangent) const;

 private:
  friend class FeatureProbe;
  friend struct Trainer;

  struct ParamVars;
  struct BlockVars {
    ag::Var temporal_maps, self_queries, self_keys, self_values, self_maps, cross_maps;
  };
  struct ForwardVars {
    ag::Var eps;
    std::vector<BlockVars> blocks;
  };

  ForwardVars build(ag::Tape& tape, const std::vector<ag::Var>& params, ag::Var z, int t,
                    ag::Var text, AttentionHook* hook) const;
  std::vector<ag::Var> param_vars(ag::Tape& tape, bool trainable) const;
  NDArray frame_text(const NDArray& text) const;
  void check_latent(const NDArray& z) const;

  DenoiserWeights weights_;
};

// One differentiable forward pass at z_t; features are readable and any
// number of VJPs can be taken against the same pass.
class FeatureProbe {
 public:
  FeatureProbe(const Denoiser& model, const NDArray& z_t, int t, const NDArray& text);

  const NDArray& feature(FeatureKind kind, std::size_t block) const;
  const NDArray& eps() const;
  NDArray vjp(std::span<const FeatureCotangent> cotangents);

 private:
  ag::Var select(FeatureKind kind, std::size_t block) const;

  std::unique_ptr<ag::Tape> tape_;
  ag::Var z_;
  Denoiser::ForwardVars vars_;
};

// Closed-form noise prediction for data z0 ~ N(mean, variance * I).
struct GaussianOracle {
  NDArray mean;
  double variance = 1.0;
};

NDArray oracle_epsilon(const NDArray& z_t, int t, const GaussianOracle& oracle,
                       const NoiseSchedule& sched);

struct TrainExample {
  NDArray video;       // (F, C, H, W)
  std::string prompt;  // may be empty
};

struct TrainOptions {
  std::size_t batch = 2;
  double learning_rate = 3e-3;
  double prompt_dropout = 0.1;  // probability of training on the empty prompt
};

struct TrainResult {
  DenoiserWeights weights;
  std::vector<double> loss_trace;
};

// Adam on the noise-prediction loss ||eps - eps_theta(z_t, c, t)||^2 with
// t ~ U(1, T).
TrainResult train_toy(const DenoiserConfig& cfg, std::span<const TrainExample> dataset, int steps,
                      const NoiseSchedule& sched, Rng& rng, const TrainOptions& options = {});

}  // namespace vdir
