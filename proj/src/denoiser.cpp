#include "videodirector/denoiser.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>

#include "json.hpp"

#include "videodirector/core_io.hpp"
#include "videodirector/error.hpp"

namespace vdir {

using ag::Tape;
using ag::Var;

void DenoiserConfig::validate() const {
  const bool positive = frames && channels && height && width && model_width && heads &&
                        text_len && text_dim && num_blocks && mlp_ratio;
  require(positive, ErrorKind::validation, "denoiser dimensions must be positive");
  require(model_width % heads == 0, ErrorKind::validation,
          "model_width must be divisible by heads");
}

std::vector<std::string> tokenize(const std::string& prompt) {
  std::vector<std::string> tokens;
  std::string cur;
  for (char ch : prompt) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      if (!cur.empty()) tokens.push_back(std::move(cur));
      cur.clear();
    } else if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  if (!cur.empty()) tokens.push_back(std::move(cur));
  return tokens;
}

TextEmbedding encode_text(const std::string& prompt, const DenoiserConfig& cfg) {
  TextEmbedding emb;
  emb.tokens = tokenize(prompt);
  if (emb.tokens.size() > cfg.text_len) emb.tokens.resize(cfg.text_len);
  emb.vectors = NDArray({cfg.text_len, cfg.text_dim});
  for (std::size_t i = 0; i < emb.tokens.size(); ++i) {
    // FNV-1a over the token, keyed by the model seed.
    std::uint64_t h = 0xcbf29ce484222325ULL ^ mix64(cfg.seed);
    for (char ch : emb.tokens[i]) {
      h ^= static_cast<unsigned char>(ch);
      h *= 0x100000001b3ULL;
    }
    Rng rng(h);
    for (std::size_t j = 0; j < cfg.text_dim; ++j) emb.vectors[i * cfg.text_dim + j] = rng.normal();
  }
  return emb;
}

NDArray per_frame(const NDArray& text, std::size_t frames) {
  require(text.ndim() == 2, ErrorKind::shape, "per_frame expects (l, c)");
  NDArray out({frames, text.dim(0), text.dim(1)});
  for (std::size_t f = 0; f < frames; ++f) {
    std::copy(text.values().begin(), text.values().end(),
              out.values().begin() + static_cast<std::ptrdiff_t>(f * text.size()));
  }
  return out;
}

namespace {

constexpr std::size_t kGlobalParams = 6;
constexpr std::size_t kBlockParams = 27;

enum Global : std::size_t { kEmbedW, kEmbedB, kPosSpatial, kPosFrame, kTimeW, kTimeB };
enum BlockParam : std::size_t {
  kLn1G, kLn1B, kSelfQ, kSelfK, kSelfV, kSelfO, kSelfOb,
  kLn2G, kLn2B, kCrossQ, kCrossK, kCrossV, kCrossO, kCrossOb,
  kLn3G, kLn3B, kTempQ, kTempK, kTempV, kTempO, kTempOb,
  kLn4G, kLn4B, kMlpW1, kMlpB1, kMlpW2, kMlpB2,
};
enum OutParam : std::size_t { kOutLnG, kOutLnB, kOutW, kOutB };

enum class Init { zeros, ones, normal };

struct ParamSpec {
  std::string name;
  Shape shape;
  Init init;
  double stddev;
};

std::vector<ParamSpec> layout(const DenoiserConfig& c) {
  const std::size_t d = c.model_width;
  const std::size_t hidden = d * c.mlp_ratio;
  const double wd = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<ParamSpec> specs = {
      {"embed.w", {c.channels, d}, Init::normal, 1.0 / std::sqrt(static_cast<double>(c.channels))},
      {"embed.b", {d}, Init::zeros, 0.0},
      {"pos.spatial", {c.tokens(), d}, Init::normal, 0.2},
      {"pos.frame", {c.frames, d}, Init::normal, 0.2},
      {"time.w", {d, d}, Init::normal, wd},
      {"time.b", {d}, Init::zeros, 0.0},
  };
  for (std::size_t b = 0; b < c.num_blocks; ++b) {
    const std::string p = "block" + std::to_string(b) + ".";
    const double wt = 1.0 / std::sqrt(static_cast<double>(c.text_dim));
    const std::vector<ParamSpec> block = {
        {p + "ln1.g", {d}, Init::ones, 0.0},      {p + "ln1.b", {d}, Init::zeros, 0.0},
        {p + "self.q", {d, d}, Init::normal, wd}, {p + "self.k", {d, d}, Init::normal, wd},
        {p + "self.v", {d, d}, Init::normal, wd}, {p + "self.o", {d, d}, Init::normal, 0.5 * wd},
        {p + "self.ob", {d}, Init::zeros, 0.0},   {p + "ln2.g", {d}, Init::ones, 0.0},
        {p + "ln2.b", {d}, Init::zeros, 0.0},     {p + "cross.q", {d, d}, Init::normal, wd},
        {p + "cross.k", {c.text_dim, d}, Init::normal, wt},
        {p + "cross.v", {c.text_dim, d}, Init::normal, wt},
        {p + "cross.o", {d, d}, Init::normal, 0.5 * wd},
        {p + "cross.ob", {d}, Init::zeros, 0.0},  {p + "ln3.g", {d}, Init::ones, 0.0},
        {p + "ln3.b", {d}, Init::zeros, 0.0},     {p + "temp.q", {d, d}, Init::normal, wd},
        {p + "temp.k", {d, d}, Init::normal, wd}, {p + "temp.v", {d, d}, Init::normal, wd},
        {p + "temp.o", {d, d}, Init::normal, 0.5 * wd},
        {p + "temp.ob", {d}, Init::zeros, 0.0},   {p + "ln4.g", {d}, Init::ones, 0.0},
        {p + "ln4.b", {d}, Init::zeros, 0.0},
        {p + "mlp.w1", {d, hidden}, Init::normal, wd},
        {p + "mlp.b1", {hidden}, Init::zeros, 0.0},
        {p + "mlp.w2", {hidden, d}, Init::normal, 0.5 / std::sqrt(static_cast<double>(hidden))},
        {p + "mlp.b2", {d}, Init::zeros, 0.0},
    };
    specs.insert(specs.end(), block.begin(), block.end());
  }
  specs.push_back({"out.ln.g", {d}, Init::ones, 0.0});
  specs.push_back({"out.ln.b", {d}, Init::zeros, 0.0});
  specs.push_back({"out.w", {d, c.channels}, Init::normal, 0.1 * wd});
  specs.push_back({"out.b", {c.channels}, Init::zeros, 0.0});
  return specs;
}

NDArray time_embedding(int t, std::size_t d) {
  NDArray e({1, d});
  const std::size_t half = d / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / half);
    e[i] = std::sin(t * freq);
    e[half + i] = std::cos(t * freq);
  }
  return e;
}

}  // namespace

DenoiserWeights DenoiserWeights::initialize(const DenoiserConfig& cfg) {
  cfg.validate();
  DenoiserWeights w;
  w.config = cfg;
  const Rng root(cfg.seed);
  const auto specs = layout(cfg);
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const auto& s = specs[i];
    NDArray a(s.shape, s.init == Init::ones ? 1.0 : 0.0);
    if (s.init == Init::normal) {
      Rng rng = root.fork(i + 1);
      for (double& v : a.values()) v = s.stddev * rng.normal();
    }
    w.names.push_back(s.name);
    w.arrays.push_back(std::move(a));
  }
  return w;
}

const NDArray& DenoiserWeights::get(const std::string& name) const {
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i] == name) return arrays[i];
  }
  fail(ErrorKind::validation, "unknown parameter " + name);
}

void DenoiserWeights::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json m;
  const auto& c = config;
  m["config"] = {{"frames", c.frames},         {"channels", c.channels},
                 {"height", c.height},         {"width", c.width},
                 {"model_width", c.model_width}, {"heads", c.heads},
                 {"text_len", c.text_len},     {"text_dim", c.text_dim},
                 {"num_blocks", c.num_blocks}, {"mlp_ratio", c.mlp_ratio},
                 {"seed", c.seed}};
  m["schedule"] = {{"num_train_steps", schedule.num_train_steps},
                   {"beta_start", schedule.beta_start},
                   {"beta_end", schedule.beta_end}};
  auto& params = m["params"] = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < names.size(); ++i) {
    const std::string file = names[i] + ".vdt";
    write_array(dir / file, arrays[i]);
    params.push_back({{"name", names[i]}, {"shape", arrays[i].shape()}, {"file", file}});
  }
  std::ofstream out(dir / "manifest.json");
  if (!out) fail(ErrorKind::io, "cannot write manifest in " + dir.string());
  out << m.dump(2) << '\n';
}

DenoiserWeights DenoiserWeights::load(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) fail(ErrorKind::io, "missing manifest.json in " + dir.string());
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, "weights manifest: " + std::string(e.what()));
  }
  DenoiserWeights w;
  try {
    const auto& c = m.at("config");
    w.config.frames = c.at("frames");
    w.config.channels = c.at("channels");
    w.config.height = c.at("height");
    w.config.width = c.at("width");
    w.config.model_width = c.at("model_width");
    w.config.heads = c.at("heads");
    w.config.text_len = c.at("text_len");
    w.config.text_dim = c.at("text_dim");
    w.config.num_blocks = c.at("num_blocks");
    w.config.mlp_ratio = c.at("mlp_ratio");
    w.config.seed = c.at("seed");
    const auto& s = m.at("schedule");
    w.schedule.num_train_steps = s.at("num_train_steps");
    w.schedule.beta_start = s.at("beta_start");
    w.schedule.beta_end = s.at("beta_end");
    w.config.validate();
    const auto specs = layout(w.config);
    const auto& params = m.at("params");
    require(params.size() == specs.size(), ErrorKind::format, "parameter count mismatch");
    for (std::size_t i = 0; i < specs.size(); ++i) {
      const std::string name = params[i].at("name");
      require(name == specs[i].name, ErrorKind::format, "unexpected parameter " + name);
      NDArray a = read_array(dir / params[i].at("file").get<std::string>());
      require(a.shape() == specs[i].shape, ErrorKind::format, "bad shape for " + name);
      w.names.push_back(name);
      w.arrays.push_back(std::move(a));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, "weights manifest: " + std::string(e.what()));
  }
  return w;
}

Denoiser::Denoiser(DenoiserWeights weights) : weights_(std::move(weights)) {
  weights_.config.validate();
  require(weights_.arrays.size() == layout(weights_.config).size(), ErrorKind::validation,
          "weights do not match config");
}

std::vector<Var> Denoiser::param_vars(Tape& tape, bool trainable) const {
  std::vector<Var> vars;
  vars.reserve(weights_.arrays.size());
  for (const NDArray& a : weights_.arrays) {
    vars.push_back(trainable ? tape.variable(a) : tape.constant(a));
  }
  return vars;
}

void Denoiser::check_latent(const NDArray& z) const {
  if (z.shape() != config().latent_shape()) {
    fail(ErrorKind::shape, "latent shape " + shape_str(z.shape()) + " != expected " +
                               shape_str(config().latent_shape()));
  }
}

NDArray Denoiser::frame_text(const NDArray& text) const {
  const auto& c = config();
  if (text.shape() == Shape{c.text_len, c.text_dim}) return per_frame(text, c.frames);
  if (text.shape() == c.frame_text_shape()) return text;
  fail(ErrorKind::shape, "text shape " + shape_str(text.shape()) + " is neither (l, c) nor (F, l, c)");
}

Denoiser::ForwardVars Denoiser::build(Tape& tape, const std::vector<Var>& p, Var z, int t,
                                      Var text, AttentionHook* hook) const {
  using namespace ag;
  const auto& c = config();
  const std::size_t F = c.frames, C = c.channels, HW = c.tokens(), d = c.model_width,
                    h = c.heads, dh = c.head_dim();
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  auto split = [&](Var v) {  // (A, n, d) -> (A*h, n, dh)
    const std::size_t A = v.shape()[0], n = v.shape()[1];
    return reshape(permute(reshape(v, {A, n, h, dh}), {0, 2, 1, 3}), {A * h, n, dh});
  };
  auto merge = [&](Var v) {  // (A*h, n, dh) -> (A, n, d)
    const std::size_t A = v.shape()[0] / h, n = v.shape()[1];
    return reshape(permute(reshape(v, {A, h, n, dh}), {0, 2, 1, 3}), {A, n, d});
  };
  auto attention_maps = [&](Var q, Var k) {
    return softmax(scale(matmul(q, k, /*transpose_b=*/true), inv_sqrt_dh));
  };

  Var x = permute(reshape(z, {F, C, HW}), {0, 2, 1});
  x = linear(x, p[kEmbedW], p[kEmbedB]);
  x = add_tiled(x, p[kPosSpatial]);
  x = add_mid_broadcast(x, p[kPosFrame]);
  Var temb = gelu(linear(tape.constant(time_embedding(t, d)), p[kTimeW], p[kTimeB]));
  x = add_tiled(x, temb);

  ForwardVars out;
  for (std::size_t b = 0; b < c.num_blocks; ++b) {
    const Var* q = p.data() + kGlobalParams + b * kBlockParams;
    BlockVars bv;

    // Spatial self-attention, per frame.
    Var h1 = layer_norm(x, q[kLn1G], q[kLn1B]);
    bv.self_queries = linear(h1, q[kSelfQ]);
    bv.self_keys = linear(h1, q[kSelfK]);
    bv.self_values = linear(h1, q[kSelfV]);
    bv.self_maps = attention_maps(split(bv.self_queries), split(bv.self_keys));
    Var sa = merge(matmul(bv.self_maps, split(bv.self_values)));
    if (hook) {
      if (auto r = hook->self_attention(b, bv.self_queries.value(), bv.self_keys.value(),
                                        bv.self_values.value())) {
        require(r->shape() == sa.shape(), ErrorKind::shape, "self-attention hook shape");
        sa = tape.constant(std::move(*r));
      }
    }
    x = add(x, linear(sa, q[kSelfO], q[kSelfOb]));

    // Cross-attention to the frame's text tokens.
    Var h2 = layer_norm(x, q[kLn2G], q[kLn2B]);
    Var kc = split(linear(text, q[kCrossK]));
    Var vc = split(linear(text, q[kCrossV]));
    bv.cross_maps = attention_maps(split(linear(h2, q[kCrossQ])), kc);
    Var cmaps = bv.cross_maps;
    if (hook) {
      if (auto r = hook->cross_maps(b, cmaps.value())) {
        require(r->shape() == cmaps.shape(), ErrorKind::shape, "cross-attention hook shape");
        cmaps = tape.constant(std::move(*r));
      }
    }
    x = add(x, linear(merge(matmul(cmaps, vc)), q[kCrossO], q[kCrossOb]));

    // Temporal attention across frames at each location.
    Var h3 = permute(layer_norm(x, q[kLn3G], q[kLn3B]), {1, 0, 2});  // (HW, F, d)
    Var qt = split(linear(h3, q[kTempQ]));
    Var kt = split(linear(h3, q[kTempK]));
    Var vt = split(linear(h3, q[kTempV]));
    bv.temporal_maps = attention_maps(qt, kt);  // (HW*h, F, F)
    Var ta = permute(merge(matmul(bv.temporal_maps, vt)), {1, 0, 2});
    x = add(x, linear(ta, q[kTempO], q[kTempOb]));

    Var h4 = layer_norm(x, q[kLn4G], q[kLn4B]);
    x = add(x, linear(gelu(linear(h4, q[kMlpW1], q[kMlpB1])), q[kMlpW2], q[kMlpB2]));
    out.blocks.push_back(bv);
  }

  const Var* o = p.data() + kGlobalParams + c.num_blocks * kBlockParams;
  Var y = linear(layer_norm(x, o[kOutLnG], o[kOutLnB]), o[kOutW], o[kOutB]);  // (F, HW, C)
  out.eps = reshape(permute(y, {0, 2, 1}), {F, C, c.height, c.width});
  return out;
}

DenoiseOutput Denoiser::denoise(const NDArray& z_t, int t, const NDArray& text, bool record,
                                AttentionHook* hook) const {
  check_latent(z_t);
  Tape tape;
  const auto params = param_vars(tape, false);
  const ForwardVars fv =
      build(tape, params, tape.constant(z_t), t, tape.constant(frame_text(text)), hook);
  DenoiseOutput out;
  out.eps = fv.eps.value();
  if (record) {
    for (const BlockVars& bv : fv.blocks) {
      out.record.blocks.push_back(BlockRecord{bv.temporal_maps.value(), bv.self_queries.value(),
                                              bv.self_keys.value(), bv.self_values.value(),
                                              bv.self_maps.value(), bv.cross_maps.value()});
    }
  }
  return out;
}

NDArray Denoiser::grad_wrt_latent(const NDArray& z_t, int t, const NDArray& text,
                                  std::span<const FeatureCotangent> cotangents) const {
  FeatureProbe probe(*this, z_t, t, text);
  return probe.vjp(cotangents);
}

Denoiser::TextVjp Denoiser::text_vjp(const NDArray& z_t, int t, const NDArray& text,
                                     const NDArray& cotangent) const {
  check_latent(z_t);
  check_same_shape(z_t, cotangent, "text_vjp cotangent");
  Tape tape;
  const auto params = param_vars(tape, false);
  Var tv = tape.variable(frame_text(text));
  const ForwardVars fv = build(tape, params, tape.constant(z_t), t, tv, nullptr);
  tape.backward(fv.eps, cotangent);
  return TextVjp{fv.eps.value(), tape.grad(tv)};
}

FeatureProbe::FeatureProbe(const Denoiser& model, const NDArray& z_t, int t, const NDArray& text)
    : tape_(std::make_unique<ag::Tape>()) {
  model.check_latent(z_t);
  const auto params = model.param_vars(*tape_, false);
  z_ = tape_->variable(z_t);
  vars_ = model.build(*tape_, params, z_, t, tape_->constant(model.frame_text(text)), nullptr);
}

ag::Var FeatureProbe::select(FeatureKind kind, std::size_t block) const {
  require(block < vars_.blocks.size(), ErrorKind::range, "feature block out of range");
  const auto& b = vars_.blocks[block];
  switch (kind) {
    case FeatureKind::temporal_maps: return b.temporal_maps;
    case FeatureKind::self_keys: return b.self_keys;
  }
  fail(ErrorKind::validation, "unknown feature selector");
}

const NDArray& FeatureProbe::feature(FeatureKind kind, std::size_t block) const {
  return select(kind, block).value();
}

const NDArray& FeatureProbe::eps() const { return vars_.eps.value(); }

NDArray FeatureProbe::vjp(std::span<const FeatureCotangent> cotangents) {
  tape_->zero_grad();
  if (cotangents.empty()) return NDArray::like(z_.value());
  std::size_t top = 0;
  for (const auto& ct : cotangents) {
    const Var v = select(ct.kind, ct.block);
    check_same_shape(v.value(), ct.cotangent, "feature cotangent");
    tape_->accumulate(v.id, ct.cotangent);
    top = std::max(top, v.id);
  }
  // Seeds are placed; a zero seed on the latest one starts the sweep there.
  tape_->backward(ag::Var{tape_.get(), top}, NDArray::like(tape_->value(ag::Var{tape_.get(), top})));
  return tape_->grad(z_);
}

NDArray oracle_epsilon(const NDArray& z_t, int t, const GaussianOracle& oracle,
                       const NoiseSchedule& sched) {
  require(oracle.variance > 0.0, ErrorKind::validation, "oracle variance must be positive");
  check_same_shape(z_t, oracle.mean, "oracle_epsilon");
  const double ab = sched.alpha_bar(t);
  require(ab < 1.0, ErrorKind::range, "oracle_epsilon undefined at alpha_bar == 1");
  const double s2 = oracle.variance;
  const double sa = std::sqrt(ab);
  const double gain = sa * s2 / (ab * s2 + 1.0 - ab);
  const double inv = 1.0 / std::sqrt(1.0 - ab);
  NDArray out = NDArray::like(z_t);
  for (std::size_t i = 0; i < z_t.size(); ++i) {
    const double mu = oracle.mean[i];
    const double post_mean = mu + gain * (z_t[i] - sa * mu);
    out[i] = (z_t[i] - sa * post_mean) * inv;
  }
  return out;
}

struct Trainer {
  static TrainResult run(const DenoiserConfig& cfg, std::span<const TrainExample> dataset,
                         int steps, const NoiseSchedule& sched, Rng& rng,
                         const TrainOptions& opt) {
    require(!dataset.empty(), ErrorKind::validation, "training dataset is empty");
    require(opt.batch >= 1, ErrorKind::validation, "batch must be >= 1");
    TrainResult result;
    result.weights = DenoiserWeights::initialize(cfg);
    result.weights.schedule = {sched.num_train_steps(), sched.beta_start(), sched.beta_end()};
    auto& params = result.weights.arrays;
    std::vector<NDArray> m1, m2;
    for (const auto& p : params) {
      m1.push_back(NDArray::like(p));
      m2.push_back(NDArray::like(p));
    }
    std::vector<NDArray> prompt_text;
    for (const auto& ex : dataset) {
      require(ex.video.shape() == cfg.latent_shape(), ErrorKind::shape,
              "training video shape mismatch");
      prompt_text.push_back(encode_text(ex.prompt, cfg).vectors);
    }
    const NDArray empty_text = encode_text("", cfg).vectors;
    constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;

    for (int step = 0; step < steps; ++step) {
      const Denoiser model(result.weights);
      std::vector<NDArray> grads;
      for (const auto& p : params) grads.push_back(NDArray::like(p));
      double loss = 0.0;
      for (std::size_t b = 0; b < opt.batch; ++b) {
        const std::size_t idx = rng.below(dataset.size());
        const int t = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(sched.num_train_steps())));
        const NDArray eps = rng.normal_array(cfg.latent_shape());
        const NDArray z_t = add_noise(dataset[idx].video, t, eps, sched);
        const bool drop = rng.uniform() < opt.prompt_dropout;
        ag::Tape tape;
        const auto pv = model.param_vars(tape, true);
        const auto fv = model.build(tape, pv, tape.constant(z_t), t,
                                    tape.constant(per_frame(drop ? empty_text : prompt_text[idx],
                                                            cfg.frames)),
                                    nullptr);
        NDArray resid = fv.eps.value() - eps;
        const double n = static_cast<double>(resid.size() * opt.batch);
        loss += squared_norm(resid) / n;
        tape.backward(fv.eps, resid * (2.0 / n));
        for (std::size_t i = 0; i < pv.size(); ++i) grads[i] += tape.grad(pv[i]);
      }
      result.loss_trace.push_back(loss);
      const double bc1 = 1.0 - std::pow(kBeta1, step + 1);
      const double bc2 = 1.0 - std::pow(kBeta2, step + 1);
      for (std::size_t i = 0; i < params.size(); ++i) {
        for (std::size_t j = 0; j < params[i].size(); ++j) {
          const double g = grads[i][j];
          m1[i][j] = kBeta1 * m1[i][j] + (1.0 - kBeta1) * g;
          m2[i][j] = kBeta2 * m2[i][j] + (1.0 - kBeta2) * g * g;
          params[i][j] -= opt.learning_rate * (m1[i][j] / bc1) / (std::sqrt(m2[i][j] / bc2) + kEps);
        }
      }
    }
    return result;
  }
};

TrainResult train_toy(const DenoiserConfig& cfg, std::span<const TrainExample> dataset, int steps,
                      const NoiseSchedule& sched, Rng& rng, const TrainOptions& options) {
  return Trainer::run(cfg, dataset, steps, sched, rng, options);
}

}  // namespace vdir
