#include "videodirector/stdg.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>

#include "videodirector/error.hpp"

namespace vdir {

StdgConfig StdgConfig::swapped() const {
  StdgConfig s = *this;
  std::swap(s.eta_f, s.eta_b);
  std::swap(s.zeta_f, s.zeta_b);
  return s;
}

void StdgConfig::validate(std::size_t frames) const {
  require(eta_f >= 0 && eta_b >= 0 && zeta_f >= 0 && zeta_b >= 0, ErrorKind::validation,
          "STDG coefficients must be nonnegative");
  require(top_k >= 1 && top_k <= frames, ErrorKind::range, "top_k must lie in [1, F]");
}

std::vector<std::size_t> StdgConfig::active_blocks(std::size_t num_blocks) const {
  if (blocks.empty()) {
    std::vector<std::size_t> all(num_blocks);
    std::iota(all.begin(), all.end(), std::size_t{0});
    return all;
  }
  for (std::size_t b : blocks) require(b < num_blocks, ErrorKind::range, "STDG block out of range");
  return blocks;
}

NDArray topk_mask(const NDArray& maps, std::size_t k) {
  require(maps.ndim() == 3, ErrorKind::shape, "topk_mask expects (B, F, F)");
  const std::size_t cols = maps.dim(2);
  require(k >= 1 && k <= cols, ErrorKind::range, "K must lie in [1, F]");
  NDArray mask = NDArray::like(maps);
  std::vector<std::size_t> order(cols);
  for (std::size_t r = 0; r < maps.size(); r += cols) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return maps[r + a] > maps[r + b]; });
    for (std::size_t j = 0; j < k; ++j) mask[r + order[j]] = 1.0;
  }
  return mask;
}

NDArray temporal_location_mask(const NDArray& frame_masks, std::size_t heads) {
  require(frame_masks.ndim() == 3, ErrorKind::shape, "frame masks must be (F, H, W)");
  const std::size_t F = frame_masks.dim(0), HW = frame_masks.dim(1) * frame_masks.dim(2);
  NDArray out({HW * heads});
  for (std::size_t loc = 0; loc < HW; ++loc) {
    double m = 0.0;
    for (std::size_t f = 0; f < F; ++f) m = std::max(m, frame_masks[f * HW + loc]);
    for (std::size_t h = 0; h < heads; ++h) out[loc * heads + h] = m;
  }
  return out;
}

namespace {

void check_inputs(const Denoiser& model, const AttentionRecord& reference, const MaskSet& masks,
                  const StdgConfig& cfg) {
  const auto& c = model.config();
  cfg.validate(c.frames);
  require(reference.blocks.size() == c.num_blocks, ErrorKind::shape,
          "reference record has wrong block count");
  masks.validate();
  require(masks.foreground.shape() == Shape{c.frames, c.height, c.width}, ErrorKind::shape,
          "mask shape does not match the latent grid");
}

// Weight per temporal-map element: location mask times top-K of the reference.
NDArray temporal_weights(const NDArray& ref_maps, const NDArray& location_mask, std::size_t k) {
  NDArray w = topk_mask(ref_maps, k);
  const std::size_t ff = ref_maps.dim(1) * ref_maps.dim(2);
  for (std::size_t b = 0; b < ref_maps.dim(0); ++b) {
    for (std::size_t j = 0; j < ff; ++j) w[b * ff + j] *= location_mask[b];
  }
  return w;
}

// Key weights: per-frame mask broadcast over channels, (F, H*W, d).
NDArray key_weights(const NDArray& frame_masks, std::size_t d) {
  NDArray w({frame_masks.dim(0), frame_masks.dim(1) * frame_masks.dim(2), d});
  for (std::size_t i = 0; i < frame_masks.size(); ++i)
    for (std::size_t c = 0; c < d; ++c) w[i * d + c] = frame_masks[i];
  return w;
}

// Normalized masked squared distance over blocks; returns the loss and fills
// per-block cotangents d loss / d current.
double masked_loss(const std::vector<const NDArray*>& reference,
                   const std::vector<const NDArray*>& current,
                   const std::vector<NDArray>& weights, std::vector<NDArray>& cotangents) {
  double count = 0.0;
  for (const auto& w : weights) count += std::accumulate(w.values().begin(), w.values().end(), 0.0);
  cotangents.clear();
  double loss = 0.0;
  for (std::size_t b = 0; b < reference.size(); ++b) {
    NDArray ct = NDArray::like(*current[b]);
    if (count > 0.0) {
      for (std::size_t i = 0; i < ct.size(); ++i) {
        const double diff = (*reference[b])[i] - (*current[b])[i];
        loss += weights[b][i] * diff * diff;
        ct[i] = -2.0 * weights[b][i] * diff / count;
      }
    }
    cotangents.push_back(std::move(ct));
  }
  return count > 0.0 ? loss / count : 0.0;
}

struct Split {
  double loss_fg, loss_bg;
  std::vector<FeatureCotangent> fg, bg;
};

Split temporal_split(const FeatureProbe& probe, const AttentionRecord& reference,
                     const MaskSet& masks, const StdgConfig& cfg, std::size_t heads,
                     const std::vector<std::size_t>& blocks) {
  const NDArray loc_fg = temporal_location_mask(masks.foreground, heads);
  const NDArray loc_bg = temporal_location_mask(masks.background, heads);
  std::vector<const NDArray*> ref, cur;
  std::vector<NDArray> w_fg, w_bg;
  for (std::size_t b : blocks) {
    const NDArray& r = reference.blocks[b].temporal_maps;
    const NDArray& c = probe.feature(FeatureKind::temporal_maps, b);
    check_same_shape(r, c, "temporal maps");
    ref.push_back(&r);
    cur.push_back(&c);
    w_fg.push_back(temporal_weights(r, loc_fg, cfg.top_k));
    w_bg.push_back(temporal_weights(r, loc_bg, cfg.top_k));
  }
  Split s;
  std::vector<NDArray> ct;
  s.loss_fg = masked_loss(ref, cur, w_fg, ct);
  for (std::size_t i = 0; i < blocks.size(); ++i)
    s.fg.push_back({FeatureKind::temporal_maps, blocks[i], std::move(ct[i])});
  s.loss_bg = masked_loss(ref, cur, w_bg, ct);
  for (std::size_t i = 0; i < blocks.size(); ++i)
    s.bg.push_back({FeatureKind::temporal_maps, blocks[i], std::move(ct[i])});
  return s;
}

Split spatial_split(const FeatureProbe& probe, const AttentionRecord& reference,
                    const MaskSet& masks, std::size_t d, const std::vector<std::size_t>& blocks) {
  const NDArray w_fg = key_weights(masks.foreground, d);
  const NDArray w_bg = key_weights(masks.background, d);
  std::vector<const NDArray*> ref, cur;
  for (std::size_t b : blocks) {
    const NDArray& r = reference.blocks[b].self_keys;
    const NDArray& c = probe.feature(FeatureKind::self_keys, b);
    check_same_shape(r, c, "self-attention keys");
    ref.push_back(&r);
    cur.push_back(&c);
  }
  Split s;
  std::vector<NDArray> ct;
  s.loss_fg = masked_loss(ref, cur, std::vector<NDArray>(blocks.size(), w_fg), ct);
  for (std::size_t i = 0; i < blocks.size(); ++i)
    s.fg.push_back({FeatureKind::self_keys, blocks[i], std::move(ct[i])});
  s.loss_bg = masked_loss(ref, cur, std::vector<NDArray>(blocks.size(), w_bg), ct);
  for (std::size_t i = 0; i < blocks.size(); ++i)
    s.bg.push_back({FeatureKind::self_keys, blocks[i], std::move(ct[i])});
  return s;
}

DecoupledLoss finish(FeatureProbe& probe, Split&& s, GuidanceSource fg, GuidanceSource bg) {
  DecoupledLoss out;
  out.loss_fg = s.loss_fg;
  out.loss_bg = s.loss_bg;
  out.fg = {probe.vjp(s.fg), fg};
  out.bg = {probe.vjp(s.bg), bg};
  return out;
}

}  // namespace

DecoupledLoss temporal_loss_and_grads(const Denoiser& model, const AttentionRecord& reference,
                                      const NDArray& z_t, int t, const NDArray& text,
                                      const MaskSet& masks, const StdgConfig& cfg) {
  check_inputs(model, reference, masks, cfg);
  FeatureProbe probe(model, z_t, t, text);
  const auto blocks = cfg.active_blocks(model.config().num_blocks);
  return finish(probe, temporal_split(probe, reference, masks, cfg, model.config().heads, blocks),
                GuidanceSource::temporal_fg, GuidanceSource::temporal_bg);
}

DecoupledLoss spatial_loss_and_grads(const Denoiser& model, const AttentionRecord& reference,
                                     const NDArray& z_t, int t, const NDArray& text,
                                     const MaskSet& masks, const StdgConfig& cfg) {
  check_inputs(model, reference, masks, cfg);
  FeatureProbe probe(model, z_t, t, text);
  const auto blocks = cfg.active_blocks(model.config().num_blocks);
  return finish(probe, spatial_split(probe, reference, masks, model.config().model_width, blocks),
                GuidanceSource::spatial_fg, GuidanceSource::spatial_bg);
}

GuidanceTerm combine_guidance(const GuidanceTerm& temporal_fg, const GuidanceTerm& temporal_bg,
                              const GuidanceTerm& spatial_fg, const GuidanceTerm& spatial_bg,
                              const StdgConfig& cfg) {
  check_same_shape(temporal_fg.value, temporal_bg.value, "combine_guidance");
  check_same_shape(temporal_fg.value, spatial_fg.value, "combine_guidance");
  check_same_shape(temporal_fg.value, spatial_bg.value, "combine_guidance");
  NDArray g = NDArray::like(temporal_fg.value);
  g.axpy(cfg.eta_f, temporal_fg.value);
  g.axpy(cfg.eta_b, temporal_bg.value);
  g.axpy(cfg.zeta_f, spatial_fg.value);
  g.axpy(cfg.zeta_b, spatial_bg.value);
  return {std::move(g), GuidanceSource::combined};
}

StdgResult compute_stdg(const Denoiser& model, const AttentionRecord& reference,
                        const NDArray& z_t, int t, const NDArray& text, const MaskSet& masks,
                        const StdgConfig& cfg) {
  check_inputs(model, reference, masks, cfg);
  FeatureProbe probe(model, z_t, t, text);
  const auto& c = model.config();
  const auto blocks = cfg.active_blocks(c.num_blocks);
  StdgResult r;
  r.temporal = finish(probe, temporal_split(probe, reference, masks, cfg, c.heads, blocks),
                      GuidanceSource::temporal_fg, GuidanceSource::temporal_bg);
  r.spatial = finish(probe, spatial_split(probe, reference, masks, c.model_width, blocks),
                     GuidanceSource::spatial_fg, GuidanceSource::spatial_bg);
  r.combined = combine_guidance(r.temporal.fg, r.temporal.bg, r.spatial.fg, r.spatial.bg, cfg);
  r.combined.value *= cfg.scale;
  return r;
}

StdgDiagnosticRow diagnostic_row(int t, const StdgResult& r) {
  return {t, norm(r.temporal.fg.value), norm(r.temporal.bg.value), norm(r.spatial.fg.value),
          norm(r.spatial.bg.value)};
}

void write_stdg_diagnostics(const std::filesystem::path& path,
                            const std::vector<StdgDiagnosticRow>& rows) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::io, "cannot write " + path.string());
  out.precision(9);
  out << "t,norm_GT_f,norm_GT_b,norm_GK_f,norm_GK_b\n";
  for (const auto& r : rows) {
    out << r.t << ',' << r.temporal_fg << ',' << r.temporal_bg << ',' << r.spatial_fg << ','
        << r.spatial_bg << '\n';
  }
}

}  // namespace vdir
