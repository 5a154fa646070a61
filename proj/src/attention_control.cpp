#include "videodirector/attention_control.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>

#include "videodirector/error.hpp"

namespace vdir {

std::size_t PromptAlignment::set_reweight(const std::string& word, double value) {
  require(value > 0.0, ErrorKind::validation, "re-weighting coefficients must be positive");
  const auto tok = tokenize(word);
  require(tok.size() == 1, ErrorKind::validation, "re-weighting expects a single word");
  std::size_t hits = 0;
  for (std::size_t j = 0; j < edit_tokens.size() && j < length(); ++j) {
    if (edit_tokens[j] == tok[0]) {
      reweight[j] = value;
      ++hits;
    }
  }
  return hits;
}

std::string PromptAlignment::report() const {
  std::ostringstream os;
  os << std::left << std::setw(5) << "pos" << std::setw(14) << "edit" << std::setw(14)
     << "source" << std::setw(7) << "gamma" << "C\n";
  for (std::size_t j = 0; j < length(); ++j) {
    const std::string e = j < edit_tokens.size() ? edit_tokens[j] : "<pad>";
    std::string s = "-";
    if (mapping[j] >= 0) {
      const auto m = static_cast<std::size_t>(mapping[j]);
      s = m < source_tokens.size() ? source_tokens[m] : "<pad>";
    }
    os << std::setw(5) << j << std::setw(14) << e << std::setw(14) << s << std::setw(7)
       << gamma[j] << reweight[j] << '\n';
  }
  return os.str();
}

PromptAlignment align_prompts(const std::string& source, const std::string& edit,
                              std::size_t text_len) {
  PromptAlignment a;
  a.source_tokens = tokenize(source);
  a.edit_tokens = tokenize(edit);
  if (a.source_tokens.size() > text_len) a.source_tokens.resize(text_len);
  if (a.edit_tokens.size() > text_len) a.edit_tokens.resize(text_len);
  const std::size_t ns = a.source_tokens.size(), ne = a.edit_tokens.size();

  // LCS table over token lists.
  std::vector<std::vector<std::size_t>> lcs(ne + 1, std::vector<std::size_t>(ns + 1, 0));
  for (std::size_t i = ne; i-- > 0;)
    for (std::size_t j = ns; j-- > 0;)
      lcs[i][j] = a.edit_tokens[i] == a.source_tokens[j]
                      ? lcs[i + 1][j + 1] + 1
                      : std::max(lcs[i + 1][j], lcs[i][j + 1]);

  a.mapping.assign(text_len, -1);
  a.gamma = NDArray({text_len});
  a.reweight = NDArray({text_len}, 1.0);
  for (std::size_t i = 0, j = 0; i < ne;) {
    if (j < ns && a.edit_tokens[i] == a.source_tokens[j] && lcs[i][j] == lcs[i + 1][j + 1] + 1) {
      a.mapping[i] = static_cast<int>(j);
      ++i;
      ++j;
    } else if (j < ns && lcs[i][j + 1] >= lcs[i + 1][j]) {
      ++j;
    } else {
      a.gamma[i] = 1.0;
      ++i;
    }
  }
  for (std::size_t k = ne; k < text_len; ++k) {
    const std::size_t src = k - ne + ns;
    if (src < text_len) a.mapping[k] = static_cast<int>(src);
  }
  return a;
}

void ControlSchedule::validate() const {
  require(tau_s >= 0.0 && tau_s <= 1.0 && tau_c >= 0.0 && tau_c <= 1.0, ErrorKind::range,
          "control thresholds must lie in [0, 1]");
  require(total_steps >= 1, ErrorKind::range, "total_steps must be positive");
}

namespace {
int threshold_steps(double tau, int n) {
  // Guard against products like 0.3 * 20 landing a hair above an integer.
  return static_cast<int>(std::ceil(tau * n - 1e-9));
}
}  // namespace

int ControlSchedule::sa1_steps() const { return threshold_steps(tau_s, total_steps); }
int ControlSchedule::ca_steps() const { return threshold_steps(tau_c, total_steps); }

ControlPhase control_phase(int step, const ControlSchedule& sched) {
  sched.validate();
  require(step >= 0 && step < sched.total_steps, ErrorKind::range, "step outside [0, N)");
  return {step < sched.sa1_steps(), step < sched.ca_steps()};
}

namespace {

// (F, n, d) -> (F*h, n, dh)
NDArray split_heads(const NDArray& x, std::size_t heads) {
  const std::size_t F = x.dim(0), n = x.dim(1), d = x.dim(2), dh = d / heads;
  return ag::kernels::permute(x.reshaped({F, n, heads, dh}), {0, 2, 1, 3})
      .reshaped({F * heads, n, dh});
}

// (F*h, n, dh) -> (F, n, d)
NDArray merge_heads(const NDArray& x, std::size_t heads) {
  const std::size_t F = x.dim(0) / heads, n = x.dim(1), dh = x.dim(2);
  return ag::kernels::permute(x.reshaped({F, heads, n, dh}), {0, 2, 1, 3})
      .reshaped({F, n, heads * dh});
}

void check_qkv(const NDArray& x, const char* what, std::size_t heads) {
  require(x.ndim() == 3, ErrorKind::shape, std::string(what) + " must be (F, n, d)");
  require(heads >= 1 && x.dim(2) % heads == 0, ErrorKind::shape,
          std::string(what) + ": width not divisible by heads");
}

}  // namespace

NDArray sa1_replace(const NDArray& w_rec, const NDArray& v_edit, std::size_t heads) {
  check_qkv(v_edit, "V_edit", heads);
  const std::size_t F = v_edit.dim(0), n = v_edit.dim(1), dh = v_edit.dim(2) / heads;
  require(w_rec.shape() == Shape{F * heads, n, n}, ErrorKind::shape,
          "W_rec shape " + shape_str(w_rec.shape()) + " incompatible with V " +
              shape_str(v_edit.shape()));
  const NDArray vh = split_heads(v_edit, heads);
  NDArray out({F * heads, n, dh});
  for (std::size_t b = 0; b < F * heads; ++b) {
    ag::kernels::matmul(w_rec.data() + b * n * n, vh.data() + b * n * dh, out.data() + b * n * dh,
                        n, n, dh, false, false);
  }
  return merge_heads(out, heads);
}

NDArray sa2_weights(const NDArray& q_edit, const NDArray& k_edit, const NDArray& k_rec,
                    const NDArray& fg_mask, std::size_t heads) {
  check_qkv(q_edit, "Q_edit", heads);
  check_same_shape(q_edit, k_edit, "sa2 K_edit");
  check_same_shape(q_edit, k_rec, "sa2 K_rec");
  const std::size_t F = q_edit.dim(0), n = q_edit.dim(1), dh = q_edit.dim(2) / heads;
  require(fg_mask.shape() == Shape{F, n}, ErrorKind::shape, "fg mask must be (F, n)");
  const NDArray qh = split_heads(q_edit, heads);
  const NDArray keh = split_heads(k_edit, heads);
  const NDArray krh = split_heads(k_rec, heads);
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  NDArray w({F * heads, n, 2 * n});
  std::vector<double> tmp(n);
  for (std::size_t b = 0; b < F * heads; ++b) {
    const std::size_t f = b / heads;
    for (std::size_t i = 0; i < n; ++i) {
      double* row = w.data() + (b * n + i) * 2 * n;
      const double* qi = qh.data() + (b * n + i) * dh;
      ag::kernels::matmul(qi, keh.data() + b * n * dh, row, 1, dh, n, true, false);
      ag::kernels::matmul(qi, krh.data() + b * n * dh, row + n, 1, dh, n, true, false);
      for (std::size_t j = 0; j < 2 * n; ++j) row[j] *= inv;
      for (std::size_t j = 0; j < n; ++j) {
        if (fg_mask[f * n + j] != 0.0) row[n + j] = kNegInf;
      }
    }
  }
  ag::kernels::softmax_rows(w.data(), F * heads * n, 2 * n);
  return w;
}

NDArray sa2_mutual(const NDArray& q_edit, const NDArray& k_edit, const NDArray& k_rec,
                   const NDArray& v_edit, const NDArray& v_rec, const NDArray& fg_mask,
                   std::size_t heads) {
  check_same_shape(q_edit, v_edit, "sa2 V_edit");
  check_same_shape(q_edit, v_rec, "sa2 V_rec");
  const NDArray w = sa2_weights(q_edit, k_edit, k_rec, fg_mask, heads);
  const std::size_t F = q_edit.dim(0), n = q_edit.dim(1), dh = q_edit.dim(2) / heads;
  const NDArray veh = split_heads(v_edit, heads);
  const NDArray vrh = split_heads(v_rec, heads);
  NDArray out({F * heads, n, dh});
  for (std::size_t b = 0; b < F * heads; ++b) {
    // Concatenated values [V_edit | V_rec] along the key axis.
    std::vector<double> vcat(2 * n * dh);
    std::copy_n(veh.data() + b * n * dh, n * dh, vcat.begin());
    std::copy_n(vrh.data() + b * n * dh, n * dh, vcat.begin() + static_cast<std::ptrdiff_t>(n * dh));
    ag::kernels::matmul(w.data() + b * n * 2 * n, vcat.data(), out.data() + b * n * dh, n, 2 * n,
                        dh, false, false);
  }
  return merge_heads(out, heads);
}

NDArray ca_control(const NDArray& m_edit, const NDArray& m_rec, const PromptAlignment& align,
                   int step, const ControlSchedule& sched, bool renormalize) {
  require(m_edit.ndim() == 3, ErrorKind::shape, "cross maps must be (F*h, n, l)");
  const std::size_t l = m_edit.dim(2);
  require(m_rec.ndim() == 3 && m_rec.dim(0) == m_edit.dim(0) && m_rec.dim(1) == m_edit.dim(1),
          ErrorKind::shape, "reconstruction cross maps incompatible with editing maps");
  require(align.length() == l, ErrorKind::shape, "alignment length differs from map width");
  for (int src : align.mapping) {
    require(src < static_cast<int>(m_rec.dim(2)), ErrorKind::range,
            "alignment refers to a source position outside the reconstruction maps");
  }
  if (!control_phase(step, sched).ca_on) return m_edit;
  NDArray out = NDArray::like(m_edit);
  const std::size_t ls = m_rec.dim(2);
  const std::size_t rows = m_edit.size() / l;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < l; ++j) {
      const double e = m_edit[r * l + j];
      const int src = align.mapping[j];
      const double mapped = src >= 0 ? m_rec[r * ls + static_cast<std::size_t>(src)] : e;
      const double g = align.gamma[j];
      out[r * l + j] = align.reweight[j] * (g * e + (1.0 - g) * mapped);
    }
    if (renormalize) {
      double s = 0.0;
      for (std::size_t j = 0; j < l; ++j) s += out[r * l + j];
      if (s > 0.0)
        for (std::size_t j = 0; j < l; ++j) out[r * l + j] /= s;
    }
  }
  return out;
}

DualPathController::DualPathController(const AttentionRecord& reconstruction,
                                       const NDArray& fg_mask_tokens, const PromptAlignment& align,
                                       const ControlSchedule& sched, const ControlFlags& flags,
                                       std::size_t heads, int step)
    : rec_(reconstruction),
      fg_mask_(fg_mask_tokens),
      align_(align),
      sched_(sched),
      flags_(flags),
      heads_(heads),
      step_(step),
      phase_(control_phase(step, sched)) {}

std::optional<NDArray> DualPathController::self_attention(std::size_t block, const NDArray& q,
                                                          const NDArray& k, const NDArray& v) {
  require(block < rec_.blocks.size(), ErrorKind::range, "no reconstruction record for block");
  const BlockRecord& r = rec_.blocks[block];
  if (phase_.sa1) {
    if (flags_.sa1) return sa1_replace(r.self_maps, v, heads_);
    return std::nullopt;
  }
  if (flags_.sa2) {
    return sa2_mutual(q, k, r.self_keys, v, r.self_values, fg_mask_, heads_);
  }
  return std::nullopt;
}

std::optional<NDArray> DualPathController::cross_maps(std::size_t block, const NDArray& maps) {
  if (!flags_.ca || !phase_.ca_on) return std::nullopt;
  require(block < rec_.blocks.size(), ErrorKind::range, "no reconstruction record for block");
  return ca_control(maps, rec_.blocks[block].cross_maps, align_, step_, sched_,
                    flags_.renormalize);
}

}  // namespace vdir
