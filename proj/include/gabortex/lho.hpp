#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "gabortex/attention.hpp"
#include "gabortex/diagnostics.hpp"
#include "gabortex/params.hpp"
#include "gabortex/tape.hpp"

namespace gabortex {

// M quantization levels spanning [min, max] of an intensity map:
// L^m = min + (max - min)/M * m, m = 1..M
struct QuantizationLevels {
  std::vector<double> levels;
  double spacing = 0.0;
  double min_value = 0.0;
  double max_value = 0.0;
  bool degenerate = false;
};

inline QuantizationLevels compute_levels(const Tensor& map, int m_count) {
  if (m_count < 2) throw std::invalid_argument("compute_levels: M must be >= 2");
  QuantizationLevels q;
  q.min_value = map.min_value();
  q.max_value = map.max_value();
  double range = q.max_value - q.min_value;
  if (range < 1e-9) {
    q.degenerate = true;
    q.spacing = 0.0;
    q.levels.assign(static_cast<std::size_t>(m_count), q.min_value);
    return q;
  }
  q.spacing = range / m_count;
  q.levels.resize(static_cast<std::size_t>(m_count));
  for (int m = 1; m <= m_count; ++m)
    q.levels[static_cast<std::size_t>(m - 1)] = q.min_value + q.spacing * m;
  return q;
}

// Soft spire-shaped assignment of each pixel to the nearest level.
// verbatim:  V = 1 - |L - I|        when |L - I| < spacing/2, else 0
// centered:  levels shift by -spacing/2 and the spire is normalized to
//            V = 1 - |L' - I| / (spacing/2)
inline Var quantize_spire_op(Tape& t, Var map, const QuantizationLevels& q, bool centered) {
  const Tensor& mv = t.value(map);
  if (q.degenerate) throw std::invalid_argument("quantize: degenerate levels");
  int m_count = static_cast<int>(q.levels.size());
  std::int64_t npix = mv.numel();
  double half = q.spacing / 2.0;
  std::vector<double> centers(q.levels);
  if (centered)
    for (double& c : centers) c -= half;
  double slope = centered ? 1.0 / half : 1.0;
  Tensor out(std::vector<int>{static_cast<int>(npix), m_count}, 0.0);
  for (std::int64_t p = 0; p < npix; ++p) {
    double iv = mv.data[p];
    std::uint32_t sym = 0;
    for (int m = 0; m < m_count; ++m) {
      double d = centers[static_cast<std::size_t>(m)] - iv;
      if (std::fabs(d) < half) {
        out.data[p * m_count + m] = 1.0 - slope * std::fabs(d);
        sym = static_cast<std::uint32_t>(m + 1) * 4 + (d > 0 ? 1 : (d < 0 ? 2 : 0));
      }
    }
    t.trace_kink(sym);
  }
  auto centers_copy = centers;
  return t.custom_op(
      std::move(out), {map},
      [map, centers = std::move(centers_copy), half, slope, m_count, npix](Tape& tp, Var self) {
        if (!tp.requires_grad(map)) return;
        const Tensor& g = tp.grad_buffer(self);
        Tensor& dmap = tp.grad_buffer(map);
        const Tensor& mv = tp.value(map);
        for (std::int64_t p = 0; p < npix; ++p) {
          double iv = mv.data[p];
          double acc = 0.0;
          for (int m = 0; m < m_count; ++m) {
            double d = centers[static_cast<std::size_t>(m)] - iv;
            if (std::fabs(d) < half && d != 0.0) {
              // dV/dI = slope * sign(L - I)
              acc += g.data[p * m_count + m] * slope * (d > 0 ? 1.0 : -1.0);
            }
          }
          dmap.data[p] += acc;
        }
      });
}

// smallest distance (in intensity units) of any pixel to a quantizer kink:
// the spire edges at |L - I| = spacing/2 and the apex at I = L
inline double spire_kink_distance(const Tensor& map, const QuantizationLevels& q, bool centered) {
  double half = q.spacing / 2.0;
  double best = 1e300;
  for (double iv : map.data) {
    for (double lv : q.levels) {
      double c = centered ? lv - half : lv;
      double d = std::fabs(c - iv);
      best = std::min(best, std::fabs(d - half));
      if (d < half) best = std::min(best, d);
    }
  }
  return best;
}

// Fixed 2-d sinusoidal position table, shape (S*S, C): first half of the
// channels encodes the row index, second half the column index, wavelengths
// geometric from 2 to 2*S. The amplitude is M/S^2 so that the per-level
// position sum (roughly S^2/M pixels of unit weight) lands at O(1), matching
// the scale of the counting/level features it is added to.
inline Tensor build_pe_table(int s_img, int c_feat, int m_levels) {
  if (c_feat % 4 != 0) throw std::invalid_argument("build_pe_table: C must be divisible by 4");
  int quarter = c_feat / 4;
  std::vector<double> omega(static_cast<std::size_t>(quarter));
  for (int t = 0; t < quarter; ++t) {
    double expo = quarter > 1 ? static_cast<double>(t) / (quarter - 1) : 0.0;
    double wavelength = 2.0 * std::pow(static_cast<double>(s_img), expo);
    omega[static_cast<std::size_t>(t)] = 2.0 * 3.141592653589793238462643 / wavelength;
  }
  double amp = static_cast<double>(m_levels) / (static_cast<double>(s_img) * s_img);
  Tensor pe(std::vector<int>{s_img * s_img, c_feat});
  for (int i = 0; i < s_img; ++i)
    for (int j = 0; j < s_img; ++j) {
      double* row = pe.data.data() + (static_cast<std::size_t>(i) * s_img + j) * c_feat;
      for (int t = 0; t < quarter; ++t) {
        row[2 * t] = amp * std::sin(omega[static_cast<std::size_t>(t)] * i);
        row[2 * t + 1] = amp * std::cos(omega[static_cast<std::size_t>(t)] * i);
        row[c_feat / 2 + 2 * t] = amp * std::sin(omega[static_cast<std::size_t>(t)] * j);
        row[c_feat / 2 + 2 * t + 1] = amp * std::cos(omega[static_cast<std::size_t>(t)] * j);
      }
    }
  return pe;
}

// Learnable histogram operator: quantizes one intensity map into M soft bins,
// forms counting + level + position features per bin and correlates the bins
// with multi-head attention. Output is one (C) statistical feature.
class Lho {
 public:
  Lho() = default;

  Lho(ParamStore& ps, int s_img, int m_levels, int c_feat, int heads, bool centered, Rng& rng,
      const std::string& prefix = "lho") {
    if (m_levels < 2) throw std::invalid_argument("Lho: M must be >= 2");
    s_img_ = s_img;
    m_levels_ = m_levels;
    c_feat_ = c_feat;
    centered_ = centered;
    phi_.init(ps, prefix + ".phi", 2, c_feat, rng);
    mha_ = MultiHeadAttention(ps, c_feat, heads, rng, prefix + ".mha");
    pe_table_ = build_pe_table(s_img, c_feat, m_levels);
  }

  int m_levels() const { return m_levels_; }
  int c_feat() const { return c_feat_; }
  bool centered() const { return centered_; }

  // counting feature alone (exposed for tests and map export)
  Var count(Tape& t, Var volume) const {
    Var per_level = t.sum_axis0(volume);
    Var total = t.sum(volume);
    if (t.value(total).data[0] <= 1e-12)
      throw std::invalid_argument("count: zero total mass");
    return t.div(per_level, total);
  }

  Var position_feature(Tape& t, Var volume) const {
    Var pe = t.constant(pe_table_);
    return t.matmul(t.transpose(volume), pe);
  }

  // F^m = phi(concat(C^m, L^m)) + P^m, phi shared across levels
  Var level_feature_tokens(Tape& t, const std::vector<Var>& pv, Var counting,
                           const std::vector<double>& levels, Var pos = Var{}) const {
    Var level_const = t.constant(Tensor::from({static_cast<int>(levels.size())}, levels));
    Var cl = t.stack_cols({counting, level_const});
    Var f = phi_.apply(t, pv, cl);
    if (pos.valid()) f = t.add(f, pos);
    return f;
  }

  // full pipeline; a degenerate (constant) map short-circuits to a uniform
  // counting feature with zero position information so training stays alive
  Var forward(Tape& t, const std::vector<Var>& pv, Var map, Diagnostics* diag = nullptr,
              const std::vector<double>* frozen_levels = nullptr,
              std::vector<double>* levels_out = nullptr) const {
    const Tensor& mv = t.value(map);
    if (mv.numel() != static_cast<std::int64_t>(s_img_) * s_img_)
      throw std::invalid_argument("Lho: map size mismatch");
    QuantizationLevels q;
    if (frozen_levels) {
      q.levels = *frozen_levels;
      q.spacing = q.levels.size() >= 2 ? q.levels[1] - q.levels[0] : 0.0;
      q.degenerate = q.spacing <= 0.0;
    } else {
      q = compute_levels(mv, m_levels_);
    }
    if (levels_out) *levels_out = q.levels;

    Var tokens;
    bool fallback = q.degenerate;
    Var volume;
    if (!fallback) {
      volume = quantize_spire_op(t, map, q, centered_);
      double total = 0.0;
      for (double v : t.value(volume).data) total += v;
      fallback = total <= 1e-12;
    }
    if (fallback) {
      Var c_uniform = t.constant(Tensor(std::vector<int>{m_levels_}, 1.0 / m_levels_));
      if (diag) diag->record_count(t.value(c_uniform), true);
      tokens = level_feature_tokens(t, pv, c_uniform, q.levels);
    } else {
      Var counting = count(t, volume);
      if (diag) diag->record_count(t.value(counting), false);
      Var pos = position_feature(t, volume);
      tokens = level_feature_tokens(t, pv, counting, q.levels, pos);
    }
    Var correlated = mha_.forward(t, pv, tokens, diag);
    return t.mean_axis0(correlated);
  }

 private:
  int s_img_ = 0;
  int m_levels_ = 0;
  int c_feat_ = 0;
  bool centered_ = false;
  Affine phi_;
  MultiHeadAttention mha_;
  Tensor pe_table_;
};

}  // namespace gabortex
