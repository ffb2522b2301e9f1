#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "gabortex/tensor.hpp"

// Brute-force reference implementations used by tests and the gradcheck
// harness. Nothing here shares code with the tape-based implementations.
namespace gabortex::oracle {

struct GradReport {
  std::string name;
  double max_rel_err = 0.0;
  std::int64_t worst_index = -1;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  int checked = 0;
  int kink_excluded = 0;

  bool pass(double tol) const { return max_rel_err < tol; }
};

inline double rel_err(double analytic, double numeric) {
  double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-8});
  return std::fabs(analytic - numeric) / denom;
}

// central differences (f(x+h e_i) - f(x-h e_i)) / 2h per coordinate
inline Tensor finite_diff(const std::function<double(const Tensor&)>& f, const Tensor& x,
                          double h = 1e-4) {
  Tensor g(x.shape, 0.0);
  Tensor xp = x;
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    double orig = xp.data[i];
    xp.data[i] = orig + h;
    double fp = f(xp);
    xp.data[i] = orig - h;
    double fm = f(xp);
    xp.data[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw std::runtime_error("finite_diff: non-finite function value");
    g.data[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

// direct quadruple-loop cross-correlation, same convention as the tape op
inline Tensor naive_conv2d(const Tensor& in, const Tensor& ker, int pad, int stride = 1) {
  int cin = in.dim(0), h = in.dim(1), w = in.dim(2);
  int cout = ker.dim(0), k = ker.dim(2);
  int ho = (h + 2 * pad - k) / stride + 1;
  int wo = (w + 2 * pad - k) / stride + 1;
  Tensor out(std::vector<int>{cout, ho, wo});
  for (int co = 0; co < cout; ++co)
    for (int y = 0; y < ho; ++y)
      for (int x = 0; x < wo; ++x) {
        double acc = 0.0;
        for (int ci = 0; ci < cin; ++ci)
          for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
              int iy = y * stride + ky - pad;
              int ix = x * stride + kx - pad;
              if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
              acc += in.at(ci, iy, ix) *
                     ker.data[((static_cast<std::size_t>(co) * cin + ci) * k + ky) * k + kx];
            }
        out.at(co, y, x) = acc;
      }
  return out;
}

// hard per-bin counting; assumes inputs sit exactly on levels (within eps)
inline std::vector<double> naive_histogram(const std::vector<double>& values,
                                           const std::vector<double>& levels,
                                           double eps = 1e-9) {
  std::vector<double> counts(levels.size(), 0.0);
  double total = 0.0;
  for (double v : values) {
    for (std::size_t m = 0; m < levels.size(); ++m) {
      if (std::fabs(v - levels[m]) < eps) {
        counts[m] += 1.0;
        total += 1.0;
        break;
      }
    }
  }
  if (total > 0.0)
    for (double& c : counts) c /= total;
  return counts;
}

struct Dft2Result {
  Tensor magnitude;       // n x n, index (ky, kx) with frequencies centered at 0
  double peak_u = 0.0;    // cycles/pixel along x
  double peak_v = 0.0;    // cycles/pixel along y
  double peak_mag = 0.0;
};

// direct O(n^4) real-input 2-D DFT; magnitudes indexed by signed frequency
// bins ky,kx in [-n/2, n/2)
inline Dft2Result dft2(const Tensor& img) {
  if (img.ndim() != 2 || img.dim(0) != img.dim(1))
    throw std::invalid_argument("dft2: square 2-d input required");
  int n = img.dim(0);
  Dft2Result res;
  res.magnitude = Tensor(std::vector<int>{n, n});
  const double two_pi = 6.283185307179586476925287;
  std::vector<double> cos_tab(static_cast<std::size_t>(n) * n), sin_tab(static_cast<std::size_t>(n) * n);
  for (int k = 0; k < n; ++k)
    for (int p = 0; p < n; ++p) {
      double ang = two_pi * k * p / n;
      cos_tab[static_cast<std::size_t>(k) * n + p] = std::cos(ang);
      sin_tab[static_cast<std::size_t>(k) * n + p] = std::sin(ang);
    }
  for (int kyi = 0; kyi < n; ++kyi) {
    int ky = kyi - n / 2;
    int kyw = (ky % n + n) % n;
    for (int kxi = 0; kxi < n; ++kxi) {
      int kx = kxi - n / 2;
      int kxw = (kx % n + n) % n;
      double re = 0.0, im = 0.0;
      for (int y = 0; y < n; ++y) {
        const double cy = cos_tab[static_cast<std::size_t>(kyw) * n + y];
        const double sy = sin_tab[static_cast<std::size_t>(kyw) * n + y];
        double row_re = 0.0, row_im = 0.0;
        for (int x = 0; x < n; ++x) {
          double v = img.at(y, x);
          row_re += v * cos_tab[static_cast<std::size_t>(kxw) * n + x];
          row_im -= v * sin_tab[static_cast<std::size_t>(kxw) * n + x];
        }
        re += cy * row_re + sy * row_im;
        im += cy * row_im - sy * row_re;
      }
      double mag = std::sqrt(re * re + im * im);
      res.magnitude.at(kyi, kxi) = mag;
      if (mag > res.peak_mag) {
        res.peak_mag = mag;
        res.peak_u = static_cast<double>(kx) / n;
        res.peak_v = static_cast<double>(ky) / n;
      }
    }
  }
  return res;
}

// real-input spectra are centrally symmetric; fold a peak into the upper
// half-plane so it can be compared against a carrier frequency vector
inline void fold_halfplane(double& u, double& v) {
  if (v < 0.0 || (v == 0.0 && u < 0.0)) {
    u = -u;
    v = -v;
  }
}

}  // namespace gabortex::oracle
