#pragma once

#include <cmath>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "gabortex/params.hpp"
#include "gabortex/rng.hpp"
#include "gabortex/tape.hpp"

namespace gabortex {

inline constexpr double kPi = 3.141592653589793238462643;
inline constexpr double kTwoPi = 2.0 * kPi;

// Valid parameter ranges for a region of side S pixels. Derived from keeping
// +-2.5 sigma of the envelope inside the image in the spatial domain and
// inside [-0.5, 0.5] cycles/pixel in the frequency domain. The sigma_x lower
// bound depends on the current frequency W.
struct ValidRanges {
  int region_size = 0;
  double theta_lo = 0.0;
  double theta_hi = kPi;
  double sigma_y_lo = 0.0;
  double sigma_y_hi = 0.0;
  double sigma_upper = 0.0;  // shared spatial upper bound S/5
  double w_lo = 0.0;
  double w_hi = 0.0;     // (2*pi*S - 25) / (4*pi*S)
  double w_split = 0.0;  // equal split between the low and high frequency bands

  double sigma_x_lower(double w) const { return 5.0 / (kTwoPi * (1.0 - 2.0 * w)); }

  double w_band_lo(bool high) const { return high ? w_split : w_lo; }
  double w_band_hi(bool high) const { return high ? w_hi : w_split; }
};

inline ValidRanges valid_ranges(int s_img) {
  if (s_img < 16)
    throw std::invalid_argument("valid_ranges: region size below 16 inverts the ranges");
  ValidRanges r;
  r.region_size = s_img;
  r.sigma_y_lo = 5.0 / kTwoPi;
  r.sigma_y_hi = static_cast<double>(s_img) / 5.0;
  r.sigma_upper = r.sigma_y_hi;
  r.w_lo = 0.0;
  r.w_hi = (kTwoPi * s_img - 25.0) / (2.0 * kTwoPi * s_img);
  r.w_split = 0.5 * r.w_hi;
  return r;
}

// A raw unbounded scalar mapped into (lower, upper) through a sigmoid.
struct ConstrainedParam {
  double raw = 0.0;
  double lower = 0.0;
  double upper = 0.0;
};

inline double constrain(const ConstrainedParam& p) {
  if (p.lower >= p.upper) throw std::invalid_argument("constrain: lower >= upper");
  return p.lower + (p.upper - p.lower) * Tape::sigmoid_value(p.raw);
}

// tape version: lower + (upper - lower) * sigmoid(raw)
inline Var constrain_var(Tape& t, Var raw, double lower, double upper) {
  if (lower >= upper) throw std::invalid_argument("constrain: lower >= upper");
  return t.add_scalar(t.scale(t.sigmoid(raw), upper - lower), lower);
}

// frequency-domain magnitude of the filter at (u, v) cycles/pixel; the plane
// is rotated by -theta so the theta = 0 case reduces to the closed form
inline double frequency_response(double sigma_x, double sigma_y, double theta, double w, double u,
                                 double v) {
  double ct = std::cos(theta), st = std::sin(theta);
  double ur = u * ct + v * st;
  double vr = -u * st + v * ct;
  double ex = 4.0 * kPi * kPi *
              (sigma_x * sigma_x * (ur - w) * (ur - w) + sigma_y * sigma_y * vr * vr);
  return std::exp(-0.5 * ex);
}

// Synthesizes the complex Gabor kernel as one tape node of shape (2, k, k)
// (real plane then imaginary plane) with analytic derivatives w.r.t. the four
// scalar parameters.
inline Var gabor_kernel_op(Tape& t, Var sigma_x, Var sigma_y, Var theta, Var w, int ksize) {
  if (ksize < 3 || ksize % 2 == 0) throw std::invalid_argument("gabor_kernel: bad kernel size");
  const double sx = t.value(sigma_x).data[0];
  const double sy = t.value(sigma_y).data[0];
  const double th = t.value(theta).data[0];
  const double wv = t.value(w).data[0];
  const int half = ksize / 2;
  const double amp = 1.0 / (kTwoPi * sx * sy);
  const double ct = std::cos(th), st = std::sin(th);
  Tensor out(std::vector<int>{2, ksize, ksize});
  for (int yi = 0; yi < ksize; ++yi) {
    double y = yi - half;
    for (int xi = 0; xi < ksize; ++xi) {
      double x = xi - half;
      double xr = x * ct + y * st;
      double yr = -x * st + y * ct;
      double env = amp * std::exp(-0.5 * (xr * xr / (sx * sx) + yr * yr / (sy * sy)));
      double phase = kTwoPi * wv * xr;
      out.at(0, yi, xi) = env * std::cos(phase);
      out.at(1, yi, xi) = env * std::sin(phase);
    }
  }
  return t.custom_op(std::move(out), {sigma_x, sigma_y, theta, w},
                     [sigma_x, sigma_y, theta, w, ksize, half, sx, sy, ct, st,
                      wv](Tape& tp, Var self) {
                       const Tensor& g = tp.grad_buffer(self);
                       const Tensor& val = tp.value(self);
                       double dsx = 0.0, dsy = 0.0, dth = 0.0, dw = 0.0;
                       for (int yi = 0; yi < ksize; ++yi) {
                         double y = yi - half;
                         for (int xi = 0; xi < ksize; ++xi) {
                           double x = xi - half;
                           double xr = x * ct + y * st;
                           double yr = -x * st + y * ct;
                           double re = val.at(0, yi, xi);
                           double im = val.at(1, yi, xi);
                           double gre = g.at(0, yi, xi);
                           double gim = g.at(1, yi, xi);
                           double dot = gre * re + gim * im;
                           double cross = gim * re - gre * im;
                           dsx += dot * (xr * xr / (sx * sx * sx) - 1.0 / sx);
                           dsy += dot * (yr * yr / (sy * sy * sy) - 1.0 / sy);
                           dth += dot * xr * yr * (1.0 / (sy * sy) - 1.0 / (sx * sx)) +
                                  cross * kTwoPi * wv * yr;
                           dw += cross * kTwoPi * xr;
                         }
                       }
                       if (tp.requires_grad(sigma_x)) tp.grad_buffer(sigma_x).data[0] += dsx;
                       if (tp.requires_grad(sigma_y)) tp.grad_buffer(sigma_y).data[0] += dsy;
                       if (tp.requires_grad(theta)) tp.grad_buffer(theta).data[0] += dth;
                       if (tp.requires_grad(w)) tp.grad_buffer(w).data[0] += dw;
                     });
}

enum class Band { Low, High };

struct GaborFilterSpec {
  Band band = Band::Low;
  int kernel_size = 0;
  int raw_sigma_x = -1;
  int raw_sigma_y = -1;
  int raw_theta = -1;
  int raw_w = -1;
};

inline int gabor_kernel_size(int s_img) {
  int k = s_img / 2 + 1;
  if (k % 2 == 0) ++k;
  return std::min(k, 33);
}

// Bank of N learnable filters; the first N/2 are structurally pinned to the
// low-frequency half of the W range and the rest to the high half.
class FilterBank {
 public:
  struct Forward {
    Var sigma_x, sigma_y, theta, w;
    Var kernel;  // (2, k, k)
  };

  FilterBank() = default;

  FilterBank(ParamStore& ps, int n, int s_img, Rng& rng, const std::string& prefix = "gabor") {
    if (n < 2 || n % 2 != 0) throw std::invalid_argument("FilterBank: N must be even and >= 2");
    ranges_ = valid_ranges(s_img);
    s_img_ = s_img;
    int ksize = gabor_kernel_size(s_img);
    filters_.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      GaborFilterSpec spec;
      spec.band = (i < n / 2) ? Band::Low : Band::High;
      spec.kernel_size = ksize;
      std::string base = prefix + "." + std::to_string(i);
      spec.raw_sigma_x = ps.add(base + ".sigma_x", Tensor::scalar(rng.uniform(-1.0, 1.0)));
      spec.raw_sigma_y = ps.add(base + ".sigma_y", Tensor::scalar(rng.uniform(-1.0, 1.0)));
      spec.raw_theta = ps.add(base + ".theta", Tensor::scalar(rng.uniform(-1.0, 1.0)));
      spec.raw_w = ps.add(base + ".w", Tensor::scalar(rng.uniform(-1.0, 1.0)));
      filters_.push_back(spec);
    }
  }

  int size() const { return static_cast<int>(filters_.size()); }
  int region_size() const { return s_img_; }
  const ValidRanges& ranges() const { return ranges_; }
  const GaborFilterSpec& spec(int i) const { return filters_.at(static_cast<std::size_t>(i)); }

  // constrains the raw parameters on the tape and synthesizes the kernel;
  // sigma_x's lower bound is re-derived from the live W so gradient flows
  // through both raws
  Forward filter_forward(Tape& t, const std::vector<Var>& pv, int i,
                         bool constrained = true) const {
    const GaborFilterSpec& f = filters_.at(static_cast<std::size_t>(i));
    Forward fw;
    if (constrained) {
      bool high = f.band == Band::High;
      fw.theta = constrain_var(t, pv[f.raw_theta], ranges_.theta_lo, ranges_.theta_hi);
      fw.sigma_y = constrain_var(t, pv[f.raw_sigma_y], ranges_.sigma_y_lo, ranges_.sigma_y_hi);
      fw.w = constrain_var(t, pv[f.raw_w], ranges_.w_band_lo(high), ranges_.w_band_hi(high));
      // live lower bound: 5 / (2*pi*(1 - 2W))
      Var one_minus_2w = t.add_scalar(t.scale(fw.w, -2.0), 1.0);
      Var lower = t.scale(t.reciprocal(one_minus_2w), 5.0 / kTwoPi);
      Var width = t.sub(t.constant_scalar(ranges_.sigma_upper), lower);
      fw.sigma_x = t.add(lower, t.mul(width, t.sigmoid(pv[f.raw_sigma_x])));
    } else {
      // raw values used directly (ablation mode); only a tiny floor on the
      // scales keeps the amplitude finite
      fw.theta = pv[f.raw_theta];
      fw.w = pv[f.raw_w];
      fw.sigma_x = t.clamp(t.abs(pv[f.raw_sigma_x]), 1e-2, 1e9);
      fw.sigma_y = t.clamp(t.abs(pv[f.raw_sigma_y]), 1e-2, 1e9);
    }
    fw.kernel = gabor_kernel_op(t, fw.sigma_x, fw.sigma_y, fw.theta, fw.w, f.kernel_size);
    return fw;
  }

  // intensity map of one filter on a zoomed region: complex modulus of the
  // same-size convolution, smoothed so the square root stays differentiable
  Var intensity_map(Tape& t, const Forward& fw, Var region) const {
    const Tensor& reg = t.value(region);
    if (reg.ndim() != 2 || reg.dim(0) != s_img_ || reg.dim(1) != s_img_)
      throw std::invalid_argument("apply_bank: region size mismatch");
    int k = t.value(fw.kernel).dim(1);
    Var input = t.reshape(region, {1, s_img_, s_img_});
    Var kernels = t.reshape(fw.kernel, {2, 1, k, k});
    Var resp = t.conv2d(input, kernels, k / 2, 1);
    Var re = t.select_channel(resp, 0);
    Var im = t.select_channel(resp, 1);
    Var sq = t.add(t.mul(re, re), t.mul(im, im));
    return t.sqrt(t.add_scalar(sq, 1e-12));
  }

  std::vector<Var> apply(Tape& t, const std::vector<Var>& pv, Var region,
                         std::vector<Forward>* forwards = nullptr,
                         bool constrained = true) const {
    std::vector<Var> maps;
    maps.reserve(filters_.size());
    for (int i = 0; i < size(); ++i) {
      Forward fw = filter_forward(t, pv, i, constrained);
      maps.push_back(intensity_map(t, fw, region));
      if (forwards) forwards->push_back(fw);
    }
    return maps;
  }

  // current constrained values straight from the store (no tape), e.g. for
  // inspection and the structural range checks
  struct Values {
    double sigma_x, sigma_y, theta, w;
  };

  Values constrained_values(const ParamStore& ps, int i) const {
    const GaborFilterSpec& f = filters_.at(static_cast<std::size_t>(i));
    bool high = f.band == Band::High;
    Values v{};
    v.theta = constrain({ps[f.raw_theta].value.data[0], ranges_.theta_lo, ranges_.theta_hi});
    v.sigma_y =
        constrain({ps[f.raw_sigma_y].value.data[0], ranges_.sigma_y_lo, ranges_.sigma_y_hi});
    v.w = constrain({ps[f.raw_w].value.data[0], ranges_.w_band_lo(high), ranges_.w_band_hi(high)});
    double lo = ranges_.sigma_x_lower(v.w);
    v.sigma_x = constrain({ps[f.raw_sigma_x].value.data[0], lo, ranges_.sigma_upper});
    return v;
  }

 private:
  std::vector<GaborFilterSpec> filters_;
  ValidRanges ranges_;
  int s_img_ = 0;
};

}  // namespace gabortex
