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

// Axis-aligned box in fractional image coordinates.
struct RegionProposal {
  double x0 = 0.0, y0 = 0.0, x1 = 0.0, y1 = 0.0;

  RegionProposal() = default;
  RegionProposal(double x0_, double y0_, double x1_, double y1_) : x0(x0_), y0(y0_), x1(x1_), y1(y1_) {
    if (!(x0 < x1 && y0 < y1)) throw std::invalid_argument("RegionProposal: empty box");
    if ((x1 - x0) * (y1 - y0) < 1.0 / 64.0 - 1e-12)
      throw std::invalid_argument("RegionProposal: area below 1/64 of the image");
  }
};

// Deterministic multi-scale sliding-window proposals: for each window scale
// the stride is half the window side; ordering is scale-major then row-major.
inline std::vector<RegionProposal> make_proposals(
    const std::vector<double>& scales = {0.5, 0.25}) {
  std::vector<RegionProposal> out;
  for (double s : scales) {
    if (s <= 0.0 || s > 1.0) throw std::invalid_argument("make_proposals: bad scale");
    double stride = s / 2.0;
    int steps = static_cast<int>(std::llround((1.0 - s) / stride)) + 1;
    for (int iy = 0; iy < steps; ++iy)
      for (int ix = 0; ix < steps; ++ix) {
        double x0 = std::min(ix * stride, 1.0 - s);
        double y0 = std::min(iy * stride, 1.0 - s);
        out.emplace_back(x0, y0, x0 + s, y0 + s);
      }
  }
  return out;
}

// Mean over the feature cells whose centers fall inside each box (adaptive
// average pooling to 1x1); an empty cell set falls back to the single cell
// nearest the box center.
inline Var roi_pool(Tape& t, Var fmap, const std::vector<RegionProposal>& boxes) {
  const Tensor& f = t.value(fmap);
  if (f.ndim() != 3) throw std::invalid_argument("roi_pool: feature map must be (C,H,W)");
  if (boxes.empty()) throw std::invalid_argument("roi_pool: no boxes");
  int c = f.dim(0), h = f.dim(1), w = f.dim(2);
  int k = static_cast<int>(boxes.size());
  auto cells = std::make_shared<std::vector<std::vector<int>>>();
  cells->reserve(boxes.size());
  for (const RegionProposal& b : boxes) {
    std::vector<int> inside;
    for (int i = 0; i < h; ++i) {
      double cy = (i + 0.5) / h;
      if (cy < b.y0 || cy >= b.y1) continue;
      for (int j = 0; j < w; ++j) {
        double cx = (j + 0.5) / w;
        if (cx >= b.x0 && cx < b.x1) inside.push_back(i * w + j);
      }
    }
    if (inside.empty()) {
      double bx = 0.5 * (b.x0 + b.x1), by = 0.5 * (b.y0 + b.y1);
      double best = 1e300;
      int best_cell = 0;
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
          double dx = (j + 0.5) / w - bx, dy = (i + 0.5) / h - by;
          double d = dx * dx + dy * dy;
          if (d < best) {
            best = d;
            best_cell = i * w + j;
          }
        }
      inside.push_back(best_cell);
    }
    cells->push_back(std::move(inside));
  }
  Tensor out(std::vector<int>{k, c});
  int spatial = h * w;
  for (int b = 0; b < k; ++b) {
    const std::vector<int>& cs = (*cells)[static_cast<std::size_t>(b)];
    double inv = 1.0 / static_cast<double>(cs.size());
    for (int ci = 0; ci < c; ++ci) {
      double acc = 0.0;
      for (int cell : cs) acc += f.data[static_cast<std::size_t>(ci) * spatial + cell];
      out.at(b, ci) = acc * inv;
    }
  }
  return t.custom_op(std::move(out), {fmap}, [fmap, cells, c, spatial, k](Tape& tp, Var self) {
    if (!tp.requires_grad(fmap)) return;
    const Tensor& g = tp.grad_buffer(self);
    Tensor& df = tp.grad_buffer(fmap);
    for (int b = 0; b < k; ++b) {
      const std::vector<int>& cs = (*cells)[static_cast<std::size_t>(b)];
      double inv = 1.0 / static_cast<double>(cs.size());
      for (int ci = 0; ci < c; ++ci) {
        double gv = g.at(b, ci) * inv;
        for (int cell : cs) df.data[static_cast<std::size_t>(ci) * spatial + cell] += gv;
      }
    }
  });
}

// max(0, min(1, 1.2*sigmoid(x) - 0.1)); saturates exactly at 0 and 1
inline Var saturating_sigmoid(Tape& t, Var x) {
  return t.clamp(t.add_scalar(t.scale(t.sigmoid(x), 1.2), -0.1), 0.0, 1.0);
}

inline double saturating_sigmoid_value(double x) {
  return std::max(0.0, std::min(1.0, 1.2 * Tape::sigmoid_value(x) - 0.1));
}

// Shallow FPN block: per-level learnable 1x1 projections to a common width,
// nearest upsampling of the coarser levels to the finest size, then a sum.
class FpnBlock {
 public:
  FpnBlock() = default;

  FpnBlock(ParamStore& ps, const std::vector<int>& level_channels, int c_fpn, Rng& rng,
           const std::string& prefix = "fpn") {
    if (level_channels.size() < 2) throw std::invalid_argument("FpnBlock: need at least 2 levels");
    c_fpn_ = c_fpn;
    projections_.resize(level_channels.size());
    for (std::size_t i = 0; i < level_channels.size(); ++i)
      projections_[i].init(ps, prefix + ".proj" + std::to_string(i), c_fpn, level_channels[i], 1,
                           rng);
  }

  int c_fpn() const { return c_fpn_; }

  Var forward(Tape& t, const std::vector<Var>& pv, const std::vector<Var>& levels) const {
    if (levels.size() != projections_.size())
      throw std::invalid_argument("FpnBlock: level count mismatch");
    int finest = 0;
    for (Var lv : levels) finest = std::max(finest, t.value(lv).dim(1));
    Var acc;
    for (std::size_t i = 0; i < levels.size(); ++i) {
      const Tensor& lt = t.value(levels[i]);
      if (lt.ndim() != 3 || finest % lt.dim(1) != 0 || lt.dim(1) != lt.dim(2))
        throw std::invalid_argument("FpnBlock: level sizes not aligned");
      int side = lt.dim(1);
      Var proj = projections_[i].apply(t, pv, levels[i], 0, 1);
      int factor = finest / side;
      if (factor > 1) proj = t.upsample_nearest(proj, factor);
      acc = (i == 0) ? proj : t.add(acc, proj);
    }
    return acc;
  }

 private:
  int c_fpn_ = 0;
  std::vector<ConvLayer> projections_;
};

struct GateDecision {
  double score = 0.0;      // s
  double noisy = 0.0;      // s_hat (equals s at inference)
  double surrogate = 0.0;  // c, saturating sigmoid of the decision input
  int hard = 0;            // d
};

struct GateForward {
  Var d;  // (K,) hard decisions with straight-through gradients in training
  Var c;  // (K,) surrogate (training mode only)
  std::vector<int> selected;
  std::vector<GateDecision> decisions;
};

// training mode: adds i.i.d. standard Gaussian noise per proposal, decides
// d = 1(s_hat > 0) and routes gradients through the saturating surrogate
inline GateForward gate_train(Tape& t, Var scores, const Tensor& noise) {
  Tensor s = t.value(scores);  // copy: tape storage may move as nodes are added
  int k = static_cast<int>(s.numel());
  if (noise.numel() != k) throw std::invalid_argument("gate_train: noise length mismatch");
  Var s_hat = t.add(scores, t.constant(noise));
  GateForward out;
  out.c = saturating_sigmoid(t, s_hat);
  Tensor sh = t.value(s_hat);
  Tensor cv = t.value(out.c);
  Tensor hard(std::vector<int>{k});
  out.decisions.resize(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) {
    GateDecision& gd = out.decisions[static_cast<std::size_t>(i)];
    gd.score = s.data[i];
    gd.noisy = sh.data[i];
    gd.surrogate = cv.data[i];
    gd.hard = sh.data[i] > 0.0 ? 1 : 0;
    hard.data[i] = gd.hard;
    if (gd.hard) out.selected.push_back(i);
  }
  out.d = t.straight_through(out.c, hard);
  return out;
}

inline GateForward gate_train(Tape& t, Var scores, Rng& noise_rng) {
  int k = static_cast<int>(t.value(scores).numel());
  Tensor noise(std::vector<int>{k});
  for (double& v : noise.data) v = noise_rng.normal();
  return gate_train(t, scores, noise);
}

// inference mode: deterministic, no noise, d = 1(s > 0) with strict inequality
inline GateForward gate_infer(Tape& t, Var scores) {
  Tensor s = t.value(scores);
  int k = static_cast<int>(s.numel());
  GateForward out;
  Tensor hard(std::vector<int>{k});
  out.decisions.resize(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) {
    GateDecision& gd = out.decisions[static_cast<std::size_t>(i)];
    gd.score = s.data[i];
    gd.noisy = s.data[i];
    gd.surrogate = saturating_sigmoid_value(s.data[i]);
    gd.hard = s.data[i] > 0.0 ? 1 : 0;
    hard.data[i] = gd.hard;
    if (gd.hard) out.selected.push_back(i);
  }
  out.d = t.constant(std::move(hard));
  return out;
}

}  // namespace gabortex
