#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "gabortex/diagnostics.hpp"
#include "gabortex/fcm.hpp"
#include "gabortex/gabor.hpp"
#include "gabortex/gate.hpp"
#include "gabortex/lho.hpp"
#include "gabortex/model_config.hpp"
#include "gabortex/params.hpp"
#include "gabortex/synth.hpp"
#include "gabortex/tape.hpp"

namespace gabortex {

// Tiny CNN semantic branch: 4 blocks of 3x3 conv -> bias -> ReLU -> 2x average
// pool, then global average pooling and an affine head. Blocks 2..4 are
// exposed for the FPN.
class SemanticBranch {
 public:
  SemanticBranch() = default;

  SemanticBranch(ParamStore& ps, const std::vector<int>& widths, int c_feat, Rng& rng,
                 const std::string& prefix = "semantic") {
    widths_ = widths;
    int cin = 1;
    for (std::size_t i = 0; i < widths.size(); ++i) {
      ConvLayer conv;
      // ReLU gain keeps activation scale near the input scale through depth
      conv.init(ps, prefix + ".block" + std::to_string(i + 1), widths[i], cin, 3, rng, 2.449);
      blocks_.push_back(conv);
      cin = widths[i];
    }
    head_.init(ps, prefix + ".head", widths.back(), c_feat, rng);
  }

  struct Forward {
    Var feature;                    // (1, C)
    std::vector<Var> intermediates;  // outputs of blocks 2..4
  };

  Forward forward(Tape& t, const std::vector<Var>& pv, Var image3) const {
    Forward out;
    // pixels arrive in [0,1]; zero-center for the convolution stack
    Var x = t.add_scalar(t.scale(image3, 2.0), -1.0);
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      x = t.avgpool2(t.relu(blocks_[i].apply(t, pv, x, 1, 1)));
      if (i >= 1) out.intermediates.push_back(x);
    }
    Var pooled = t.reshape(t.global_avgpool(x), {1, widths_.back()});
    out.feature = head_.apply(t, pv, pooled);
    return out;
  }

  std::vector<int> intermediate_channels() const {
    return {widths_[1], widths_[2], widths_[3]};
  }

 private:
  std::vector<ConvLayer> blocks_;
  Affine head_;
  std::vector<int> widths_;
};

struct Prediction {
  Var logits;  // (n_classes)
  std::vector<int> selected;
  std::vector<GateDecision> decisions;
  Var reg_sum;  // sum over proposals of d
  bool gate_ran = false;
};

// Hooks used by the gradcheck harness: freezing the gate noise and the
// per-call quantization levels makes the forward pass a fixed smooth function
// of the parameters. The gate offset hooks swap the hard decisions for
// c + frozen(d - c), the continuous stand-in whose exact derivative is what
// the straight-through estimator computes; forward values are unchanged.
struct PassHooks {
  Diagnostics* diag = nullptr;
  const Tensor* frozen_noise = nullptr;
  const std::vector<std::vector<double>>* frozen_levels = nullptr;
  std::vector<std::vector<double>>* levels_out = nullptr;
  const Tensor* frozen_gate_offset = nullptr;
  Tensor* gate_offset_out = nullptr;
  mutable int lho_call = 0;
};

// Full two-branch model. The texture branch runs only on gated regions; its
// features are weighted by the straight-through decision so the scorer keeps
// receiving gradient.
class Network {
 public:
  enum class Mode { Train, Infer };

  explicit Network(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(Rng::mix(cfg.seed, 0xA11CEull));
    semantic_ = SemanticBranch(store_, cfg.semantic_widths, cfg.c_feat, rng);
    if (cfg.texture_enabled) {
      fpn_ = FpnBlock(store_, semantic_.intermediate_channels(), cfg.c_fpn, rng);
      scorer_.init(store_, "gate.scorer", cfg.c_fpn, 1, rng);
      // start with few regions selected; the Gaussian noise keeps exploring
      store_[scorer_.b].value.data[0] = -1.0;
      bank_ = FilterBank(store_, cfg.n_filters, cfg.s_img, rng);
      lho_ = Lho(store_, cfg.s_img, cfg.m_levels, cfg.c_feat, cfg.heads, cfg.quantize_centered,
                 rng);
      fcm_ = Fcm(store_, cfg.c_feat, cfg.heads, rng);
      proposals_ = make_proposals(cfg.proposal_scales);
    }
    // zero head: the first steps fit the classifier to whatever the branches
    // emit instead of unlearning random logits
    classifier_.init(store_, "classifier", cfg.c_feat, cfg.n_classes, rng, true);
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }
  const FilterBank& bank() const { return bank_; }
  const Lho& lho() const { return lho_; }
  const std::vector<RegionProposal>& proposals() const { return proposals_; }

  Prediction forward(Tape& t, const std::vector<Var>& pv, const Tensor& image, Mode mode,
                     Rng* noise_rng = nullptr, const PassHooks* hooks = nullptr) const {
    if (image.ndim() != 2 || image.dim(0) != image.dim(1))
      throw std::invalid_argument("forward: image must be square 2-d");
    if (image.dim(0) % 16 != 0)
      throw std::invalid_argument("forward: image side must be divisible by 16");
    Diagnostics* diag = hooks ? hooks->diag : nullptr;
    if (hooks) hooks->lho_call = 0;
    Var img = t.constant(image);
    Var img3 = t.reshape(img, {1, image.dim(0), image.dim(1)});
    SemanticBranch::Forward sem = semantic_.forward(t, pv, img3);

    Prediction pred;
    Var fused = sem.feature;
    if (cfg_.texture_enabled) {
      Var fmap = fpn_.forward(t, pv, sem.intermediates);
      Var pooled = roi_pool(t, fmap, proposals_);
      Var scores = t.reshape(scorer_.apply(t, pv, pooled), {static_cast<int>(proposals_.size())});
      GateForward gate;
      if (mode == Mode::Train) {
        Tensor noise;
        if (hooks && hooks->frozen_noise) {
          noise = *hooks->frozen_noise;
        } else {
          if (!noise_rng) throw std::invalid_argument("forward: training mode needs a noise rng");
          noise = Tensor(std::vector<int>{static_cast<int>(proposals_.size())});
          for (double& v : noise.data) v = noise_rng->normal();
        }
        gate = gate_train(t, scores, noise);
      } else {
        gate = gate_infer(t, scores);
      }
      pred.gate_ran = true;
      pred.selected = gate.selected;
      pred.decisions = gate.decisions;
      Var d_use = gate.d;
      if (mode == Mode::Train && hooks) {
        if (hooks->gate_offset_out) {
          Tensor off(std::vector<int>{static_cast<int>(gate.decisions.size())});
          for (std::size_t i = 0; i < gate.decisions.size(); ++i)
            off.data[i] = gate.decisions[i].hard - gate.decisions[i].surrogate;
          *hooks->gate_offset_out = std::move(off);
        }
        if (hooks->frozen_gate_offset)
          d_use = t.add(gate.c, t.constant(*hooks->frozen_gate_offset));
      }
      pred.reg_sum = t.sum(d_use);
      for (int k : gate.selected) {
        const RegionProposal& box = proposals_[static_cast<std::size_t>(k)];
        Var region = t.bilinear_zoom(img, box.x0, box.y0, box.x1, box.y1, cfg_.s_img);
        std::vector<FilterBank::Forward> forwards;
        std::vector<Var> maps = bank_.apply(t, pv, region, &forwards, cfg_.constrain_params);
        std::vector<Var> stats;
        stats.reserve(maps.size());
        for (Var m : maps) {
          const std::vector<double>* frozen = nullptr;
          if (hooks && hooks->frozen_levels) {
            frozen = &hooks->frozen_levels->at(static_cast<std::size_t>(hooks->lho_call));
          }
          std::vector<double> lv;
          stats.push_back(lho_.forward(t, pv, m, diag, frozen, &lv));
          if (hooks) {
            if (hooks->levels_out) hooks->levels_out->push_back(lv);
            ++hooks->lho_call;
          }
        }
        Var texture = t.reshape(fcm_.forward(t, pv, stats, forwards, diag), {1, cfg_.c_feat});
        Var weighted = t.mul(t.element(d_use, k), texture);
        fused = t.add(fused, weighted);
      }
    }
    pred.logits = t.reshape(classifier_.apply(t, pv, fused), {cfg_.n_classes});
    return pred;
  }

  // Eq.-style composite objective: cross entropy plus lambda * sum_k d^k
  Var loss(Tape& t, const Prediction& pred, int label) const {
    if (label < 0 || label >= cfg_.n_classes) throw std::invalid_argument("loss: bad label");
    Var ce = t.cross_entropy(pred.logits, label);
    if (!pred.gate_ran || cfg_.lambda_reg == 0.0) return ce;
    return t.add(ce, t.scale(pred.reg_sum, cfg_.lambda_reg));
  }

  // intensity maps and counting features of one region, for export
  struct MapExport {
    std::vector<Tensor> maps;    // N maps (S, S)
    std::vector<Tensor> counts;  // N vectors (M)
  };

  MapExport export_region_maps(const Tensor& image, const RegionProposal& box) const {
    if (!cfg_.texture_enabled) throw std::runtime_error("export: texture branch disabled");
    Tape t;
    std::vector<Var> pv = store_.bind(t);
    Var img = t.constant(image);
    Var region = t.bilinear_zoom(img, box.x0, box.y0, box.x1, box.y1, cfg_.s_img);
    std::vector<Var> maps = bank_.apply(t, pv, region, nullptr, cfg_.constrain_params);
    MapExport out;
    for (Var m : maps) {
      Tensor mv = t.value(m);
      QuantizationLevels q = compute_levels(mv, cfg_.m_levels);
      if (q.degenerate) {
        out.counts.emplace_back(std::vector<int>{cfg_.m_levels}, 1.0 / cfg_.m_levels);
      } else {
        Var vol = quantize_spire_op(t, m, q, cfg_.quantize_centered);
        out.counts.push_back(t.value(lho_.count(t, vol)));
      }
      mv.shape = {cfg_.s_img, cfg_.s_img};
      out.maps.push_back(std::move(mv));
    }
    return out;
  }

 private:
  ModelConfig cfg_;
  ParamStore store_;
  SemanticBranch semantic_;
  FpnBlock fpn_;
  Affine scorer_;
  FilterBank bank_;
  Lho lho_;
  Fcm fcm_;
  Affine classifier_;
  std::vector<RegionProposal> proposals_;
};

struct MetricsRow {
  int step = 0;
  double loss = 0.0;
  double ce = 0.0;
  double reg = 0.0;
  double acc = 0.0;
  double mean_regions = 0.0;
};

inline std::string metrics_csv_header() { return "step,loss,ce,reg,acc,mean_regions"; }

inline std::string metrics_csv_row(const MetricsRow& r) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%d,%.10g,%.10g,%.10g,%.10g,%.10g", r.step, r.loss, r.ce, r.reg,
                r.acc, r.mean_regions);
  return buf;
}

inline Tensor flip_horizontal(const Tensor& img) {
  Tensor out = img;
  int h = img.dim(0), w = img.dim(1);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) out.at(y, x) = img.at(y, w - 1 - x);
  return out;
}

struct EvalResult {
  double accuracy = 0.0;
  double mean_regions = 0.0;
  int total = 0;
};

inline int argmax_index(const Tensor& v) {
  int best = 0;
  for (std::int64_t i = 1; i < v.numel(); ++i)
    if (v.data[i] > v.data[best]) best = static_cast<int>(i);
  return best;
}

inline EvalResult evaluate(const Network& net, const LoadedDataset& data,
                           const std::vector<int>& indices, Diagnostics* diag = nullptr,
                           std::vector<std::vector<int>>* selected_out = nullptr) {
  EvalResult res;
  res.total = static_cast<int>(indices.size());
  if (indices.empty()) return res;
  int correct = 0;
  double regions = 0.0;
  for (int idx : indices) {
    Tape t;
    std::vector<Var> pv = net.params().bind(t);
    PassHooks hooks;
    hooks.diag = diag;
    Prediction pred =
        net.forward(t, pv, data.images[static_cast<std::size_t>(idx)], Network::Mode::Infer,
                    nullptr, diag ? &hooks : nullptr);
    if (argmax_index(t.value(pred.logits)) == data.labels[static_cast<std::size_t>(idx)]) ++correct;
    regions += static_cast<double>(pred.selected.size());
    if (selected_out) selected_out->push_back(pred.selected);
  }
  res.accuracy = static_cast<double>(correct) / res.total;
  res.mean_regions = regions / res.total;
  return res;
}

// Deterministic SGD training loop. Batch items run on separate tapes (and
// optionally separate threads); their gradients reduce in slot order so the
// result is bitwise reproducible for a given seed.
class Trainer {
 public:
  Trainer(Network& net, const LoadedDataset& data) : net_(net), data_(data) {}

  std::vector<MetricsRow> run(const std::string& out_dir = "", Diagnostics* diag = nullptr) {
    const ModelConfig& cfg = net_.config();
    if (data_.train_indices.empty()) throw std::runtime_error("train: empty train split");
    int steps_per_epoch =
        (static_cast<int>(data_.train_indices.size()) + cfg.batch - 1) / cfg.batch;
    int total_steps = cfg.epochs > 0 ? cfg.epochs * steps_per_epoch : cfg.steps;

    SgdOptimizer opt(cfg.lr, cfg.momentum);
    Rng shuffle_rng(Rng::mix(cfg.seed, 0x5f0f11ull));
    std::vector<int> order = data_.train_indices;
    std::size_t cursor = order.size();  // trigger shuffle on first use

    std::vector<MetricsRow> history;
    history.reserve(static_cast<std::size_t>(total_steps));
    for (int step = 0; step < total_steps; ++step) {
      std::vector<int> batch(static_cast<std::size_t>(cfg.batch));
      for (int b = 0; b < cfg.batch; ++b) {
        if (cursor >= order.size()) {
          shuffle(order, shuffle_rng);
          cursor = 0;
        }
        batch[static_cast<std::size_t>(b)] = order[cursor++];
      }

      struct SlotResult {
        std::vector<Tensor> grads;
        double loss = 0.0, ce = 0.0, reg = 0.0;
        int correct = 0, regions = 0;
      };
      std::vector<SlotResult> results(static_cast<std::size_t>(cfg.batch));
      auto run_slot = [&](int b) {
        int idx = batch[static_cast<std::size_t>(b)];
        Rng item_rng(Rng::mix(cfg.seed, 0xBA7C4000ull + static_cast<std::uint64_t>(step) * 64 + b));
        Tensor image = data_.images[static_cast<std::size_t>(idx)];
        if (cfg.augment_flip && item_rng.uniform() < 0.5) image = flip_horizontal(image);
        Tape t;
        std::vector<Var> pv = net_.params().bind(t);
        PassHooks hooks;
        hooks.diag = diag;
        Prediction pred = net_.forward(t, pv, image, Network::Mode::Train, &item_rng,
                                       diag ? &hooks : nullptr);
        Var loss = net_.loss(t, pred, data_.labels[static_cast<std::size_t>(idx)]);
        t.backward(loss);
        SlotResult& r = results[static_cast<std::size_t>(b)];
        r.grads = net_.params().collect_grads(t, pv);
        r.loss = t.value(loss).data[0];
        double reg = pred.gate_ran ? t.value(pred.reg_sum).data[0] : 0.0;
        r.reg = reg;
        r.ce = r.loss - cfg.lambda_reg * (pred.gate_ran ? reg : 0.0);
        r.correct =
            argmax_index(t.value(pred.logits)) == data_.labels[static_cast<std::size_t>(idx)];
        r.regions = static_cast<int>(pred.selected.size());
      };

      if (cfg.threads > 1) {
        std::vector<std::thread> pool;
        for (int w = 0; w < cfg.threads; ++w)
          pool.emplace_back([&, w]() {
            for (int b = w; b < cfg.batch; b += cfg.threads) run_slot(b);
          });
        for (auto& th : pool) th.join();
      } else {
        for (int b = 0; b < cfg.batch; ++b) run_slot(b);
      }

      // fixed-order reduction keeps training bitwise deterministic
      std::vector<Tensor> grads = std::move(results[0].grads);
      for (int b = 1; b < cfg.batch; ++b)
        for (std::size_t p = 0; p < grads.size(); ++p)
          for (std::int64_t i = 0; i < grads[p].numel(); ++i)
            grads[p].data[i] += results[static_cast<std::size_t>(b)].grads[p].data[i];
      double inv_batch = 1.0 / cfg.batch;
      for (auto& g : grads)
        for (double& v : g.data) v *= inv_batch;

      opt.step(net_.params(), grads);
      if (cfg.lr_decay_step > 0 && (step + 1) % cfg.lr_decay_step == 0)
        opt.set_lr(opt.lr() * cfg.lr_decay);

      MetricsRow row;
      row.step = step + 1;
      for (const SlotResult& r : results) {
        row.loss += r.loss;
        row.ce += r.ce;
        row.reg += r.reg;
        row.acc += r.correct;
        row.mean_regions += r.regions;
      }
      row.loss *= inv_batch;
      row.ce *= inv_batch;
      row.reg *= inv_batch;
      row.acc *= inv_batch;
      row.mean_regions *= inv_batch;
      history.push_back(row);
    }

    if (!out_dir.empty()) {
      std::filesystem::create_directories(out_dir);
      std::ofstream csv(std::filesystem::path(out_dir) / "metrics.csv");
      csv << metrics_csv_header() << "\n";
      for (const MetricsRow& r : history) csv << metrics_csv_row(r) << "\n";
    }
    return history;
  }

 private:
  static void shuffle(std::vector<int>& v, Rng& rng) {
    for (std::size_t i = v.size(); i > 1; --i)
      std::swap(v[i - 1], v[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(i)))]);
  }

  Network& net_;
  const LoadedDataset& data_;
};

}  // namespace gabortex
