#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "gabortex/rng.hpp"
#include "gabortex/tape.hpp"
#include "gabortex/tensor.hpp"

namespace gabortex {

struct Parameter {
  std::string name;
  Tensor value;
};

// Flat registry of every learnable tensor. Registration order is the
// canonical order for binding, gradient reduction and checkpoints.
class ParamStore {
 public:
  int add(std::string name, Tensor value) {
    value.requires_grad = true;
    params_.push_back(Parameter{std::move(name), std::move(value)});
    return static_cast<int>(params_.size()) - 1;
  }

  Parameter& operator[](int i) { return params_.at(static_cast<std::size_t>(i)); }
  const Parameter& operator[](int i) const { return params_.at(static_cast<std::size_t>(i)); }
  std::size_t size() const { return params_.size(); }

  int find(const std::string& name) const {
    for (std::size_t i = 0; i < params_.size(); ++i)
      if (params_[i].name == name) return static_cast<int>(i);
    return -1;
  }

  // binds every parameter as a tape leaf; result aligned with store order
  std::vector<Var> bind(Tape& tape) const {
    std::vector<Var> vars;
    vars.reserve(params_.size());
    for (const Parameter& p : params_) vars.push_back(tape.leaf(p.value));
    return vars;
  }

  // reads gradients for all bound leaves (zeros where backward never reached)
  std::vector<Tensor> collect_grads(Tape& tape, const std::vector<Var>& vars) {
    std::vector<Tensor> grads;
    grads.reserve(vars.size());
    for (Var v : vars) grads.push_back(tape.grad(v));
    return grads;
  }

 private:
  std::vector<Parameter> params_;
};

// classic momentum SGD: v <- momentum*v + g; p <- p - lr*v
class SgdOptimizer {
 public:
  SgdOptimizer(double lr, double momentum) : lr_(lr), momentum_(momentum) {}

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

  void step(ParamStore& store, const std::vector<Tensor>& grads) {
    if (grads.size() != store.size()) throw std::invalid_argument("sgd: gradient count mismatch");
    if (velocity_.empty())
      for (std::size_t i = 0; i < store.size(); ++i)
        velocity_.emplace_back(store[static_cast<int>(i)].value.shape, 0.0);
    for (std::size_t i = 0; i < store.size(); ++i) {
      Tensor& p = store[static_cast<int>(i)].value;
      Tensor& v = velocity_[i];
      const Tensor& g = grads[i];
      for (std::int64_t j = 0; j < p.numel(); ++j) {
        v.data[j] = momentum_ * v.data[j] + g.data[j];
        p.data[j] -= lr_ * v.data[j];
      }
    }
  }

 private:
  double lr_;
  double momentum_;
  std::vector<Tensor> velocity_;
};

// learnable affine map x (R,in) -> (R,out)
struct Affine {
  int w = -1;
  int b = -1;
  int in = 0;
  int out = 0;

  void init(ParamStore& ps, const std::string& name, int in_dim, int out_dim, Rng& rng,
            bool zero_init = false) {
    in = in_dim;
    out = out_dim;
    double s = zero_init ? 0.0 : 1.0 / std::sqrt(static_cast<double>(in_dim));
    Tensor weight(std::vector<int>{in_dim, out_dim});
    for (double& v : weight.data) v = rng.uniform(-s, s);
    w = ps.add(name + ".weight", std::move(weight));
    b = ps.add(name + ".bias", Tensor(std::vector<int>{out_dim}, 0.0));
  }

  Var apply(Tape& t, const std::vector<Var>& pv, Var x) const {
    return t.add_row_vector(t.matmul(x, pv[w]), pv[b]);
  }
};

// learnable 2-d convolution (square kernel) with per-channel bias
struct ConvLayer {
  int w = -1;
  int b = -1;
  int cout = 0;
  int cin = 0;
  int k = 0;

  void init(ParamStore& ps, const std::string& name, int out_ch, int in_ch, int ksize, Rng& rng,
            double gain = 1.0) {
    cout = out_ch;
    cin = in_ch;
    k = ksize;
    double s = gain / std::sqrt(static_cast<double>(in_ch) * ksize * ksize);
    Tensor weight(std::vector<int>{out_ch, in_ch, ksize, ksize});
    for (double& v : weight.data) v = rng.uniform(-s, s);
    w = ps.add(name + ".weight", std::move(weight));
    b = ps.add(name + ".bias", Tensor(std::vector<int>{out_ch}, 0.0));
  }

  Var apply(Tape& t, const std::vector<Var>& pv, Var x, int pad, int stride = 1) const {
    return t.add_channel_bias(t.conv2d(x, pv[w], pad, stride), pv[b]);
  }
};

}  // namespace gabortex
