#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "gabortex/diagnostics.hpp"
#include "gabortex/params.hpp"
#include "gabortex/tape.hpp"

namespace gabortex {

// Plain multi-head scaled dot-product self-attention over a (K, C) token
// matrix. No masking and no normalization layers around it.
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;

  MultiHeadAttention(ParamStore& ps, int dim, int heads, Rng& rng, const std::string& prefix) {
    if (heads < 1 || dim % heads != 0)
      throw std::invalid_argument("MultiHeadAttention: C must be divisible by head count");
    dim_ = dim;
    heads_ = heads;
    wq_.init(ps, prefix + ".wq", dim, dim, rng);
    wk_.init(ps, prefix + ".wk", dim, dim, rng);
    wv_.init(ps, prefix + ".wv", dim, dim, rng);
    wo_.init(ps, prefix + ".wo", dim, dim, rng);
  }

  int dim() const { return dim_; }
  int heads() const { return heads_; }

  Var forward(Tape& t, const std::vector<Var>& pv, Var tokens, Diagnostics* diag = nullptr) const {
    const Tensor& in = t.value(tokens);
    if (in.ndim() != 2 || in.dim(1) != dim_)
      throw std::invalid_argument("MultiHeadAttention: tokens must be (K, C)");
    int dh = dim_ / heads_;
    Var q = wq_.apply(t, pv, tokens);
    Var k = wk_.apply(t, pv, tokens);
    Var v = wv_.apply(t, pv, tokens);
    Var acc;
    for (int h = 0; h < heads_; ++h) {
      int c0 = h * dh, c1 = (h + 1) * dh;
      Var qh = t.cols(q, c0, c1);
      Var kh = t.cols(k, c0, c1);
      Var vh = t.cols(v, c0, c1);
      Var scores = t.scale(t.matmul(qh, t.transpose(kh)), 1.0 / std::sqrt(static_cast<double>(dh)));
      Var attn = t.softmax(scores, 1);
      if (diag) diag->record_attention(t.value(attn));
      Var oh = t.matmul(attn, vh);
      // W_o applied blockwise: concat(heads) * W_o == sum_h O_h * W_o[rows h]
      Var part = t.matmul(oh, t.rows(pv[wo_.w], c0, c1));
      acc = (h == 0) ? part : t.add(acc, part);
    }
    return t.add_row_vector(acc, pv[wo_.b]);
  }

 private:
  int dim_ = 0;
  int heads_ = 0;
  Affine wq_, wk_, wv_, wo_;
};

}  // namespace gabortex
