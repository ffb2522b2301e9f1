#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "gabortex/attention.hpp"
#include "gabortex/gabor.hpp"
#include "gabortex/params.hpp"
#include "gabortex/tape.hpp"

namespace gabortex {

// Filter correlation module: embeds each filter's (sigma_x, sigma_y, theta, W)
// with a learnable 4 -> C map, adds it to the filter's statistical feature,
// runs multi-head attention across filters and averages the tokens.
class Fcm {
 public:
  Fcm() = default;

  Fcm(ParamStore& ps, int c_feat, int heads, Rng& rng, const std::string& prefix = "fcm") {
    c_feat_ = c_feat;
    embed_.init(ps, prefix + ".embed", 4, c_feat, rng);
    mha_ = MultiHeadAttention(ps, c_feat, heads, rng, prefix + ".mha");
  }

  int c_feat() const { return c_feat_; }

  Var forward(Tape& t, const std::vector<Var>& pv, const std::vector<Var>& stats,
              const std::vector<FilterBank::Forward>& filters, Diagnostics* diag = nullptr) const {
    if (stats.empty() || stats.size() != filters.size())
      throw std::invalid_argument("Fcm: stats and filter count mismatch");
    std::vector<Var> tokens;
    tokens.reserve(stats.size());
    for (std::size_t n = 0; n < stats.size(); ++n) {
      const FilterBank::Forward& f = filters[n];
      Var params = t.stack_cols({f.sigma_x, f.sigma_y, f.theta, f.w});  // (1, 4)
      Var emb = embed_.apply(t, pv, params);                            // (1, C)
      tokens.push_back(t.add(t.reshape(stats[n], {1, c_feat_}), emb));
    }
    Var mat = t.stack_rows(tokens);
    Var correlated = mha_.forward(t, pv, mat, diag);
    return t.mean_axis0(correlated);
  }

 private:
  int c_feat_ = 0;
  Affine embed_;
  MultiHeadAttention mha_;
};

}  // namespace gabortex
