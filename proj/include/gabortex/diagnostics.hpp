#pragma once

#include <cmath>
#include <cstdint>

#include "gabortex/tensor.hpp"

namespace gabortex {

// Optional runtime probes used by the acceptance suite to watch structural
// invariants while the model runs.
struct Diagnostics {
  double max_softmax_rowsum_dev = 0.0;
  double max_count_sum_dev = 0.0;
  std::int64_t softmax_rows = 0;
  std::int64_t maps_processed = 0;
  std::int64_t degenerate_maps = 0;

  void record_attention(const Tensor& probs) {
    int r = probs.ndim() == 2 ? probs.dim(0) : 1;
    int c = probs.ndim() == 2 ? probs.dim(1) : static_cast<int>(probs.numel());
    for (int i = 0; i < r; ++i) {
      double s = 0.0;
      for (int j = 0; j < c; ++j) s += probs.data[static_cast<std::size_t>(i) * c + j];
      max_softmax_rowsum_dev = std::max(max_softmax_rowsum_dev, std::fabs(s - 1.0));
      ++softmax_rows;
    }
  }

  void record_count(const Tensor& c, bool degenerate) {
    ++maps_processed;
    if (degenerate) {
      ++degenerate_maps;
      return;
    }
    double s = 0.0;
    for (double v : c.data) s += v;
    max_count_sum_dev = std::max(max_count_sum_dev, std::fabs(s - 1.0));
  }
};

}  // namespace gabortex
