#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

namespace gabortex {

// Desk-scale defaults; the paper-scale values (S=112, N=128, lr 1e-4,
// batch 16) remain reachable through the config file.
struct ModelConfig {
  int s_img = 32;       // zoom size of selected regions
  int n_filters = 16;   // even; half low-band, half high-band
  int m_levels = 8;     // quantization levels
  int c_feat = 32;      // feature width, divisible by 4 and by heads
  int c_fpn = 32;       // fused FPN width
  int heads = 4;
  int n_classes = 4;
  double lambda_reg = 0.2;  // weight of the selected-region penalty
  double lr = 1e-3;
  double momentum = 0.9;
  int steps = 200;
  int epochs = 0;  // when > 0, overrides steps as epochs * ceil(ntrain/batch)
  int lr_decay_step = 120;
  double lr_decay = 0.1;
  int batch = 8;
  std::uint64_t seed = 42;
  int threads = 1;
  bool augment_flip = true;
  bool texture_enabled = true;
  bool constrain_params = true;
  bool quantize_centered = false;
  std::vector<int> semantic_widths = {8, 16, 32, 32};
  std::vector<double> proposal_scales = {0.5, 0.25};

  void validate() const {
    if (n_filters < 2 || n_filters % 2 != 0)
      throw std::invalid_argument("config: n_filters must be even and >= 2");
    if (m_levels < 2) throw std::invalid_argument("config: m_levels must be >= 2");
    if (c_feat % 4 != 0 || c_feat % heads != 0)
      throw std::invalid_argument("config: c_feat must be divisible by 4 and by heads");
    if (lambda_reg < 0.0) throw std::invalid_argument("config: lambda must be >= 0");
    if (batch < 1 || steps < 0 || threads < 1) throw std::invalid_argument("config: bad sizes");
    if (semantic_widths.size() != 4)
      throw std::invalid_argument("config: semantic_widths must list 4 block widths");
    if (proposal_scales.empty()) throw std::invalid_argument("config: no proposal scales");
  }
};

}  // namespace gabortex
