#pragma once

#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "gabortex/model_config.hpp"

namespace gabortex {

// Flat key=value run configuration ('#' starts a comment). Every key has a
// default except the dataset path; unknown keys are rejected.
struct RunConfig {
  ModelConfig model;
  std::string dataset;      // manifest path
  std::string out_dir = "out";
  std::string checkpoint;   // optional: load weights before train/eval
};

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw std::invalid_argument("config: bad boolean for " + key + ": " + v);
}

template <typename T>
inline std::vector<T> parse_list(const std::string& v, const std::string& key) {
  std::vector<T> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    try {
      if constexpr (std::is_integral_v<T>)
        out.push_back(static_cast<T>(std::stoll(item)));
      else
        out.push_back(static_cast<T>(std::stod(item)));
    } catch (const std::exception&) {
      throw std::invalid_argument("config: bad list entry for " + key + ": " + item);
    }
  }
  if (out.empty()) throw std::invalid_argument("config: empty list for " + key);
  return out;
}

}  // namespace detail

inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  auto to_int = [&](const std::string& v) {
    try {
      return std::stoi(v);
    } catch (const std::exception&) {
      throw std::invalid_argument("config: bad integer for " + key + ": " + v);
    }
  };
  auto to_double = [&](const std::string& v) {
    try {
      return std::stod(v);
    } catch (const std::exception&) {
      throw std::invalid_argument("config: bad number for " + key + ": " + v);
    }
  };
  ModelConfig& m = cfg.model;
  if (key == "dataset") cfg.dataset = value;
  else if (key == "out_dir") cfg.out_dir = value;
  else if (key == "checkpoint") cfg.checkpoint = value;
  else if (key == "s_img") m.s_img = to_int(value);
  else if (key == "n_filters") m.n_filters = to_int(value);
  else if (key == "m_levels") m.m_levels = to_int(value);
  else if (key == "c_feat") m.c_feat = to_int(value);
  else if (key == "c_fpn") m.c_fpn = to_int(value);
  else if (key == "heads") m.heads = to_int(value);
  else if (key == "lambda") m.lambda_reg = to_double(value);
  else if (key == "lr") m.lr = to_double(value);
  else if (key == "momentum") m.momentum = to_double(value);
  else if (key == "steps") m.steps = to_int(value);
  else if (key == "epochs") m.epochs = to_int(value);
  else if (key == "lr_decay_step") m.lr_decay_step = to_int(value);
  else if (key == "lr_decay") m.lr_decay = to_double(value);
  else if (key == "batch") m.batch = to_int(value);
  else if (key == "seed") m.seed = static_cast<std::uint64_t>(std::stoull(value));
  else if (key == "threads") m.threads = to_int(value);
  else if (key == "augment_flip") m.augment_flip = detail::parse_bool(value, key);
  else if (key == "texture_enabled") m.texture_enabled = detail::parse_bool(value, key);
  else if (key == "constrain_params") m.constrain_params = detail::parse_bool(value, key);
  else if (key == "quantize_centered") m.quantize_centered = detail::parse_bool(value, key);
  else if (key == "semantic_widths") m.semantic_widths = detail::parse_list<int>(value, key);
  else if (key == "proposal_scales") m.proposal_scales = detail::parse_list<double>(value, key);
  else throw std::invalid_argument("config: unknown key " + key);
}

inline RunConfig parse_config_text(const std::string& text) {
  RunConfig cfg;
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config: line " + std::to_string(lineno) + " is not key=value");
    std::string key = detail::trim(line.substr(0, eq));
    std::string value = detail::trim(line.substr(eq + 1));
    set_config_value(cfg, key, value);
  }
  return cfg;
}

inline RunConfig read_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot open " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_config_text(text);
}

}  // namespace gabortex
