#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "gabortex/rng.hpp"
#include "gabortex/tensor.hpp"
#include "gabortex/tensor_io.hpp"

namespace gabortex {

enum class PatternKind { Grating, Speckle, SmoothGradient, Spotted };

struct TextureClassSpec {
  int class_id = 0;
  std::string name;
  PatternKind kind = PatternKind::Grating;
  double freq_lo = 0.0;  // cycles/pixel, carrier band
  double freq_hi = 0.0;
  double theta_lo = 0.0;
  double theta_hi = 3.141592653589793238462643;
  double noise_sigma = 0.08;
};

// Default 4-class set. The speckle class combines one low-band and two
// high-band carriers so that a single-band extractor confuses it with one of
// the pure gratings; both bands are needed to separate all four classes.
inline std::vector<TextureClassSpec> default_class_specs() {
  std::vector<TextureClassSpec> specs(4);
  specs[0] = {0, "grating-low", PatternKind::Grating, 0.05, 0.10};
  specs[1] = {1, "grating-high", PatternKind::Grating, 0.30, 0.45};
  specs[2] = {2, "speckle", PatternKind::Speckle, 0.05, 0.45};
  specs[3] = {3, "smooth-gradient", PatternKind::SmoothGradient, 0.005, 0.07};
  return specs;
}

inline void validate_class_spec(const TextureClassSpec& spec) {
  if (spec.freq_hi >= 0.5)
    throw std::invalid_argument("TextureClassSpec: carrier frequency must stay below Nyquist 0.5");
  if (spec.freq_lo < 0.0 || spec.freq_lo > spec.freq_hi)
    throw std::invalid_argument("TextureClassSpec: bad frequency band");
}

namespace detail {

inline void add_grating(Tensor& img, double freq, double theta, double phase, double amp) {
  int s = img.dim(0);
  double ct = std::cos(theta), st = std::sin(theta);
  const double two_pi = 6.283185307179586476925287;
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x)
      img.at(y, x) += amp * std::cos(two_pi * freq * (x * ct + y * st) + phase);
}

}  // namespace detail

// One synthetic sample: pattern plus Gaussian pixel noise, clipped to [0,1].
inline Tensor gen_sample(const TextureClassSpec& spec, int size, std::uint64_t seed) {
  validate_class_spec(spec);
  if (size < 8) throw std::invalid_argument("gen_sample: size too small");
  Rng rng(seed);
  Tensor img(std::vector<int>{size, size}, 0.5);
  const double two_pi = 6.283185307179586476925287;
  switch (spec.kind) {
    case PatternKind::Grating: {
      double f = rng.uniform(spec.freq_lo, spec.freq_hi);
      double th = rng.uniform(spec.theta_lo, spec.theta_hi);
      double ph = rng.uniform(0.0, two_pi);
      detail::add_grating(img, f, th, ph, 0.35);
      break;
    }
    case PatternKind::Speckle: {
      // one low-band and two high-band carriers at independent orientations
      double fl = rng.uniform(0.05, 0.10);
      detail::add_grating(img, fl, rng.uniform(0.0, two_pi / 2), rng.uniform(0.0, two_pi), 0.20);
      for (int i = 0; i < 2; ++i) {
        double fh = rng.uniform(0.30, 0.45);
        detail::add_grating(img, fh, rng.uniform(0.0, two_pi / 2), rng.uniform(0.0, two_pi), 0.16);
      }
      break;
    }
    case PatternKind::SmoothGradient: {
      double th = rng.uniform(spec.theta_lo, spec.theta_hi);
      double ct = std::cos(th), st = std::sin(th);
      double lo = 1e300, hi = -1e300;
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
          double p = x * ct + y * st;
          lo = std::min(lo, p);
          hi = std::max(hi, p);
        }
      double span = std::max(hi - lo, 1e-9);
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
          img.at(y, x) = 0.25 + 0.5 * ((x * ct + y * st) - lo) / span;
      break;
    }
    case PatternKind::Spotted: {
      int count = std::max(4, size * size / 64);
      for (int i = 0; i < count; ++i) {
        double cx = rng.uniform(0.0, size);
        double cy = rng.uniform(0.0, size);
        double r = rng.uniform(1.5, 3.0);
        double amp = (rng.uniform() < 0.5 ? -0.3 : 0.3);
        int x0 = std::max(0, static_cast<int>(cx - 3 * r)), x1 = std::min(size - 1, static_cast<int>(cx + 3 * r));
        int y0 = std::max(0, static_cast<int>(cy - 3 * r)), y1 = std::min(size - 1, static_cast<int>(cy + 3 * r));
        for (int y = y0; y <= y1; ++y)
          for (int x = x0; x <= x1; ++x) {
            double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
            img.at(y, x) += amp * std::exp(-0.5 * d2 / (r * r));
          }
      }
      break;
    }
  }
  if (spec.noise_sigma > 0.0)
    for (double& v : img.data) v += spec.noise_sigma * rng.normal();
  for (double& v : img.data) v = std::min(1.0, std::max(0.0, v));
  return img;
}

struct DatasetManifest {
  struct Sample {
    std::string path;  // relative to the manifest directory
    int label = 0;
    std::string split;  // "train" or "test"
  };
  int version = 1;
  std::vector<std::string> classes;
  std::vector<Sample> samples;
};

inline nlohmann::json manifest_to_json(const DatasetManifest& m) {
  nlohmann::json j;
  j["version"] = m.version;
  j["classes"] = m.classes;
  nlohmann::json samples = nlohmann::json::array();
  for (const auto& s : m.samples)
    samples.push_back({{"path", s.path}, {"label", s.label}, {"split", s.split}});
  j["samples"] = samples;
  return j;
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j) {
  DatasetManifest m;
  m.version = j.at("version").get<int>();
  m.classes = j.at("classes").get<std::vector<std::string>>();
  for (const auto& js : j.at("samples")) {
    DatasetManifest::Sample s;
    s.path = js.at("path").get<std::string>();
    s.label = js.at("label").get<int>();
    s.split = js.at("split").get<std::string>();
    if (s.split != "train" && s.split != "test")
      throw std::runtime_error("manifest: bad split " + s.split);
    m.samples.push_back(std::move(s));
  }
  return m;
}

inline void write_manifest(const std::string& path, const DatasetManifest& m) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_manifest: cannot open " + path);
  out << manifest_to_json(m).dump(2) << "\n";
}

inline DatasetManifest read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_manifest: cannot open " + path);
  nlohmann::json j;
  in >> j;
  return manifest_from_json(j);
}

// Generates per-class samples as TNSR files plus a manifest. Class sample
// counts are exact; train totals match round(total * ratio) with the
// remainder handed out by class index.
inline DatasetManifest gen_dataset(const std::vector<TextureClassSpec>& specs, int per_class,
                                   double split_ratio, const std::string& out_dir, int size,
                                   std::uint64_t seed) {
  if (per_class < 1) throw std::invalid_argument("gen_dataset: per_class must be >= 1");
  if (split_ratio <= 0.0 || split_ratio >= 1.0)
    throw std::invalid_argument("gen_dataset: split ratio must be in (0,1)");
  std::filesystem::create_directories(out_dir);
  DatasetManifest m;
  int n_classes = static_cast<int>(specs.size());
  int total = n_classes * per_class;
  int train_target = static_cast<int>(std::llround(total * split_ratio));
  int base = train_target / n_classes;
  int extra = train_target - base * n_classes;
  for (const auto& spec : specs) m.classes.push_back(spec.name);
  for (int c = 0; c < n_classes; ++c) {
    int train_c = std::min(per_class, base + (c < extra ? 1 : 0));
    for (int i = 0; i < per_class; ++i) {
      Tensor img = gen_sample(specs[static_cast<std::size_t>(c)], size,
                              Rng::mix(seed, static_cast<std::uint64_t>(c) * 1000003 + i));
      char name[64];
      std::snprintf(name, sizeof(name), "c%d_i%04d.tnsr", c, i);
      write_tensor((std::filesystem::path(out_dir) / name).string(), img);
      DatasetManifest::Sample s;
      s.path = name;
      s.label = c;
      s.split = (i < train_c) ? "train" : "test";
      m.samples.push_back(std::move(s));
    }
  }
  write_manifest((std::filesystem::path(out_dir) / "manifest.json").string(), m);
  return m;
}

// In-memory dataset with images loaded and validated against the manifest.
struct LoadedDataset {
  std::vector<std::string> classes;
  std::vector<Tensor> images;
  std::vector<int> labels;
  std::vector<int> train_indices;
  std::vector<int> test_indices;
  int image_size = 0;
};

inline LoadedDataset load_dataset(const std::string& manifest_path) {
  DatasetManifest m = read_manifest(manifest_path);
  std::filesystem::path dir = std::filesystem::path(manifest_path).parent_path();
  LoadedDataset d;
  d.classes = m.classes;
  for (const auto& s : m.samples) {
    Tensor img = read_tensor((dir / s.path).string());
    if (img.ndim() != 2 || img.dim(0) != img.dim(1))
      throw std::runtime_error("load_dataset: " + s.path + " is not a square image");
    if (d.image_size == 0) d.image_size = img.dim(0);
    if (img.dim(0) != d.image_size)
      throw std::runtime_error("load_dataset: inconsistent image sizes");
    if (s.label < 0 || s.label >= static_cast<int>(m.classes.size()))
      throw std::runtime_error("load_dataset: label out of range in " + s.path);
    int idx = static_cast<int>(d.images.size());
    d.images.push_back(std::move(img));
    d.labels.push_back(s.label);
    (s.split == "train" ? d.train_indices : d.test_indices).push_back(idx);
  }
  return d;
}

}  // namespace gabortex
