#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "gabortex/checkpoint.hpp"
#include "gabortex/config.hpp"
#include "gabortex/gradcheck.hpp"
#include "gabortex/network.hpp"
#include "gabortex/oracle.hpp"
#include "gabortex/synth.hpp"
#include "gabortex/tensor_io.hpp"

namespace {

using namespace gabortex;

struct CommonOpts {
  std::string config_path;
  std::string dataset;
  std::string out_dir;
  std::string checkpoint;
  std::vector<std::string> overrides;
  std::int64_t seed = -1;
  int threads = 0;
  int steps = -1;
};

void add_common(CLI::App* cmd, CommonOpts& opts, bool need_dataset) {
  cmd->add_option("--config", opts.config_path, "flat key=value config file");
  auto* ds = cmd->add_option("--dataset", opts.dataset, "dataset manifest path");
  if (need_dataset) ds->description("dataset manifest path (required here or in --config)");
  cmd->add_option("--out", opts.out_dir, "output directory")->capture_default_str();
  cmd->add_option("--checkpoint", opts.checkpoint, "checkpoint file to load");
  cmd->add_option("--seed", opts.seed, "seed override");
  cmd->add_option("--threads", opts.threads, "worker threads (default 1)");
  cmd->add_option("--steps", opts.steps, "training step count override");
  cmd->add_option("--set", opts.overrides, "extra key=value config overrides")->expected(-1);
}

RunConfig resolve_config(const CommonOpts& opts) {
  RunConfig cfg;
  if (!opts.config_path.empty()) cfg = read_config(opts.config_path);
  for (const std::string& kv : opts.overrides) {
    std::size_t eq = kv.find('=');
    if (eq == std::string::npos) throw std::runtime_error("--set expects key=value, got " + kv);
    set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (!opts.dataset.empty()) cfg.dataset = opts.dataset;
  if (!opts.out_dir.empty()) cfg.out_dir = opts.out_dir;
  if (!opts.checkpoint.empty()) cfg.checkpoint = opts.checkpoint;
  if (opts.seed >= 0) cfg.model.seed = static_cast<std::uint64_t>(opts.seed);
  if (opts.threads > 0) cfg.model.threads = opts.threads;
  if (opts.steps >= 0) cfg.model.steps = opts.steps;
  return cfg;
}

int cmd_gen_data(const std::string& out_dir, int classes, int per_class, int size,
                 std::uint64_t seed, double split_ratio) {
  std::vector<TextureClassSpec> specs = default_class_specs();
  if (classes < 2 || classes > static_cast<int>(specs.size()))
    throw std::runtime_error("gen-data: --classes must be between 2 and " +
                             std::to_string(specs.size()));
  specs.resize(static_cast<std::size_t>(classes));
  DatasetManifest m = gen_dataset(specs, per_class, split_ratio, out_dir, size, seed);
  int train = 0;
  for (const auto& s : m.samples) train += s.split == "train";
  std::printf("wrote %zu samples (%d train / %zu test) to %s\n", m.samples.size(), train,
              m.samples.size() - static_cast<std::size_t>(train), out_dir.c_str());
  return 0;
}

int cmd_train(const CommonOpts& opts) {
  RunConfig cfg = resolve_config(opts);
  if (cfg.dataset.empty()) throw std::runtime_error("train: dataset path required");
  LoadedDataset data = load_dataset(cfg.dataset);
  cfg.model.n_classes = static_cast<int>(data.classes.size());
  Network net(cfg.model);
  if (!cfg.checkpoint.empty()) load_checkpoint(cfg.checkpoint, net.params());
  Trainer trainer(net, data);
  std::vector<MetricsRow> history = trainer.run(cfg.out_dir);
  save_checkpoint((std::filesystem::path(cfg.out_dir) / "checkpoint.ckpt").string(), net.params());
  if (!history.empty()) {
    const MetricsRow& last = history.back();
    std::printf("final step %d: loss %.4f acc %.4f mean_regions %.3f\n", last.step, last.loss,
                last.acc, last.mean_regions);
  }
  EvalResult test = evaluate(net, data, data.test_indices);
  std::printf("test accuracy %.4f mean_regions %.3f (%d samples)\n", test.accuracy,
              test.mean_regions, test.total);
  return 0;
}

int cmd_eval(const CommonOpts& opts, const std::string& split, const std::string& export_path) {
  RunConfig cfg = resolve_config(opts);
  if (cfg.dataset.empty()) throw std::runtime_error("eval: dataset path required");
  if (cfg.checkpoint.empty()) throw std::runtime_error("eval: checkpoint path required");
  LoadedDataset data = load_dataset(cfg.dataset);
  cfg.model.n_classes = static_cast<int>(data.classes.size());
  Network net(cfg.model);
  load_checkpoint(cfg.checkpoint, net.params());
  const std::vector<int>& indices = split == "train" ? data.train_indices : data.test_indices;
  std::vector<std::vector<int>> selected;
  EvalResult res = evaluate(net, data, indices, nullptr, export_path.empty() ? nullptr : &selected);
  std::printf("accuracy %.4f mean_regions %.3f (%d samples)\n", res.accuracy, res.mean_regions,
              res.total);
  if (!export_path.empty()) {
    std::ofstream out(export_path);
    if (!out) throw std::runtime_error("eval: cannot open " + export_path);
    const auto& boxes = net.proposals();
    for (std::size_t i = 0; i < selected.size(); ++i)
      for (int k : selected[i]) {
        const RegionProposal& b = boxes[static_cast<std::size_t>(k)];
        char line[160];
        std::snprintf(line, sizeof(line), "%d %d %.6f %.6f %.6f %.6f\n", indices[i], k, b.x0, b.y0,
                      b.x1, b.y1);
        out << line;
      }
  }
  return 0;
}

int cmd_gradcheck(double tol) {
  std::vector<gradcheck::GradReport> reports = gradcheck::run_all();
  bool ok = true;
  for (const auto& r : reports) {
    bool pass = r.pass(tol);
    ok = ok && pass;
    std::printf("%-24s %s  max_rel_err %.3e  checked %d  kink_excluded %d", r.name.c_str(),
                pass ? "PASS" : "FAIL", r.max_rel_err, r.checked, r.kink_excluded);
    if (!pass)
      std::printf("  worst idx %lld analytic %.6e numeric %.6e",
                  static_cast<long long>(r.worst_index), r.analytic_at_worst, r.numeric_at_worst);
    std::printf("\n");
  }
  return ok ? 0 : 1;
}

int cmd_synth_filter(double sigma_x, double sigma_y, double theta, double w, int ksize,
                     const std::string& out_prefix) {
  Tape t;
  Tensor sx = Tensor::scalar(sigma_x), sy = Tensor::scalar(sigma_y);
  Tensor th = Tensor::scalar(theta), wt = Tensor::scalar(w);
  Var kernel = gabor_kernel_op(t, t.constant(sx), t.constant(sy), t.constant(th), t.constant(wt),
                               ksize);
  const Tensor& kv = t.value(kernel);
  write_tensor(out_prefix + "_kernel.tnsr", kv);
  Tensor real_plane(std::vector<int>{ksize, ksize});
  for (int y = 0; y < ksize; ++y)
    for (int x = 0; x < ksize; ++x) real_plane.at(y, x) = kv.at(0, y, x);
  oracle::Dft2Result spec = oracle::dft2(real_plane);
  write_tensor(out_prefix + "_dft.tnsr", spec.magnitude);
  std::printf("kernel %dx%d written; dft peak at (%.4f, %.4f) cycles/pixel\n", ksize, ksize,
              spec.peak_u, spec.peak_v);
  return 0;
}

int cmd_export_maps(const CommonOpts& opts, const std::string& image_path, const std::string& box,
                    const std::string& out_dir) {
  RunConfig cfg = resolve_config(opts);
  if (cfg.checkpoint.empty()) throw std::runtime_error("export-maps: checkpoint path required");
  Tensor image = read_tensor(image_path);
  if (image.ndim() != 2) throw std::runtime_error("export-maps: image must be 2-d");
  double coords[4] = {0.0, 0.0, 1.0, 1.0};
  if (!box.empty()) {
    std::stringstream ss(box);
    std::string item;
    int i = 0;
    while (std::getline(ss, item, ',') && i < 4) coords[i++] = std::stod(item);
    if (i != 4) throw std::runtime_error("export-maps: --box expects x0,y0,x1,y1");
  }
  cfg.model.n_classes = std::max(cfg.model.n_classes, 2);
  Network net(cfg.model);
  load_checkpoint(cfg.checkpoint, net.params());
  Network::MapExport exp =
      net.export_region_maps(image, RegionProposal(coords[0], coords[1], coords[2], coords[3]));
  std::filesystem::create_directories(out_dir);
  for (std::size_t n = 0; n < exp.maps.size(); ++n) {
    char name[64];
    std::snprintf(name, sizeof(name), "map_%03zu.tnsr", n);
    write_tensor((std::filesystem::path(out_dir) / name).string(), exp.maps[n]);
  }
  Tensor counts(std::vector<int>{static_cast<int>(exp.counts.size()), cfg.model.m_levels});
  for (std::size_t n = 0; n < exp.counts.size(); ++n)
    for (int m = 0; m < cfg.model.m_levels; ++m)
      counts.at(static_cast<int>(n), m) = exp.counts[n].data[m];
  write_tensor((std::filesystem::path(out_dir) / "counts.tnsr").string(), counts);
  std::printf("wrote %zu intensity maps and counts.tnsr to %s\n", exp.maps.size(),
              out_dir.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"learnable Gabor texture pipeline"};
  app.require_subcommand(1);

  // gen-data
  std::string gd_out = "data";
  int gd_classes = 4, gd_per_class = 75, gd_size = 32;
  std::uint64_t gd_seed = 42;
  double gd_ratio = 0.75;
  CLI::App* gen = app.add_subcommand("gen-data", "generate the synthetic texture dataset");
  gen->add_option("--out", gd_out, "output directory")->capture_default_str();
  gen->add_option("--classes", gd_classes, "number of classes")->capture_default_str();
  gen->add_option("--per-class", gd_per_class, "samples per class")->capture_default_str();
  gen->add_option("--size", gd_size, "image side in pixels")->capture_default_str();
  gen->add_option("--seed", gd_seed, "master seed")->capture_default_str();
  gen->add_option("--split-ratio", gd_ratio, "train fraction")->capture_default_str();

  // train
  CommonOpts train_opts;
  CLI::App* train = app.add_subcommand("train", "train the full model");
  add_common(train, train_opts, true);

  // eval
  CommonOpts eval_opts;
  std::string eval_split = "test", eval_export;
  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(eval, eval_opts, true);
  eval->add_option("--split", eval_split, "split to evaluate")->capture_default_str();
  eval->add_option("--export-regions", eval_export,
                   "write selected boxes as 'image_id k x0 y0 x1 y1' lines");

  // gradcheck
  double gc_tol = 1e-4;
  CLI::App* gc = app.add_subcommand("gradcheck", "finite-difference gradient audit");
  gc->add_option("--tol", gc_tol, "relative error tolerance")->capture_default_str();

  // synth-filter
  double sf_sx = 4.0, sf_sy = 4.0, sf_theta = 0.0, sf_w = 0.25;
  int sf_ksize = 33;
  std::string sf_prefix = "filter";
  CLI::App* sf = app.add_subcommand("synth-filter", "dump a synthesized kernel and its spectrum");
  sf->add_option("--sigma-x", sf_sx, "envelope scale along the carrier")->capture_default_str();
  sf->add_option("--sigma-y", sf_sy, "envelope scale across the carrier")->capture_default_str();
  sf->add_option("--theta", sf_theta, "orientation in radians")->capture_default_str();
  sf->add_option("--w", sf_w, "carrier frequency in cycles/pixel")->capture_default_str();
  sf->add_option("--ksize", sf_ksize, "odd kernel size")->capture_default_str();
  sf->add_option("--out-prefix", sf_prefix, "output file prefix")->capture_default_str();

  // export-maps
  CommonOpts em_opts;
  std::string em_image, em_box, em_out = "maps";
  CLI::App* em = app.add_subcommand("export-maps", "dump per-filter intensity maps and counts");
  add_common(em, em_opts, false);
  em->add_option("--image", em_image, "input image (TNSR)")->required();
  em->add_option("--box", em_box, "region box x0,y0,x1,y1 (default whole image)");
  em->add_option("--maps-out", em_out, "output directory")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(gd_out, gd_classes, gd_per_class, gd_size, gd_seed, gd_ratio);
    if (train->parsed()) return cmd_train(train_opts);
    if (eval->parsed()) return cmd_eval(eval_opts, eval_split, eval_export);
    if (gc->parsed()) return cmd_gradcheck(gc_tol);
    if (sf->parsed()) return cmd_synth_filter(sf_sx, sf_sy, sf_theta, sf_w, sf_ksize, sf_prefix);
    if (em->parsed()) return cmd_export_maps(em_opts, em_image, em_box, em_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
