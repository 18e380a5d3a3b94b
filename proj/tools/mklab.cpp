// mklab — manifold-key ViT lab command line.
//
//   mklab count     --config cfg.json [--expect params_M=52,flops_G=11.3] [--out DIR]
//   mklab train     --config cfg.json [--seed N] [--out DIR]
//   mklab eval      --config cfg.json [--checkpoint F] [--out DIR]
//   mklab gradcheck --config cfg.json [--variant NAME] [--seed N]
//   mklab attnmap   --config cfg.json [--checkpoint F] [--image F.pgm | --synth-index N]
//                   [--head H] [--layers A:B] [--scale K] [--seed N] [--out DIR]
//
// Exit codes: 0 ok, 1 check failure, 2 usage/config error, 3 numeric divergence.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mklab/analysis.hpp"
#include "mklab/checkpoint.hpp"
#include "mklab/config.hpp"
#include "mklab/dataset.hpp"
#include "mklab/gradcheck.hpp"
#include "mklab/train.hpp"
#include "mklab/vit.hpp"

namespace {

namespace fs = std::filesystem;
using mklab::json;

struct Options {
  std::string config_path;
  std::string out_override;
  std::optional<std::uint64_t> seed_override;
  std::string expect;           // count
  std::string checkpoint;       // eval / attnmap
  std::string variant_filter;   // gradcheck
  bool corrupt = false;         // gradcheck negative-control hook
  std::string image_path;       // attnmap
  std::size_t synth_index = 0;  // attnmap
  std::string head = "all";     // attnmap
  std::string layers;           // attnmap "A:B"
  std::size_t scale = 16;       // attnmap upscale factor
  bool uniform_attention = false;
};

mklab::RunConfig load_config(Options& opt) {
  mklab::RunConfig cfg = mklab::load_run_config(opt.config_path);
  if (opt.seed_override) cfg.train.seed = *opt.seed_override;
  if (!opt.out_override.empty()) cfg.output_dir = opt.out_override;
  return cfg;
}

void write_text(const std::string& path, const std::string& text) {
  fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) throw mklab::ConfigError("cannot write file: " + path);
  out << text;
}

// ---- count ----------------------------------------------------------------

int run_count(Options& opt) {
  const mklab::RunConfig cfg = load_config(opt);
  const auto rep = mklab::cost_report(cfg.model, 1);
  std::cout << rep.to_table();
  write_text(cfg.output_dir + "/cost_report.json", rep.to_json_text());

  if (opt.expect.empty()) return 0;
  bool ok = true;
  std::stringstream ss(opt.expect);
  std::string term;
  while (std::getline(ss, term, ',')) {
    const auto eq = term.find('=');
    if (eq == std::string::npos) throw mklab::ConfigError("--expect terms must look like key=value: " + term);
    const std::string key = term.substr(0, eq), val = term.substr(eq + 1);
    if (key == "params_M") {
      const long long want = std::stoll(val);
      const long long got = mklab::round_params_M(rep.total_params());
      if (got != want) {
        std::cout << "expect FAILED: params_M = " << got << ", expected " << want << "\n";
        ok = false;
      } else {
        std::cout << "expect ok: params_M = " << got << "\n";
      }
    } else if (key == "flops_G") {
      // Table figures come from a slightly different counting tool; accept
      // a +-3% band around the stated value.
      const double want = std::stod(val);
      const double got = rep.flops_G();
      if (std::abs(got - want) > 0.03 * std::abs(want)) {
        std::cout << "expect FAILED: flops_G = " << got << ", expected " << want << " (+-3%)\n";
        ok = false;
      } else {
        std::cout << "expect ok: flops_G = " << got << " ~ " << want << "\n";
      }
    } else {
      throw mklab::ConfigError("--expect keys are params_M and flops_G, got \"" + key + "\"");
    }
  }
  return ok ? 0 : 1;
}

// ---- train ------------------------------------------------------------------

template <typename T>
int run_train_typed(const mklab::RunConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  auto data = mklab::build_dataset<T>(cfg.dataset, cfg.model);
  mklab::VitModel<T> model(cfg.model, cfg.train.seed);
  const std::string config_text = mklab::run_config_to_text(cfg);
  const auto res = mklab::train(model, data, cfg.train, cfg.output_dir, config_text);
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  json summary{{"best_top1", res.best_top1},
               {"final_top1", res.history.empty() ? 0.0 : res.history.back().top1},
               {"final_loss", res.history.empty() ? 0.0 : res.history.back().loss},
               {"epochs", res.history.size()},
               {"steps", res.steps},
               {"reached_target", res.reached_target},
               {"wall_seconds", wall}};
  write_text(cfg.output_dir + "/summary.json", summary.dump(2) + "\n");
  write_text(cfg.output_dir + "/config.json", config_text);
  std::cout << summary.dump(2) << "\n";
  return 0;
}

int run_train(Options& opt) {
  const mklab::RunConfig cfg = load_config(opt);
  return cfg.train.precision == "f64" ? run_train_typed<double>(cfg) : run_train_typed<float>(cfg);
}

// ---- eval ------------------------------------------------------------------

template <typename T>
int run_eval_typed(const mklab::RunConfig& cfg, const std::string& ckpt_path) {
  const mklab::Checkpoint ckpt = mklab::load_checkpoint(ckpt_path);
  // The checkpoint's embedded config is authoritative for the weights.
  const mklab::RunConfig stored = mklab::parse_run_config(ckpt.config_json);
  mklab::VitModel<T> model(stored.model, 0, /*zero_init=*/true);
  mklab::load_into_model(ckpt, model);
  auto data = mklab::build_dataset<T>(cfg.dataset, stored.model);
  const auto ev = mklab::evaluate(model, data, cfg.train.batch_size);
  json out{{"top1", ev.top1}, {"top5", ev.top5}, {"samples", data.size()}, {"checkpoint", ckpt_path}};
  write_text(cfg.output_dir + "/eval.json", out.dump(2) + "\n");
  std::cout << out.dump(2) << "\n";
  return 0;
}

int run_eval(Options& opt) {
  const mklab::RunConfig cfg = load_config(opt);
  const std::string ckpt = opt.checkpoint.empty() ? cfg.output_dir + "/best.ckpt" : opt.checkpoint;
  return cfg.train.precision == "f64" ? run_eval_typed<double>(cfg, ckpt) : run_eval_typed<float>(cfg, ckpt);
}

// ---- gradcheck ----------------------------------------------------------------

int run_gradcheck(Options& opt) {
  mklab::RunConfig cfg = load_config(opt);
  std::vector<mklab::KeyKind> kinds;
  if (opt.variant_filter.empty()) {
    kinds = {mklab::KeyKind::Baseline, mklab::KeyKind::SpatialK, mklab::KeyKind::KUA, mklab::KeyKind::SimpleK,
             mklab::KeyKind::VanillaK};
  } else {
    kinds = {mklab::parse_kind(opt.variant_filter)};
  }

  // Gradient checks always run in 64-bit: float cannot resolve h = 1e-5.
  auto data = mklab::build_dataset<double>(cfg.dataset, cfg.model);
  const std::size_t nb = std::min<std::size_t>(2, data.size());
  std::vector<std::size_t> idx(nb);
  for (std::size_t i = 0; i < nb; ++i) idx[i] = i;
  const auto images = mklab::gather_images(data, idx);
  const auto labels = mklab::gather_labels(data, idx);

  bool all_pass = true;
  for (const auto kind : kinds) {
    mklab::ModelConfig mc = cfg.model;
    mc.variant.kind = kind;
    mklab::VitModel<double> model(mc, cfg.train.seed);
    std::cout << "variant " << mklab::kind_name(kind) << " (" << model.param_count() << " parameters)\n";
    std::cout << std::left << std::setw(26) << "  parameter" << std::right << std::setw(8) << "elems"
              << std::setw(16) << "max_rel_err" << "  status\n";

    auto loss_fn = [&](std::vector<mklab::Tensor<double>>&) {
      auto loss = mklab::cross_entropy_mean(model.forward(images), labels);
      if (opt.corrupt) {
        // Negative control: identity in value, wrong derivative.
        return mklab::detail::unary_op(
            loss, "corrupt", [](double v) { return v; }, [](double, double) { return 1.1; });
      }
      return loss;
    };

    std::vector<std::string> failing;
    double variant_worst = 0.0;
    for (auto& [name, tensor] : model.named_params()) {
      model.zero_grad();
      const auto rep = mklab::gradcheck(loss_fn, {*tensor}, 1e-5, 1e-4);
      variant_worst = std::max(variant_worst, rep.max_rel_err);
      std::cout << std::left << std::setw(26) << ("  " + name) << std::right << std::setw(8) << rep.checked
                << std::setw(16) << std::scientific << std::setprecision(3) << rep.max_rel_err
                << std::defaultfloat << "  " << (rep.pass ? "ok" : "FAIL") << "\n";
      if (!rep.pass) failing.push_back(name);
    }
    if (failing.empty()) {
      std::cout << "variant " << mklab::kind_name(kind) << ": PASS (max rel err " << std::scientific
                << std::setprecision(3) << variant_worst << std::defaultfloat << ")\n\n";
    } else {
      all_pass = false;
      std::cout << "variant " << mklab::kind_name(kind) << ": FAIL —";
      for (const auto& n : failing) std::cout << " " << n;
      std::cout << "\n\n";
    }
  }
  return all_pass ? 0 : 1;
}

// ---- attnmap ------------------------------------------------------------------

int run_attnmap(Options& opt) {
  const mklab::RunConfig cfg = load_config(opt);

  // Model: restored from a checkpoint when given (its embedded config wins),
  // otherwise freshly initialized from the config file.
  mklab::ModelConfig mc = cfg.model;
  std::optional<mklab::Checkpoint> ckpt;
  if (!opt.checkpoint.empty()) {
    ckpt = mklab::load_checkpoint(opt.checkpoint);
    mc = mklab::parse_run_config(ckpt->config_json).model;
  }
  mklab::VitModel<double> model(mc, cfg.train.seed, /*zero_init=*/ckpt.has_value());
  if (ckpt) mklab::load_into_model(*ckpt, model);
  if (opt.uniform_attention) {
    // Test hook: zero queries make every attention row exactly uniform.
    for (auto& b : model.blocks)
      std::fill(b.attn.W_q.data().begin(), b.attn.W_q.data().end(), 0.0);
  }

  mklab::Tensor<double> image;
  if (!opt.image_path.empty()) {
    image = mklab::load_pgm<double>(opt.image_path);
    if (mc.channels != 1 || image.shape()[2] != mc.image_size)
      throw mklab::ConfigError("image " + mklab::shape_str(image.shape()) + " does not match model geometry");
  } else {
    auto data = mklab::build_dataset<double>(cfg.dataset, mc);
    if (opt.synth_index >= data.size())
      throw mklab::ConfigError("--synth-index " + std::to_string(opt.synth_index) + " out of range (dataset has " +
                               std::to_string(data.size()) + " samples)");
    image = mklab::gather_images(data, {opt.synth_index});
  }

  std::size_t lo = 0, hi = mc.depth - 1;
  if (!opt.layers.empty()) {
    const auto colon = opt.layers.find(':');
    if (colon == std::string::npos) throw mklab::ConfigError("--layers expects A:B");
    lo = std::stoull(opt.layers.substr(0, colon));
    hi = std::stoull(opt.layers.substr(colon + 1));
    if (lo > hi || hi >= mc.depth) throw mklab::ConfigError("--layers range out of bounds for depth " +
                                                            std::to_string(mc.depth));
  }

  std::vector<std::size_t> heads;
  if (opt.head == "all") {
    for (std::size_t h = 0; h < mc.heads; ++h) heads.push_back(h);
  } else {
    const std::size_t h = std::stoull(opt.head);
    if (h >= mc.heads) throw mklab::ConfigError("--head " + opt.head + " out of range (model has " +
                                                std::to_string(mc.heads) + " heads)");
    heads = {h};
  }

  std::vector<mklab::Tensor<double>> records;
  {
    mklab::NoGradGuard ng;
    model.forward(image, &records);
  }
  std::vector<mklab::Tensor<double>> sample;
  for (std::size_t l = lo; l <= hi; ++l) {
    const auto s = records[l].shape();
    sample.push_back(records[l].reshape({s[1], s[2], s[3]}));
  }

  fs::create_directories(cfg.output_dir);
  json per_head = json::array();
  for (const std::size_t h : heads) {
    const auto raw = mklab::head_slice(sample.back(), h);
    const auto joint = mklab::attention_rollout(sample, h, hi - lo + 1);
    const auto raw_map = mklab::class_token_heatmap(raw, mc.grid());
    const auto joint_map = mklab::class_token_heatmap(joint, mc.grid());
    mklab::export_heatmap(raw_map, mc.grid(), cfg.output_dir + "/raw_head" + std::to_string(h) + ".pgm", opt.scale);
    mklab::export_heatmap(joint_map, mc.grid(),
                          cfg.output_dir + "/rollout_head" + std::to_string(h) + ".pgm", opt.scale);

    // Class-token row statistics before normalization, for downstream checks.
    double rlo = 1e300, rhi = -1e300, jlo = 1e300, jhi = -1e300;
    for (std::size_t i = 1; i < mc.n_tokens(); ++i) {
      rlo = std::min(rlo, raw.data()[i]);
      rhi = std::max(rhi, raw.data()[i]);
      jlo = std::min(jlo, joint.data()[i]);
      jhi = std::max(jhi, joint.data()[i]);
    }
    per_head.push_back(json{{"head", h},
                            {"raw_row_min", rlo},
                            {"raw_row_max", rhi},
                            {"rollout_row_min", jlo},
                            {"rollout_row_max", jhi},
                            {"rollout_row_spread", jhi - jlo}});
  }
  json summary{{"heads", per_head}, {"layers", json::array({lo, hi})}, {"grid", mc.grid()}, {"scale", opt.scale}};
  write_text(cfg.output_dir + "/attn_summary.json", summary.dump(2) + "\n");
  std::cout << summary.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"manifold-key attention lab for compact vision transformers"};
  app.require_subcommand(1);
  Options opt;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", opt.config_path, "JSON run configuration")->required();
    sub->add_option("--seed", opt.seed_override, "override train.seed");
    sub->add_option("--out", opt.out_override, "override output_dir");
  };

  auto* count = app.add_subcommand("count", "analytic parameter/FLOP report");
  add_common(count);
  count->add_option("--expect", opt.expect, "comma-separated params_M=…/flops_G=… assertions");

  auto* train = app.add_subcommand("train", "train a model, writing metrics and checkpoints");
  add_common(train);

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the configured dataset");
  add_common(eval);
  eval->add_option("--checkpoint", opt.checkpoint, "checkpoint file (default <out>/best.ckpt)");

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient verification (64-bit)");
  add_common(gradcheck);
  gradcheck->add_option("--variant", opt.variant_filter, "check a single key variant");
  gradcheck->add_flag("--corrupt", opt.corrupt)->group("");  // hidden negative control

  auto* attnmap = app.add_subcommand("attnmap", "export per-head raw and rollout attention heatmaps");
  add_common(attnmap);
  attnmap->add_option("--checkpoint", opt.checkpoint, "restore weights from a checkpoint");
  attnmap->add_option("--image", opt.image_path, "input PGM image (per-model geometry)");
  attnmap->add_option("--synth-index", opt.synth_index, "synthetic sample index (default 0)");
  attnmap->add_option("--head", opt.head, "head index or \"all\"");
  attnmap->add_option("--layers", opt.layers, "layer range A:B (default all layers)");
  attnmap->add_option("--scale", opt.scale, "nearest-neighbor upscale factor");
  attnmap->add_flag("--uniform-attention", opt.uniform_attention)->group("");  // hidden test hook

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*count) return run_count(opt);
    if (*train) return run_train(opt);
    if (*eval) return run_eval(opt);
    if (*gradcheck) return run_gradcheck(opt);
    if (*attnmap) return run_attnmap(opt);
    return 2;
  } catch (const mklab::NumericError& e) {
    std::cerr << "numeric divergence: " << e.what() << "\n";
    return 3;
  } catch (const mklab::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
