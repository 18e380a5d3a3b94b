#pragma once

// Supervised training at desk scale: AdamW with decoupled weight decay,
// one-cycle cosine learning-rate schedule, cross-entropy loss, top-k
// evaluation, per-epoch CSV metrics and best/last checkpoints.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "mklab/checkpoint.hpp"
#include "mklab/common.hpp"
#include "mklab/dataset.hpp"
#include "mklab/tensor.hpp"
#include "mklab/vit.hpp"

namespace mklab {

struct TrainConfig {
  std::size_t total_epochs = 1;
  std::size_t batch_size = 128;
  double lr_max = 5e-4;
  double lr_min = 5e-6;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 0.05;
  std::uint64_t seed = 0;
  std::size_t warmup_steps = 0;
  std::string precision = "f32";  // "f32" | "f64"
  std::size_t max_steps = 0;      // 0 = no cap; otherwise stop after this many optimizer steps
  double target_top1 = 0.0;       // early-stop threshold in (0,1]; 0 disables

  void validate() const {
    if (total_epochs == 0 || batch_size == 0) throw ConfigError("total_epochs and batch_size must be positive");
    if (!(lr_min < lr_max)) throw ConfigError("requires lr_min < lr_max");
    if (!(lr_max > 0)) throw ConfigError("lr_max must be positive");
    if (!(beta1 > 0 && beta1 < 1 && beta2 > 0 && beta2 < 1)) throw ConfigError("betas must lie in (0,1)");
    if (weight_decay < 0) throw ConfigError("weight_decay must be non-negative");
    if (precision != "f32" && precision != "f64") throw ConfigError("precision must be \"f32\" or \"f64\"");
    if (target_top1 < 0 || target_top1 > 1) throw ConfigError("target_top1 must lie in [0,1]");
  }
};

// Linear warmup to lr_max over warmup_steps, then cosine from lr_max at the
// end of warmup down to lr_min at step == total_steps.
inline double lr_at(std::size_t step, std::size_t total_steps, const TrainConfig& cfg) {
  if (step > total_steps) throw ContractError("lr_at: step " + std::to_string(step) + " exceeds total " +
                                              std::to_string(total_steps));
  if (cfg.warmup_steps > total_steps) throw ContractError("lr_at: warmup longer than schedule");
  if (step < cfg.warmup_steps) return cfg.lr_max * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  const std::size_t span = total_steps - cfg.warmup_steps;
  if (span == 0) return cfg.lr_min;
  const double t = static_cast<double>(step - cfg.warmup_steps) / static_cast<double>(span);
  return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + std::cos(t * 3.14159265358979323846));
}

// AdamW over a fixed registration-ordered parameter list. Decoupled weight
// decay is applied only to tensors of rank >= 2 (weight matrices and the
// positional embedding); gains, biases, norm parameters and the class token
// are rank 1 and therefore excluded.
template <typename T>
class AdamW {
 public:
  AdamW(std::vector<std::pair<std::string, Tensor<T>*>> params, const TrainConfig& cfg)
      : params_(std::move(params)), cfg_(cfg) {
    cfg_.validate();
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (auto& [name, t] : params_) {
      m_.emplace_back(t->numel(), 0.0);
      v_.emplace_back(t->numel(), 0.0);
    }
  }

  std::size_t step_count() const { return step_; }

  // One update from the gradients currently stored on the parameters.
  void step(double lr) {
    if (!(lr >= 0)) throw ContractError("adamw: learning rate must be >= 0");
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (std::size_t p = 0; p < params_.size(); ++p) {
      auto& [name, tensor] = params_[p];
      const std::vector<T>& g = tensor->grad();
      std::vector<T>& w = tensor->data();
      const bool decay = tensor->ndim() >= 2 && cfg_.weight_decay > 0;
      std::vector<double>& m = m_[p];
      std::vector<double>& v = v_[p];
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = static_cast<double>(g[i]);
        if (!std::isfinite(gi))
          throw NumericError("non-finite gradient in parameter \"" + name + "\" at element " + std::to_string(i));
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        double upd = mhat / (std::sqrt(vhat) + kEps);
        if (decay) upd += cfg_.weight_decay * static_cast<double>(w[i]);
        w[i] = static_cast<T>(static_cast<double>(w[i]) - lr * upd);
      }
    }
  }

  static constexpr double kEps = 1e-8;

 private:
  std::vector<std::pair<std::string, Tensor<T>*>> params_;
  TrainConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t step_ = 0;
};

struct EvalResult {
  double top1 = 0.0;
  double top5 = 0.0;
};

// Number of classes ranking strictly ahead of `truth` in one logit row, with
// ties broken toward the lower class index: class j is ahead of class t iff
// logit_j > logit_t, or logit_j == logit_t with j < t. A sample is correct at
// k iff its rank is < k.
template <typename T>
std::size_t logit_rank(const T* row, std::size_t classes, std::size_t truth) {
  if (truth >= classes) throw ContractError("logit_rank: label out of range");
  std::size_t rank = 0;
  for (std::size_t j = 0; j < classes; ++j)
    if (row[j] > row[truth] || (row[j] == row[truth] && j < truth)) ++rank;
  return rank;
}

template <typename T>
EvalResult evaluate(VitModel<T>& model, const LabeledDataset<T>& data, std::size_t batch_size = 64) {
  data.validate();
  if (data.size() == 0) throw ContractError("evaluate: empty dataset");
  NoGradGuard ng;
  const std::size_t M = data.size();
  const std::size_t C = model.cfg.num_classes;
  std::size_t hit1 = 0, hit5 = 0;
  for (std::size_t start = 0; start < M; start += batch_size) {
    const std::size_t b = std::min(batch_size, M - start);
    std::vector<std::size_t> idx(b);
    std::iota(idx.begin(), idx.end(), start);
    Tensor<T> logits = model.forward(gather_images(data, idx));
    const std::vector<T>& lv = logits.data();
    for (std::size_t i = 0; i < b; ++i) {
      const std::size_t rank = logit_rank(lv.data() + i * C, C, data.labels[start + i]);
      if (rank < 1) ++hit1;
      if (rank < 5) ++hit5;
    }
  }
  return {static_cast<double>(hit1) / static_cast<double>(M), static_cast<double>(hit5) / static_cast<double>(M)};
}

struct EpochRow {
  std::size_t epoch = 0;  // 1-based
  std::size_t step = 0;   // cumulative optimizer steps so far
  double lr = 0.0;        // lr used by the last step of this epoch
  double loss = 0.0;      // mean training loss over the epoch
  double top1 = 0.0;
  double top5 = 0.0;
};

struct TrainResult {
  std::vector<EpochRow> history;
  double best_top1 = 0.0;
  std::size_t steps = 0;
  bool reached_target = false;
};

namespace detail {

inline std::string fmt_full(double v) {
  std::ostringstream os;
  os << std::setprecision(std::numeric_limits<double>::max_digits10) << v;
  return os.str();
}

inline std::string csv_row(const EpochRow& r) {
  return std::to_string(r.epoch) + "," + std::to_string(r.step) + "," + fmt_full(r.lr) + "," + fmt_full(r.loss) +
         "," + fmt_full(r.top1) + "," + fmt_full(r.top5);
}

}  // namespace detail

// Deterministic training loop. Epochs iterate a Fisher-Yates shuffle of the
// dataset (own RNG stream, seeded from cfg.seed) in batches of cfg.batch_size
// with a final partial batch. When out_dir is nonempty, appends one CSV row
// per epoch to out_dir/metrics.csv and saves out_dir/best.ckpt whenever the
// epoch's top-1 improves, plus out_dir/last.ckpt at the end. A non-finite
// loss or gradient aborts with the artifacts written so far retained.
template <typename T>
TrainResult train(VitModel<T>& model, const LabeledDataset<T>& data, const TrainConfig& cfg,
                  const std::string& out_dir = "", const std::string& config_json = "{}") {
  cfg.validate();
  data.validate();
  if (data.size() == 0) throw ContractError("train: empty dataset");
  if (data.images.shape()[2] != model.cfg.image_size || data.images.shape()[1] != model.cfg.channels)
    throw ConfigError("dataset geometry " + shape_str(data.images.shape()) + " does not match model config");
  if (data.num_classes != model.cfg.num_classes)
    throw ConfigError("dataset has " + std::to_string(data.num_classes) + " classes, model expects " +
                      std::to_string(model.cfg.num_classes));

  const std::size_t M = data.size();
  const std::size_t steps_per_epoch = (M + cfg.batch_size - 1) / cfg.batch_size;
  std::size_t total_steps = cfg.total_epochs * steps_per_epoch;
  if (cfg.max_steps > 0) total_steps = std::min(total_steps, cfg.max_steps);
  if (cfg.warmup_steps > total_steps) throw ConfigError("warmup_steps exceeds the total step budget");

  Rng shuffle_rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
  auto params = model.named_params();
  AdamW<T> opt(params, cfg);

  std::ofstream csv;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    csv.open(out_dir + "/metrics.csv", std::ios::trunc);
    if (!csv) throw ConfigError("cannot write to output directory: " + out_dir);
    csv << "epoch,step,lr,loss,top1,top5\n" << std::flush;
  }

  TrainResult res;
  std::vector<std::size_t> order(M);
  std::iota(order.begin(), order.end(), 0);
  std::size_t global_step = 0;
  double last_lr = 0.0;
  bool stop = false;

  for (std::size_t epoch = 1; epoch <= cfg.total_epochs && !stop; ++epoch) {
    for (std::size_t i = M - 1; i > 0; --i)
      std::swap(order[i], order[static_cast<std::size_t>(shuffle_rng.below(i + 1))]);

    double loss_sum = 0.0;
    std::size_t loss_n = 0;
    for (std::size_t b = 0; b < steps_per_epoch && !stop; ++b) {
      const std::size_t lo = b * cfg.batch_size;
      const std::size_t hi = std::min(lo + cfg.batch_size, M);
      std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(lo),
                                   order.begin() + static_cast<std::ptrdiff_t>(hi));
      Tensor<T> logits = model.forward(gather_images(data, idx));
      Tensor<T> loss = cross_entropy_mean(logits, gather_labels(data, idx));
      const double lv = static_cast<double>(loss.item());
      if (!std::isfinite(lv))
        throw NumericError("training loss diverged (non-finite) at step " + std::to_string(global_step + 1));
      model.zero_grad();
      loss.backward();
      last_lr = lr_at(global_step, total_steps, cfg);
      opt.step(last_lr);
      ++global_step;
      loss_sum += lv;
      ++loss_n;
      if (global_step >= total_steps) stop = true;
    }

    EvalResult ev = evaluate(model, data, cfg.batch_size);
    EpochRow row{epoch, global_step, last_lr, loss_sum / static_cast<double>(loss_n), ev.top1, ev.top5};
    res.history.push_back(row);
    if (csv.is_open()) csv << detail::csv_row(row) << "\n" << std::flush;
    if (ev.top1 > res.best_top1 || res.history.size() == 1) {
      res.best_top1 = ev.top1;
      if (!out_dir.empty()) save_checkpoint(out_dir + "/best.ckpt", make_checkpoint(model, config_json));
    }
    if (cfg.target_top1 > 0 && ev.top1 >= cfg.target_top1) {
      res.reached_target = true;
      stop = true;
    }
  }

  res.steps = global_step;
  if (!out_dir.empty()) save_checkpoint(out_dir + "/last.ckpt", make_checkpoint(model, config_json));
  return res;
}

}  // namespace mklab
