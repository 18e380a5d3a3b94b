#pragma once

// Analytic cost accounting (exact parameter and MAC counts per component),
// attention rollout across layers, and PGM heatmap export.

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "mklab/config.hpp"
#include "mklab/tensor.hpp"
#include "mklab/vit.hpp"

namespace mklab {

struct CostRow {
  std::string name;
  std::size_t params = 0;
  std::size_t flops = 0;  // multiply-accumulates; element-wise work excluded
};

struct CostReport {
  ModelConfig config;
  std::size_t batch = 1;
  std::vector<CostRow> rows;

  std::size_t total_params() const {
    std::size_t n = 0;
    for (const auto& r : rows) n += r.params;
    return n;
  }
  std::size_t total_flops() const {
    std::size_t n = 0;
    for (const auto& r : rows) n += r.flops;
    return n;
  }
  double params_M() const { return static_cast<double>(total_params()) / 1e6; }
  double flops_G() const { return static_cast<double>(total_flops()) / 1e9; }

  std::string to_json_text() const {
    json rows_j = json::array();
    for (const auto& r : rows) rows_j.push_back(json{{"name", r.name}, {"params", r.params}, {"flops", r.flops}});
    json j{{"config", model_to_json(config)}, {"batch", batch},           {"rows", rows_j},
           {"total_params", total_params()},  {"total_flops", total_flops()}};
    return j.dump(2) + "\n";
  }

  std::string to_table() const {
    std::ostringstream os;
    os << std::left << std::setw(16) << "component" << std::right << std::setw(14) << "params" << std::setw(18)
       << "flops" << "\n";
    os << std::string(48, '-') << "\n";
    for (const auto& r : rows)
      os << std::left << std::setw(16) << r.name << std::right << std::setw(14) << r.params << std::setw(18)
         << r.flops << "\n";
    os << std::string(48, '-') << "\n";
    os << std::left << std::setw(16) << "total" << std::right << std::setw(14) << total_params() << std::setw(18)
       << total_flops() << "\n";
    os << std::setprecision(4) << std::fixed << "params [M]: " << params_M() << "   flops [G]: " << flops_G()
       << "  (batch " << batch << ")\n";
    return os.str();
  }
};

// Closed-form component costs. Parameter identities per block, with D = dim,
// H = charts, N = tokens: query/value/output projections 3D^2 (bias-free);
// the baseline key is one more D^2; the manifold key path replaces it with
// expansion HD^2 + gain HD + per-chart token mixing HN^2, plus aggregation
// HD^2 when the variant maps charts back through a linear (spatialk/kua) and
// a broadcast gain D when context broadcasting is on. MACs per block: token
// projections N*D^2 each, expansion/aggregation N*H*D^2, chart mixing H*N^2*D
// (also the cost of the simplek condense), attention scores and weighting
// 2*N^2*D, and the MLP pair 2*N*D*mlp. LayerNorm, softmax, GELU, residuals,
// the gains, and context broadcasting are element-wise and excluded.
inline CostReport cost_report(const ModelConfig& cfg, std::size_t batch = 1) {
  cfg.validate();
  if (batch == 0) throw ConfigError("batch must be positive");
  const KeyVariantSpec v = cfg.variant.normalized();
  const std::size_t D = cfg.dim, pd = cfg.patch_dim(), N = cfg.n_tokens(), G2 = cfg.grid() * cfg.grid();
  const std::size_t H = v.charts, mlp = cfg.mlp_dim, C = cfg.num_classes, B = batch;
  const bool aggregates = v.kind == KeyKind::SpatialK || v.kind == KeyKind::KUA;

  CostReport rep;
  rep.config = cfg;
  rep.batch = batch;
  rep.rows.push_back({"stem", 2 * pd + (pd * D + D) + 2 * D, B * G2 * pd * D});
  rep.rows.push_back({"embed", D + N * D, 0});

  std::size_t attn_p = 3 * D * D, key_f = 0;
  if (v.kind == KeyKind::Baseline) {
    attn_p += D * D;
    key_f = N * D * D;
  } else {
    attn_p += H * D * D + H * D + H * N * N;
    key_f = N * H * D * D + H * N * N * D;
    if (aggregates) {
      attn_p += H * D * D;
      key_f += N * H * D * D;
    }
    if (v.cb) attn_p += D;
  }
  const std::size_t block_p = 4 * D + attn_p + (D * mlp + mlp + mlp * D + D);
  const std::size_t block_f = B * (3 * N * D * D + key_f + 2 * N * N * D + 2 * N * D * mlp);
  for (std::size_t i = 0; i < cfg.depth; ++i)
    rep.rows.push_back({"block." + std::to_string(i), block_p, block_f});

  rep.rows.push_back({"final_norm", 2 * D, 0});
  rep.rows.push_back({"head", D * C + C, B * D * C});
  return rep;
}

inline CostReport count_params(const ModelConfig& cfg) { return cost_report(cfg, 1); }

inline CostReport count_flops(const ModelConfig& cfg, const Shape& input_shape) {
  if (input_shape.size() != 4 || input_shape[1] != cfg.channels || input_shape[2] != cfg.image_size ||
      input_shape[3] != cfg.image_size)
    throw ConfigError("input shape " + shape_str(input_shape) + " does not match configured images [B, " +
                      std::to_string(cfg.channels) + ", " + std::to_string(cfg.image_size) + ", " +
                      std::to_string(cfg.image_size) + "]");
  return cost_report(cfg, input_shape[0]);
}

// Rounding used by Table-style reporting and --expect checks.
inline long long round_params_M(std::size_t params) {
  return std::llround(static_cast<double>(params) / 1e6);
}
inline double round_flops_G(std::size_t flops, int decimals = 1) {
  const double p = std::pow(10.0, decimals);
  return std::llround(static_cast<double>(flops) / 1e9 * p) / p;
}

// ---- attention rollout ---------------------------------------------------------

// Largest |row sum - 1| over the trailing axis; rollout and attention
// matrices should keep this within 1e-6.
template <typename T>
double max_row_sum_deviation(const Tensor<T>& m) {
  if (m.ndim() < 1) throw DimError("need at least rank 1");
  const std::size_t cols = m.shape()[m.ndim() - 1];
  const std::size_t rows = m.numel() / cols;
  double worst = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < cols; ++c) s += static_cast<double>(m.data()[r * cols + c]);
    worst = std::max(worst, std::abs(s - 1.0));
  }
  return worst;
}

// Joint attention for one head: per layer A_bar = row-normalize(A/2 + I/2),
// then the product A_bar(L) * ... * A_bar(1). Input: one [heads, N, N] record
// per layer for a single sample, earliest layer first.
template <typename T>
Tensor<T> attention_rollout(const std::vector<Tensor<T>>& per_layer, std::size_t head,
                            std::size_t expected_layers) {
  if (per_layer.size() != expected_layers)
    throw ContractError("rollout needs " + std::to_string(expected_layers) + " layer records, got " +
                        std::to_string(per_layer.size()));
  if (per_layer.empty()) throw ContractError("rollout needs at least one layer");
  const Shape& s0 = per_layer.front().shape();
  if (s0.size() != 3 || s0[1] != s0[2]) throw DimError("layer records must be [heads, N, N], got " + shape_str(s0));
  const std::size_t heads = s0[0], N = s0[1];
  if (head >= heads) throw ContractError("head " + std::to_string(head) + " out of range (heads=" +
                                         std::to_string(heads) + ")");

  std::vector<double> joint(N * N, 0.0);
  for (std::size_t i = 0; i < N; ++i) joint[i * N + i] = 1.0;
  std::vector<double> abar(N * N), next(N * N);
  for (const Tensor<T>& rec : per_layer) {
    if (rec.shape() != s0)
      throw DimError("inconsistent layer record shapes: " + shape_str(rec.shape()) + " vs " + shape_str(s0));
    const T* a = rec.data().data() + head * N * N;
    for (std::size_t r = 0; r < N; ++r) {
      double row_sum = 0;
      for (std::size_t c = 0; c < N; ++c) {
        const double v = 0.5 * static_cast<double>(a[r * N + c]) + (r == c ? 0.5 : 0.0);
        abar[r * N + c] = v;
        row_sum += v;
      }
      if (!(row_sum > 0)) throw NumericError("rollout: non-positive attention row sum");
      for (std::size_t c = 0; c < N; ++c) abar[r * N + c] /= row_sum;
    }
    // joint <- abar * joint
    for (std::size_t r = 0; r < N; ++r)
      for (std::size_t c = 0; c < N; ++c) {
        double acc = 0;
        for (std::size_t k = 0; k < N; ++k) acc += abar[r * N + k] * joint[k * N + c];
        next[r * N + c] = acc;
      }
    std::swap(joint, next);
  }
  std::vector<T> out(N * N);
  for (std::size_t i = 0; i < N * N; ++i) out[i] = static_cast<T>(joint[i]);
  return Tensor<T>::from({N, N}, std::move(out));
}

// One head's raw [N, N] attention matrix from a [heads, N, N] record.
template <typename T>
Tensor<T> head_slice(const Tensor<T>& record, std::size_t head) {
  if (record.ndim() != 3 || record.shape()[1] != record.shape()[2])
    throw DimError("record must be [heads, N, N], got " + shape_str(record.shape()));
  if (head >= record.shape()[0]) throw ContractError("head index out of range");
  const std::size_t N = record.shape()[1];
  std::vector<T> out(record.data().begin() + static_cast<std::ptrdiff_t>(head * N * N),
                     record.data().begin() + static_cast<std::ptrdiff_t>((head + 1) * N * N));
  return Tensor<T>::from({N, N}, std::move(out));
}

// Class-token row of a square attention/rollout matrix, restricted to patch
// tokens, reshaped to the patch grid and min-max normalized to [0,1]. A
// constant row maps to all zeros.
template <typename T>
std::vector<double> class_token_heatmap(const Tensor<T>& joint, std::size_t grid) {
  if (joint.ndim() != 2 || joint.shape()[0] != joint.shape()[1])
    throw DimError("expected a square matrix, got " + shape_str(joint.shape()));
  const std::size_t N = joint.shape()[0];
  if (N != grid * grid + 1)
    throw ContractError("matrix has " + std::to_string(N) + " tokens, expected " +
                        std::to_string(grid * grid + 1) + " for a " + std::to_string(grid) + "x" +
                        std::to_string(grid) + " grid");
  std::vector<double> map(grid * grid);
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (std::size_t i = 0; i < grid * grid; ++i) {
    map[i] = static_cast<double>(joint.data()[1 + i]);  // row 0 = class token; skip its self-attention column
    lo = std::min(lo, map[i]);
    hi = std::max(hi, map[i]);
  }
  const double span = hi - lo;
  for (double& v : map) v = span > 0 ? (v - lo) / span : 0.0;
  return map;
}

// ---- PGM export -----------------------------------------------------------------

// Binary 8-bit grayscale (P5, maxval 255), byte = round(255 * v), optional
// nearest-neighbor upscale.
inline void export_heatmap(const std::vector<double>& map, std::size_t grid, const std::string& path,
                           std::size_t scale = 1) {
  if (grid == 0 || map.size() != grid * grid)
    throw ContractError("heatmap must hold grid*grid values, got " + std::to_string(map.size()));
  if (scale == 0) throw ContractError("scale must be positive");
  for (double v : map)
    if (!(v >= 0.0 && v <= 1.0)) throw ContractError("heatmap values must lie in [0,1]");

  const std::size_t w = grid * scale;
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write image file: " + path);
  out << "P5\n" << w << " " << w << "\n255\n";
  std::vector<unsigned char> row(w);
  for (std::size_t y = 0; y < w; ++y) {
    for (std::size_t x = 0; x < w; ++x)
      row[x] = static_cast<unsigned char>(std::lround(255.0 * map[(y / scale) * grid + (x / scale)]));
    out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!out) throw ConfigError("failed writing image file: " + path);
}

// Loads a P5 PGM as a [1, 1, S, S] image tensor scaled to [0,1] (used by the
// attention-map command for external inputs).
template <typename T>
Tensor<T> load_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open image file: " + path);
  std::string magic;
  in >> magic;
  if (magic != "P5") throw ContractError(path + ": only binary PGM (P5) images are supported");
  std::size_t w = 0, h = 0, maxval = 0;
  in >> w >> h >> maxval;
  if (!in || w == 0 || h == 0 || maxval == 0 || maxval > 255)
    throw ContractError(path + ": bad PGM header");
  in.get();  // single whitespace after maxval
  std::vector<unsigned char> bytes(w * h);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (static_cast<std::size_t>(in.gcount()) != bytes.size()) throw ContractError(path + ": truncated PGM payload");
  if (w != h) throw ContractError(path + ": only square images are supported");
  std::vector<T> px(bytes.size());
  for (std::size_t i = 0; i < bytes.size(); ++i)
    px[i] = static_cast<T>(static_cast<double>(bytes[i]) / static_cast<double>(maxval));
  return Tensor<T>::from({1, 1, h, w}, std::move(px));
}

}  // namespace mklab
