#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "mklab/tensor.hpp"

// Multi-head self-attention with five interchangeable key pipelines.
//
// The key is computed at full model dimension through one of:
//   baseline  X.W_k^T
//   spatialk  expand -> chart rearrange -> grouped token mix -> unrearrange -> to_out
//   kua       spatialk with context broadcasting inserted after the mix
//   simplek   expand -> chart rearrange -> ungrouped condense (H*N -> N channels)
//   vanillak  expand -> chart rearrange -> grouped mix -> optional CB -> chart mean
// and is then split into heads exactly like Q and V.

namespace mklab {

enum class KeyKind { Baseline, SpatialK, KUA, SimpleK, VanillaK };

inline const char* kind_name(KeyKind k) {
  switch (k) {
    case KeyKind::Baseline: return "baseline";
    case KeyKind::SpatialK: return "spatialk";
    case KeyKind::KUA: return "kua";
    case KeyKind::SimpleK: return "simplek";
    case KeyKind::VanillaK: return "vanillak";
  }
  throw ConfigError("unknown key variant kind");
}

inline KeyKind parse_kind(const std::string& s) {
  if (s == "baseline") return KeyKind::Baseline;
  if (s == "spatialk") return KeyKind::SpatialK;
  if (s == "kua") return KeyKind::KUA;
  if (s == "simplek") return KeyKind::SimpleK;
  if (s == "vanillak") return KeyKind::VanillaK;
  throw ConfigError("unknown key variant kind: '" + s + "'");
}

struct KeyVariantSpec {
  KeyKind kind = KeyKind::Baseline;
  std::size_t charts = 1;  // H
  bool cb = false;         // context broadcasting

  // Canonical form: KUA always broadcasts; only VanillaK keeps the flag free;
  // Baseline ignores both knobs.
  KeyVariantSpec normalized() const {
    KeyVariantSpec s = *this;
    if (s.kind == KeyKind::Baseline) {
      s.charts = 1;
      s.cb = false;
    } else if (s.kind == KeyKind::KUA) {
      s.cb = true;
    } else if (s.kind != KeyKind::VanillaK) {
      s.cb = false;
    }
    return s;
  }

  bool uses_cb() const { return normalized().cb; }
  bool is_manifold() const { return kind != KeyKind::Baseline; }

  void validate() const {
    if (charts == 0) throw ConfigError("chart count must be positive");
  }
};

// ---------------------------------------------------------------------------
// Standalone key-path ops.
// ---------------------------------------------------------------------------

namespace detail {

// Uniform rank-3 view for attention math: [N, F] -> [1, N, F].
template <typename T>
Tensor<T> lift3(const Tensor<T>& x, bool& was2d) {
  was2d = x.ndim() == 2;
  if (was2d) {
    Shape s = x.shape();
    return x.reshape({1, s[0], s[1]});
  }
  if (x.ndim() != 3) throw DimError("expected rank 2 or 3 tensor, got " + shape_str(x.shape()));
  return x;
}

template <typename T>
Tensor<T> drop3(const Tensor<T>& x, bool was2d) {
  if (!was2d) return x;
  return x.reshape({x.shape()[1], x.shape()[2]});
}

}  // namespace detail

// Dimension expansion of the input: (X . W_expand^T) * gamma, gamma broadcast
// over tokens. W_expand is [H*dim, dim], gamma [H*dim].
template <typename T>
Tensor<T> expand_key(const Tensor<T>& x, const Tensor<T>& w_expand, const Tensor<T>& gamma) {
  if (gamma.ndim() != 1 || gamma.shape()[0] != w_expand.shape()[0]) {
    throw DimError("gamma shape " + shape_str(gamma.shape()) + " must be (" +
                   std::to_string(w_expand.shape()[0]) + ")");
  }
  return mul(linear(x, w_expand), gamma);
}

// [.., N, H*d] -> [.., H*N, d]: element (token n, chart h, feature f) lands in
// row h*N + n, column f. Charts become the outer block of the row axis.
template <typename T>
Tensor<T> chart_rearrange(const Tensor<T>& x, std::size_t charts) {
  bool was2d;
  auto x3 = detail::lift3(x, was2d);
  const std::size_t B = x3.shape()[0], N = x3.shape()[1], F = x3.shape()[2];
  if (charts == 0 || F % charts != 0) {
    throw DimError("feature axis " + std::to_string(F) + " not divisible by charts " +
                   std::to_string(charts));
  }
  const std::size_t d = F / charts;
  auto y = x3.reshape({B, N, charts, d}).permute({0, 2, 1, 3}).reshape({B, charts * N, d});
  return detail::drop3(y, was2d);
}

// Exact inverse of chart_rearrange.
template <typename T>
Tensor<T> chart_unrearrange(const Tensor<T>& x, std::size_t charts) {
  bool was2d;
  auto x3 = detail::lift3(x, was2d);
  const std::size_t B = x3.shape()[0], HN = x3.shape()[1], d = x3.shape()[2];
  if (charts == 0 || HN % charts != 0) {
    throw DimError("row axis " + std::to_string(HN) + " not divisible by charts " +
                   std::to_string(charts));
  }
  const std::size_t N = HN / charts;
  auto y = x3.reshape({B, charts, N, d}).permute({0, 2, 1, 3}).reshape({B, N, charts * d});
  return detail::drop3(y, was2d);
}

// Grouped token mixing (Conv1d(H*N, H*N, ks=1, groups=H, bias=False)): within
// each chart every output row is a mix-weighted combination of that chart's N
// rows, independently per feature.
template <typename T>
Tensor<T> chart_mix(const Tensor<T>& xr, const Tensor<T>& mix, std::size_t charts) {
  const std::size_t rows = xr.shape()[xr.ndim() - 2];
  if (mix.ndim() != 2 || mix.shape()[0] != rows || mix.shape()[1] * charts != rows) {
    throw ConfigError("mix coefficients " + shape_str(mix.shape()) +
                      " do not match token layout (" + std::to_string(rows) + " rows, " +
                      std::to_string(charts) + " charts); N is fixed at construction");
  }
  return grouped_pointwise_conv(xr, mix, charts);
}

// Context broadcasting: K <- (K + mean over all rows of (gamma' * K)) / 2,
// the mean taken across every chart-token row and broadcast back.
template <typename T>
Tensor<T> context_broadcast(const Tensor<T>& k, const Tensor<T>& gamma_prime) {
  if (gamma_prime.ndim() != 1 || gamma_prime.shape()[0] != k.shape().back()) {
    throw DimError("gamma_prime shape " + shape_str(gamma_prime.shape()) + " must be (" +
                   std::to_string(k.shape().back()) + ")");
  }
  const std::size_t row_axis = k.ndim() - 2;
  auto m = reduce_mean(mul(k, gamma_prime), {row_axis}, true);
  return scale(add(k, m), T(0.5));
}

// Chart averaging: [.., H*N, d] -> [.., N, d], arithmetic mean over charts.
template <typename T>
Tensor<T> aggregate_mean(const Tensor<T>& kr, std::size_t charts) {
  bool was2d;
  auto x3 = detail::lift3(kr, was2d);
  const std::size_t B = x3.shape()[0], HN = x3.shape()[1], d = x3.shape()[2];
  if (charts == 0 || HN % charts != 0) {
    throw DimError("row axis " + std::to_string(HN) + " not divisible by charts " +
                   std::to_string(charts));
  }
  const std::size_t N = HN / charts;
  auto y = reduce_mean(x3.reshape({B, charts, N, d}), {1});
  return detail::drop3(y, was2d);
}

// ---------------------------------------------------------------------------
// Parameter bundle.
// ---------------------------------------------------------------------------

template <typename T>
struct AttentionParams {
  KeyVariantSpec spec;
  std::size_t dim = 0;
  std::size_t n_tokens = 0;  // the one N the mixing coefficients were built for

  Tensor<T> W_q, W_v, W_out;  // [dim, dim], bias-free
  Tensor<T> W_k;              // [dim, dim], baseline only
  Tensor<T> W_expand;         // [H*dim, dim]
  Tensor<T> gamma;            // [H*dim]
  Tensor<T> mix;              // [H*N, N] grouped, or [N, H*N] condense (simplek)
  Tensor<T> to_out;           // [dim, H*dim], spatialk/kua only
  Tensor<T> gamma_prime;      // [dim], kua / vanillak with cb

  AttentionParams() = default;

  // gamma_init: 1.0 by default, or a small LayerScale-style value.
  // zero_init skips randomization entirely (shape-only construction).
  AttentionParams(KeyVariantSpec s, std::size_t dim_, std::size_t n, Rng& rng,
                  double gamma_init = 1.0, bool zero_init = false)
      : spec(s.normalized()), dim(dim_), n_tokens(n) {
    spec.validate();
    if (dim == 0 || n_tokens == 0) throw ConfigError("dim and token count must be positive");
    const std::size_t H = spec.charts;
    auto dense = [&](Shape shape) {
      return zero_init ? Tensor<T>::zeros(std::move(shape))
                       : Tensor<T>::trunc_normal(std::move(shape), rng, T(0.02));
    };
    W_q = dense({dim, dim});
    W_v = dense({dim, dim});
    W_out = dense({dim, dim});
    if (spec.kind == KeyKind::Baseline) {
      W_k = dense({dim, dim});
    } else {
      W_expand = dense({H * dim, dim});
      gamma = zero_init ? Tensor<T>::zeros({H * dim})
                        : Tensor<T>::filled({H * dim}, static_cast<T>(gamma_init));
      if (spec.kind == KeyKind::SimpleK) {
        mix = Tensor<T>::zeros({n, H * n});
        if (!zero_init) {
          // near-degenerate start: condense as the average of per-chart identities
          for (std::size_t j = 0; j < n; ++j) {
            for (std::size_t c = 0; c < H * n; ++c) {
              const T eye = (c % n == j) ? T(1) / static_cast<T>(H) : T(0);
              mix.data()[j * H * n + c] = eye + static_cast<T>(rng.truncated_normal(0.02));
            }
          }
        }
      } else {
        mix = Tensor<T>::zeros({H * n, n});
        if (!zero_init) {
          // identity within each chart plus noise
          for (std::size_t i = 0; i < H * n; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
              const T eye = (i % n == j) ? T(1) : T(0);
              mix.data()[i * n + j] = eye + static_cast<T>(rng.truncated_normal(0.02));
            }
          }
        }
      }
      if (spec.kind == KeyKind::SpatialK || spec.kind == KeyKind::KUA) {
        to_out = dense({dim, H * dim});
      }
      if (spec.uses_cb()) {
        gamma_prime = zero_init ? Tensor<T>::zeros({dim}) : Tensor<T>::ones({dim});
      }
    }
    validate();
  }

  // Exact shape contract; rejects any tampered or foreign tensor layout.
  void validate() const {
    spec.validate();
    const std::size_t H = spec.charts;
    auto expect = [&](const Tensor<T>& t, Shape want, const char* name, bool present) {
      if (!present) {
        if (t.defined()) throw DimError(std::string(name) + " must be absent for " + kind_name(spec.kind));
        return;
      }
      if (!t.defined() || t.shape() != want) {
        throw DimError(std::string(name) + " shape " +
                       (t.defined() ? shape_str(t.shape()) : "(absent)") + " must be " +
                       shape_str(want));
      }
    };
    const bool manifold = spec.is_manifold();
    const bool has_to_out = spec.kind == KeyKind::SpatialK || spec.kind == KeyKind::KUA;
    expect(W_q, {dim, dim}, "W_q", true);
    expect(W_v, {dim, dim}, "W_v", true);
    expect(W_out, {dim, dim}, "W_out", true);
    expect(W_k, {dim, dim}, "W_k", !manifold);
    expect(W_expand, {H * dim, dim}, "W_expand", manifold);
    expect(gamma, {H * dim}, "gamma", manifold);
    if (spec.kind == KeyKind::SimpleK) {
      expect(mix, {n_tokens, H * n_tokens}, "mix", true);
    } else {
      expect(mix, {H * n_tokens, n_tokens}, "mix", manifold);
    }
    expect(to_out, {dim, H * dim}, "to_out", has_to_out);
    expect(gamma_prime, {dim}, "gamma_prime", spec.uses_cb());
  }

  // Registration order is fixed; training and checkpoints rely on it.
  std::vector<std::pair<std::string, Tensor<T>*>> named() {
    std::vector<std::pair<std::string, Tensor<T>*>> out = {
        {"W_q", &W_q}, {"W_v", &W_v}, {"W_out", &W_out}};
    if (!spec.is_manifold()) {
      out.push_back({"W_k", &W_k});
      return out;
    }
    out.push_back({"W_expand", &W_expand});
    out.push_back({"gamma", &gamma});
    out.push_back({"mix", &mix});
    if (to_out.defined()) out.push_back({"to_out", &to_out});
    if (gamma_prime.defined()) out.push_back({"gamma_prime", &gamma_prime});
    return out;
  }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (auto& [name, t] : const_cast<AttentionParams*>(this)->named()) n += t->numel();
    return n;
  }
};

// ---------------------------------------------------------------------------
// Attention math.
// ---------------------------------------------------------------------------

// SoftMax(Q K^T / sqrt(d_k)) V over the trailing two axes; leading axes are
// (batch and) heads. attn_out, if given, receives the softmax matrix.
template <typename T>
Tensor<T> scaled_dot_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                               Tensor<T>* attn_out = nullptr) {
  if (q.ndim() < 3 || q.shape() != k.shape() || q.shape() != v.shape()) {
    throw DimError("q/k/v shapes must match and be rank >= 3: " + shape_str(q.shape()) + ", " +
                   shape_str(k.shape()) + ", " + shape_str(v.shape()));
  }
  const std::size_t d = q.shape().back();
  auto scores = scale(matmul_nt(q, k), static_cast<T>(1.0 / std::sqrt(static_cast<double>(d))));
  auto attn = softmax(scores, scores.ndim() - 1);
  if (attn_out) *attn_out = attn;
  return matmul(attn, v);
}

// The variant dispatch: X [.., N, dim] -> K [.., N, dim].
template <typename T>
Tensor<T> key_forward(const Tensor<T>& x, const AttentionParams<T>& p) {
  p.validate();
  if (x.shape().back() != p.dim) {
    throw DimError("input feature dim " + std::to_string(x.shape().back()) + " != " +
                   std::to_string(p.dim));
  }
  if (p.spec.kind == KeyKind::Baseline) {
    return linear(x, p.W_k);
  }
  const std::size_t n = x.shape()[x.ndim() - 2];
  if (n != p.n_tokens) {
    throw ConfigError("token count " + std::to_string(n) + " != constructed N " +
                      std::to_string(p.n_tokens) + " (mixing coefficients are N-bound)");
  }
  const std::size_t H = p.spec.charts;
  auto xr = chart_rearrange(expand_key(x, p.W_expand, p.gamma), H);
  switch (p.spec.kind) {
    case KeyKind::SpatialK:
      return linear(chart_unrearrange(chart_mix(xr, p.mix, H), H), p.to_out);
    case KeyKind::KUA:
      return linear(chart_unrearrange(context_broadcast(chart_mix(xr, p.mix, H), p.gamma_prime), H),
                    p.to_out);
    case KeyKind::SimpleK:
      return grouped_pointwise_conv(xr, p.mix, 1);  // condense H*N -> N channels
    case KeyKind::VanillaK: {
      auto mixed = chart_mix(xr, p.mix, H);
      if (p.spec.uses_cb()) mixed = context_broadcast(mixed, p.gamma_prime);
      return aggregate_mean(mixed, H);
    }
    default:
      throw ConfigError("unknown key variant kind");
  }
}

// Full multi-head block: project Q/V, run the key pipeline, split heads,
// attend, merge, project out. attn_out receives [.., heads, N, N].
template <typename T>
Tensor<T> mhsa_forward(const Tensor<T>& x, const AttentionParams<T>& p, std::size_t heads,
                       Tensor<T>* attn_out = nullptr) {
  if (heads == 0 || p.dim % heads != 0) {
    throw ConfigError("dim " + std::to_string(p.dim) + " not divisible by heads " +
                      std::to_string(heads));
  }
  bool was2d;
  auto x3 = detail::lift3(x, was2d);
  const std::size_t B = x3.shape()[0], N = x3.shape()[1];
  const std::size_t dh = p.dim / heads;
  auto split = [&](const Tensor<T>& t) {
    return t.reshape({B, N, heads, dh}).permute({0, 2, 1, 3});
  };
  auto q = split(linear(x3, p.W_q));
  auto v = split(linear(x3, p.W_v));
  auto k = split(key_forward(x3, p));
  auto att = scaled_dot_attention(q, k, v, attn_out);
  auto merged = att.permute({0, 2, 1, 3}).reshape({B, N, p.dim});
  return detail::drop3(linear(merged, p.W_out), was2d);
}

}  // namespace mklab
