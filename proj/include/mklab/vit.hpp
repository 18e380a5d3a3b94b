#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mklab/attention.hpp"
#include "mklab/tensor.hpp"

// Compact ViT: patchify -> LN -> linear -> LN stem, class token, learnable
// positions, pre-norm blocks (x + MHSA(LN x), x + MLP(LN x)), final LN, and a
// linear head on the class token. The key pipeline comes from attention.hpp.

namespace mklab {

enum class GammaInit { Ones, Small };

struct ModelConfig {
  std::size_t image_size = 224;
  std::size_t patch_size = 16;
  std::size_t channels = 3;
  std::size_t dim = 384;
  std::size_t depth = 12;
  std::size_t heads = 6;
  std::size_t mlp_dim = 1536;
  std::size_t num_classes = 1000;
  KeyVariantSpec variant;
  GammaInit gamma_init = GammaInit::Ones;
  double gamma_init_value = 1e-4;

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t n_tokens() const { return grid() * grid() + 1; }  // + class token
  std::size_t patch_dim() const { return channels * patch_size * patch_size; }
  double gamma_value() const { return gamma_init == GammaInit::Ones ? 1.0 : gamma_init_value; }

  void validate() const {
    if (image_size == 0 || patch_size == 0 || image_size % patch_size != 0) {
      throw ConfigError("image_size " + std::to_string(image_size) +
                        " not divisible by patch_size " + std::to_string(patch_size));
    }
    if (dim == 0 || heads == 0 || dim % heads != 0) {
      throw ConfigError("dim " + std::to_string(dim) + " not divisible by heads " +
                        std::to_string(heads));
    }
    if (depth == 0 || mlp_dim == 0 || num_classes == 0 || channels == 0) {
      throw ConfigError("depth, mlp_dim, num_classes, channels must be positive");
    }
    if (gamma_init == GammaInit::Small && gamma_init_value <= 0) {
      throw ConfigError("gamma_init_value must be positive");
    }
    variant.validate();
  }

  static ModelConfig vit_s16() {
    ModelConfig c;
    c.image_size = 224; c.patch_size = 16; c.channels = 3;
    c.dim = 384; c.depth = 12; c.heads = 6; c.mlp_dim = 1536; c.num_classes = 1000;
    return c;
  }
  static ModelConfig vit_b16() {
    ModelConfig c;
    c.image_size = 224; c.patch_size = 16; c.channels = 3;
    c.dim = 768; c.depth = 12; c.heads = 12; c.mlp_dim = 3072; c.num_classes = 1000;
    return c;
  }
  static ModelConfig tiny() {
    ModelConfig c;
    c.image_size = 16; c.patch_size = 4; c.channels = 1;
    c.dim = 64; c.depth = 2; c.heads = 2; c.mlp_dim = 256; c.num_classes = 4;
    return c;
  }
};

// Non-overlapping patch extraction: output[b, gy*G+gx, c*P*P + py*P + px] =
// images[b, c, gy*P+py, gx*P+px]. A data-marshalling op: image pixels never
// carry gradients here.
template <typename T>
Tensor<T> patchify(const Tensor<T>& images, std::size_t patch) {
  if (images.ndim() != 4) throw DimError("images must be [B, C, S, S], got " + shape_str(images.shape()));
  if (images.requires_grad()) throw ContractError("patchify does not propagate image gradients");
  const std::size_t B = images.shape()[0], C = images.shape()[1];
  const std::size_t Sh = images.shape()[2], Sw = images.shape()[3];
  if (Sh != Sw || patch == 0 || Sh % patch != 0) {
    throw DimError("image size " + shape_str(images.shape()) + " incompatible with patch " +
                   std::to_string(patch));
  }
  const std::size_t G = Sh / patch, pd = C * patch * patch;
  auto out = Tensor<T>::zeros({B, G * G, pd});
  const auto& src = images.data();
  auto& dst = out.data();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t gy = 0; gy < G; ++gy) {
      for (std::size_t gx = 0; gx < G; ++gx) {
        const std::size_t row = (b * G * G + gy * G + gx) * pd;
        for (std::size_t c = 0; c < C; ++c) {
          for (std::size_t py = 0; py < patch; ++py) {
            const std::size_t src_off = ((b * C + c) * Sh + gy * patch + py) * Sw + gx * patch;
            const std::size_t dst_off = row + (c * patch + py) * patch;
            for (std::size_t px = 0; px < patch; ++px) dst[dst_off + px] = src[src_off + px];
          }
        }
      }
    }
  }
  return out;
}

template <typename T>
struct VitBlock {
  Tensor<T> ln1_g, ln1_b;
  AttentionParams<T> attn;
  Tensor<T> ln2_g, ln2_b;
  Tensor<T> fc1_w, fc1_b, fc2_w, fc2_b;
};

template <typename T>
class VitModel {
 public:
  ModelConfig cfg;

  Tensor<T> stem_ln_pre_g, stem_ln_pre_b;   // LayerNorm(patch_dim)
  Tensor<T> patch_w, patch_b;               // [dim, patch_dim], [dim]
  Tensor<T> stem_ln_post_g, stem_ln_post_b; // LayerNorm(dim)
  Tensor<T> cls_token;                      // [dim]
  Tensor<T> pos_embed;                      // [N, dim]
  std::vector<VitBlock<T>> blocks;
  Tensor<T> final_ln_g, final_ln_b;
  Tensor<T> head_w, head_b;                 // [classes, dim], [classes]

  // zero_init builds the exact parameter set without touching the RNG
  // (shape/count work on large configs).
  explicit VitModel(ModelConfig config, std::uint64_t seed = 0, bool zero_init = false)
      : cfg(std::move(config)) {
    cfg.validate();
    Rng rng(seed);
    const std::size_t D = cfg.dim, pd = cfg.patch_dim(), N = cfg.n_tokens();
    auto dense = [&](Shape shape) {
      return zero_init ? Tensor<T>::zeros(std::move(shape))
                       : Tensor<T>::trunc_normal(std::move(shape), rng, T(0.02));
    };
    auto ln_gain = [&](std::size_t n) {
      return zero_init ? Tensor<T>::zeros({n}) : Tensor<T>::ones({n});
    };
    stem_ln_pre_g = ln_gain(pd);
    stem_ln_pre_b = Tensor<T>::zeros({pd});
    patch_w = dense({D, pd});
    patch_b = Tensor<T>::zeros({D});
    stem_ln_post_g = ln_gain(D);
    stem_ln_post_b = Tensor<T>::zeros({D});
    cls_token = dense({D});
    pos_embed = Tensor<T>::zeros({N, D});
    blocks.reserve(cfg.depth);
    for (std::size_t i = 0; i < cfg.depth; ++i) {
      VitBlock<T> b;
      b.ln1_g = ln_gain(D);
      b.ln1_b = Tensor<T>::zeros({D});
      b.attn = AttentionParams<T>(cfg.variant, D, N, rng, cfg.gamma_value(), zero_init);
      b.ln2_g = ln_gain(D);
      b.ln2_b = Tensor<T>::zeros({D});
      b.fc1_w = dense({cfg.mlp_dim, D});
      b.fc1_b = Tensor<T>::zeros({cfg.mlp_dim});
      b.fc2_w = dense({D, cfg.mlp_dim});
      b.fc2_b = Tensor<T>::zeros({D});
      blocks.push_back(std::move(b));
    }
    final_ln_g = ln_gain(D);
    final_ln_b = Tensor<T>::zeros({D});
    head_w = dense({cfg.num_classes, D});
    head_b = Tensor<T>::zeros({cfg.num_classes});
    for (auto& [name, t] : named_params()) t->set_requires_grad(true);
  }

  // Fixed registration order; training, checkpoints, and the analysis
  // cross-check all key off these names.
  std::vector<std::pair<std::string, Tensor<T>*>> named_params() {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    out.push_back({"stem.ln_pre.g", &stem_ln_pre_g});
    out.push_back({"stem.ln_pre.b", &stem_ln_pre_b});
    out.push_back({"stem.proj.w", &patch_w});
    out.push_back({"stem.proj.b", &patch_b});
    out.push_back({"stem.ln_post.g", &stem_ln_post_g});
    out.push_back({"stem.ln_post.b", &stem_ln_post_b});
    out.push_back({"cls_token", &cls_token});
    out.push_back({"pos_embed", &pos_embed});
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const std::string p = "blocks." + std::to_string(i) + ".";
      auto& b = blocks[i];
      out.push_back({p + "ln1.g", &b.ln1_g});
      out.push_back({p + "ln1.b", &b.ln1_b});
      for (auto& [name, t] : b.attn.named()) out.push_back({p + "attn." + name, t});
      out.push_back({p + "ln2.g", &b.ln2_g});
      out.push_back({p + "ln2.b", &b.ln2_b});
      out.push_back({p + "mlp.fc1.w", &b.fc1_w});
      out.push_back({p + "mlp.fc1.b", &b.fc1_b});
      out.push_back({p + "mlp.fc2.w", &b.fc2_w});
      out.push_back({p + "mlp.fc2.b", &b.fc2_b});
    }
    out.push_back({"final_ln.g", &final_ln_g});
    out.push_back({"final_ln.b", &final_ln_b});
    out.push_back({"head.w", &head_w});
    out.push_back({"head.b", &head_b});
    return out;
  }

  std::size_t param_count() {
    std::size_t n = 0;
    for (auto& [name, t] : named_params()) n += t->numel();
    return n;
  }

  void zero_grad() {
    for (auto& [name, t] : named_params()) t->zero_grad();
  }

  // Patch tokens with class token and positions attached: [B, N, dim].
  Tensor<T> patch_embed(const Tensor<T>& images) {
    if (images.ndim() != 4 || images.shape()[1] != cfg.channels ||
        images.shape()[2] != cfg.image_size || images.shape()[3] != cfg.image_size) {
      throw DimError("images " + shape_str(images.shape()) + " do not match configured [B, " +
                     std::to_string(cfg.channels) + ", " + std::to_string(cfg.image_size) + ", " +
                     std::to_string(cfg.image_size) + "]");
    }
    const std::size_t B = images.shape()[0];
    auto x = patchify(images, cfg.patch_size);
    x = layer_norm(x, stem_ln_pre_g, stem_ln_pre_b);
    x = linear(x, patch_w, &patch_b);
    x = layer_norm(x, stem_ln_post_g, stem_ln_post_b);
    auto cls = cls_token.reshape({1, 1, cfg.dim}).broadcast_to({B, 1, cfg.dim});
    return add(concat(cls, x, 1), pos_embed);
  }

  Tensor<T> block_forward(std::size_t i, const Tensor<T>& x, Tensor<T>* attn_out = nullptr) {
    auto& b = blocks.at(i);
    auto h = mhsa_forward(layer_norm(x, b.ln1_g, b.ln1_b), b.attn, cfg.heads, attn_out);
    auto y = add(x, h);
    auto m = linear(gelu(linear(layer_norm(y, b.ln2_g, b.ln2_b), b.fc1_w, &b.fc1_b)), b.fc2_w,
                    &b.fc2_b);
    return add(y, m);
  }

  // logits [B, num_classes]; attn_records, if given, receives one
  // [B, heads, N, N] attention tensor per layer.
  Tensor<T> forward(const Tensor<T>& images, std::vector<Tensor<T>>* attn_records = nullptr) {
    auto x = patch_embed(images);
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      Tensor<T> attn;
      x = block_forward(i, x, attn_records ? &attn : nullptr);
      if (attn_records) attn_records->push_back(attn);
    }
    x = layer_norm(x, final_ln_g, final_ln_b);
    auto cls = x.narrow(1, 0, 1).reshape({x.shape()[0], cfg.dim});
    return linear(cls, head_w, &head_b);
  }
};

}  // namespace mklab
