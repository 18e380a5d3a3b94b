#pragma once

// Labeled image datasets: a deterministic synthetic generator (class-keyed
// geometric patterns) and a loader for IDX-style flat binary files.

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "mklab/common.hpp"
#include "mklab/tensor.hpp"

namespace mklab {

template <typename T>
struct LabeledDataset {
  Tensor<T> images;                 // [M, C, S, S]
  std::vector<std::size_t> labels;  // [M], values < num_classes
  std::size_t num_classes = 0;
  std::string split;

  std::size_t size() const { return labels.size(); }

  void validate() const {
    if (images.ndim() != 4) throw ContractError("dataset images must be [M,C,S,S], got " + shape_str(images.shape()));
    if (images.shape()[0] != labels.size())
      throw ContractError("dataset has " + std::to_string(images.shape()[0]) + " images but " +
                          std::to_string(labels.size()) + " labels");
    for (std::size_t l : labels)
      if (l >= num_classes)
        throw ContractError("label " + std::to_string(l) + " out of range for " + std::to_string(num_classes) +
                            " classes");
  }
};

// Copy selected samples into a fresh [B,C,S,S] batch tensor (plain leaf, no grad).
template <typename T>
Tensor<T> gather_images(const LabeledDataset<T>& ds, const std::vector<std::size_t>& idx) {
  const Shape& s = ds.images.shape();
  const std::size_t row = s[1] * s[2] * s[3];
  std::vector<T> out(idx.size() * row);
  const std::vector<T>& src = ds.images.data();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= s[0]) throw ContractError("sample index out of range");
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(idx[i] * row), row,
                out.begin() + static_cast<std::ptrdiff_t>(i * row));
  }
  return Tensor<T>::from({idx.size(), s[1], s[2], s[3]}, std::move(out));
}

template <typename T>
std::vector<std::size_t> gather_labels(const LabeledDataset<T>& ds, const std::vector<std::size_t>& idx) {
  std::vector<std::size_t> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) out[i] = ds.labels[idx[i]];
  return out;
}

// Deterministic synthetic dataset. Each class draws a bright geometric stroke
// (horizontal bar / vertical bar / main diagonal / anti-diagonal, cycling for
// class ids >= 4, shifted by one pixel per cycle) on a dark background, with
// per-sample position jitter and additive Gaussian noise. Samples are emitted
// class-by-class; shuffling is the trainer's job.
template <typename T>
LabeledDataset<T> synth_dataset(std::size_t classes, std::size_t samples_per_class, std::size_t image_size,
                                std::uint64_t seed, std::size_t channels = 1) {
  if (classes == 0 || samples_per_class == 0 || image_size < 4 || channels == 0)
    throw ConfigError("synth_dataset needs classes>0, samples_per_class>0, image_size>=4, channels>0");

  const std::size_t S = image_size;
  const std::size_t M = classes * samples_per_class;
  const std::size_t thick = S >= 8 ? S / 8 : 1;
  const long jitter = static_cast<long>(S / 8);  // max |shift| in pixels
  Rng rng(seed);
  std::vector<T> images(M * channels * S * S, T(0));
  std::vector<std::size_t> labels(M);

  auto jit = [&]() { return static_cast<long>(rng.below(2 * static_cast<std::uint64_t>(jitter) + 1)) - jitter; };

  std::size_t m = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    const std::size_t kind = c % 4;
    const long cycle_shift = static_cast<long>(c / 4);
    for (std::size_t s = 0; s < samples_per_class; ++s, ++m) {
      labels[m] = c;
      const long dj = jit() + cycle_shift;
      const long center = static_cast<long>(S) / 2;
      std::vector<double> canvas(S * S, 0.0);
      for (std::size_t y = 0; y < S; ++y)
        for (std::size_t x = 0; x < S; ++x) {
          const long ly = static_cast<long>(y), lx = static_cast<long>(x);
          bool on = false;
          switch (kind) {
            case 0: on = std::abs(ly - (center + dj)) < static_cast<long>(thick); break;  // horizontal bar
            case 1: on = std::abs(lx - (center + dj)) < static_cast<long>(thick); break;  // vertical bar
            case 2: on = std::abs(ly - lx - dj) < static_cast<long>(thick); break;        // main diagonal
            default: on = std::abs(ly + lx - (static_cast<long>(S) - 1) - dj) < static_cast<long>(thick); break;
          }
          if (on) canvas[y * S + x] = 1.0;
        }
      for (std::size_t ch = 0; ch < channels; ++ch)
        for (std::size_t p = 0; p < S * S; ++p)
          images[(m * channels + ch) * S * S + p] = static_cast<T>(canvas[p] + 0.1 * rng.normal());
    }
  }
  LabeledDataset<T> ds{Tensor<T>::from({M, channels, S, S}, std::move(images)), std::move(labels), classes,
                       "synthetic"};
  ds.validate();
  return ds;
}

// ---- IDX-style flat binary loader ------------------------------------------
// Layout: 2 zero bytes, dtype byte (0x08 = unsigned byte), ndim byte, then
// ndim big-endian u32 dimensions, then raw element data.

namespace detail {

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open file: " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

struct IdxArray {
  std::vector<std::size_t> dims;
  std::vector<std::uint8_t> data;
};

inline IdxArray parse_idx(const std::vector<std::uint8_t>& bytes, const std::string& what) {
  if (bytes.size() < 4 || bytes[0] != 0 || bytes[1] != 0)
    throw ContractError(what + ": not an IDX file (bad magic)");
  if (bytes[2] != 0x08) throw ContractError(what + ": unsupported IDX dtype (only unsigned byte 0x08)");
  const std::size_t ndim = bytes[3];
  if (ndim == 0 || ndim > 4) throw ContractError(what + ": unsupported IDX rank " + std::to_string(ndim));
  if (bytes.size() < 4 + 4 * ndim) throw ContractError(what + ": truncated IDX header");
  IdxArray arr;
  std::size_t total = 1;
  for (std::size_t i = 0; i < ndim; ++i) {
    const std::size_t off = 4 + 4 * i;
    const std::size_t d = (std::size_t(bytes[off]) << 24) | (std::size_t(bytes[off + 1]) << 16) |
                          (std::size_t(bytes[off + 2]) << 8) | std::size_t(bytes[off + 3]);
    arr.dims.push_back(d);
    total *= d;
  }
  const std::size_t body = 4 + 4 * ndim;
  if (bytes.size() != body + total)
    throw ContractError(what + ": IDX payload is " + std::to_string(bytes.size() - body) + " bytes, header implies " +
                        std::to_string(total));
  arr.data.assign(bytes.begin() + static_cast<std::ptrdiff_t>(body), bytes.end());
  return arr;
}

}  // namespace detail

// Images file must be rank 3 [M,S,S] (single channel) or rank 4 [M,C,S,S];
// labels file rank 1 [M]. Pixel bytes are scaled to [0,1].
template <typename T>
LabeledDataset<T> load_idx_dataset(const std::string& images_path, const std::string& labels_path,
                                   std::size_t num_classes, const std::string& split = "file") {
  detail::IdxArray im = detail::parse_idx(detail::read_file_bytes(images_path), images_path);
  detail::IdxArray lb = detail::parse_idx(detail::read_file_bytes(labels_path), labels_path);
  if (im.dims.size() != 3 && im.dims.size() != 4)
    throw ContractError(images_path + ": expected rank 3 or 4 image array, got rank " +
                        std::to_string(im.dims.size()));
  if (lb.dims.size() != 1) throw ContractError(labels_path + ": expected rank 1 label array");
  const std::size_t M = im.dims[0];
  const std::size_t C = im.dims.size() == 4 ? im.dims[1] : 1;
  const std::size_t H = im.dims[im.dims.size() - 2], W = im.dims[im.dims.size() - 1];
  if (H != W) throw ContractError(images_path + ": only square images supported, got " + std::to_string(H) + "x" +
                                  std::to_string(W));
  if (lb.dims[0] != M)
    throw ContractError("image/label count mismatch: " + std::to_string(M) + " vs " + std::to_string(lb.dims[0]));

  std::vector<T> px(im.data.size());
  for (std::size_t i = 0; i < im.data.size(); ++i) px[i] = static_cast<T>(im.data[i] / 255.0);
  std::vector<std::size_t> labels(M);
  for (std::size_t i = 0; i < M; ++i) labels[i] = lb.data[i];
  LabeledDataset<T> ds{Tensor<T>::from({M, C, H, W}, std::move(px)), std::move(labels), num_classes, split};
  ds.validate();
  return ds;
}

}  // namespace mklab
