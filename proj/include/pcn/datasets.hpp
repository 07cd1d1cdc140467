#pragma once

// MNIST (IDX) and CIFAR-10/100 (binary batch) readers, per-channel
// normalization, CIFAR augmentation and mini-batch iteration.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "pcn/arch.hpp"
#include "pcn/tensor.hpp"

namespace pcn {

namespace fs = std::filesystem;

/// Images stored contiguously as C*H*W floats each, pixel values in [0,1]
/// until normalize() is applied.
struct Split {
  std::size_t channels = 0, height = 0, width = 0, num_classes = 0;
  std::vector<float> pixels;
  std::vector<std::int32_t> labels;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t image_numel() const noexcept { return channels * height * width; }
  const float* image(std::size_t i) const { return pixels.data() + i * image_numel(); }
  float* image(std::size_t i) { return pixels.data() + i * image_numel(); }

  /// Copy of item i as a 1xCxHxW tensor.
  Tensor<float> item(std::size_t i) const {
    if (i >= size()) throw std::out_of_range("image index " + std::to_string(i) + " out of range");
    auto t = Tensor<float>::uninit({1, channels, height, width});
    std::copy_n(image(i), image_numel(), t.data().data());
    return t;
  }
};

struct DatasetSplits {
  Dataset id = Dataset::Mnist;
  Split train, test;
};

/// FNV-1a over labels and pixel bits; stable across loads of the same files.
inline std::uint64_t checksum(const Split& s) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ULL;
    }
  };
  mix(s.labels.data(), s.labels.size() * sizeof(std::int32_t));
  mix(s.pixels.data(), s.pixels.size() * sizeof(float));
  return h;
}

/// First n items, in file order.
inline Split take_first(const Split& s, std::size_t n) {
  if (n > s.size())
    throw std::invalid_argument("subset size " + std::to_string(n) + " exceeds split size " + std::to_string(s.size()));
  Split out = s;
  out.labels.resize(n);
  out.pixels.resize(n * s.image_numel());
  return out;
}

namespace detail {

inline std::vector<unsigned char> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read error on " + path.string());
  return bytes;
}

inline std::uint32_t be32(const unsigned char* p) {
  return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) | (std::uint32_t(p[2]) << 8) | std::uint32_t(p[3]);
}

struct Idx {
  std::vector<std::uint32_t> dims;
  std::vector<unsigned char> bytes;
  std::size_t offset = 0;
};

inline Idx read_idx(const fs::path& path, std::uint32_t magic, std::size_t rank) {
  Idx idx;
  idx.bytes = read_file(path);
  const std::size_t header = 4 + 4 * rank;
  if (idx.bytes.size() < header) throw IoError(path.string() + ": truncated IDX header");
  const std::uint32_t m = be32(idx.bytes.data());
  if (m != magic)
    throw IoError(path.string() + ": bad magic " + std::to_string(m) + " (expected " + std::to_string(magic) + ")");
  std::size_t n = 1;
  for (std::size_t i = 0; i < rank; ++i) {
    idx.dims.push_back(be32(idx.bytes.data() + 4 + 4 * i));
    n *= idx.dims.back();
  }
  if (idx.bytes.size() != header + n)
    throw IoError(path.string() + ": expected " + std::to_string(header + n) + " bytes from header, file has " +
                  std::to_string(idx.bytes.size()) + " (truncated or corrupt)");
  idx.offset = header;
  return idx;
}

inline void check_label(std::int32_t label, std::size_t classes, const fs::path& path, std::size_t i) {
  if (label < 0 || std::size_t(label) >= classes)
    throw IoError(path.string() + ": label " + std::to_string(label) + " at record " + std::to_string(i) +
                  " is not below " + std::to_string(classes));
}

inline float pixel(unsigned char b) { return float(b) / 255.0f; }

}  // namespace detail

/// One IDX image/label file pair.
inline Split load_idx_pair(const fs::path& images, const fs::path& labels, std::size_t expected = 0) {
  const auto im = detail::read_idx(images, 2051, 3);
  const auto lb = detail::read_idx(labels, 2049, 1);
  if (im.dims[0] != lb.dims[0])
    throw IoError(images.string() + ": " + std::to_string(im.dims[0]) + " images but " + labels.string() + " has " +
                  std::to_string(lb.dims[0]) + " labels");
  if (expected && im.dims[0] != expected)
    throw IoError(images.string() + ": expected " + std::to_string(expected) + " images, header says " +
                  std::to_string(im.dims[0]));
  Split s;
  s.channels = 1;
  s.height = im.dims[1];
  s.width = im.dims[2];
  s.num_classes = 10;
  const std::size_t n = im.dims[0];
  s.pixels.resize(n * s.image_numel());
  for (std::size_t i = 0; i < s.pixels.size(); ++i) s.pixels[i] = detail::pixel(im.bytes[im.offset + i]);
  s.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    s.labels[i] = lb.bytes[lb.offset + i];
    detail::check_label(s.labels[i], s.num_classes, labels, i);
  }
  return s;
}

inline DatasetSplits load_mnist(const fs::path& dir) {
  DatasetSplits d;
  d.id = Dataset::Mnist;
  auto pair = [&](const std::string& prefix, std::size_t expected) {
    const fs::path images = dir / (prefix + "-images-idx3-ubyte");
    Split s = load_idx_pair(images, dir / (prefix + "-labels-idx1-ubyte"), expected);
    if (s.height != 28 || s.width != 28) throw IoError(images.string() + ": images are not 28x28");
    return s;
  };
  d.train = pair("train", 60000);
  d.test = pair("t10k", 10000);
  return d;
}

/// Appends the records of one CIFAR binary file. `label_bytes` is 1 for
/// CIFAR-10 and 2 (coarse, fine) for CIFAR-100, where the fine label is kept.
inline void read_cifar_file(const fs::path& path, std::size_t label_bytes, std::size_t classes, std::size_t expected,
                            Split& s) {
  constexpr std::size_t kPixels = 3 * 32 * 32;
  const std::size_t record = label_bytes + kPixels;
  const auto bytes = detail::read_file(path);
  if (bytes.size() % record != 0 || bytes.size() / record != expected)
    throw IoError(path.string() + ": expected " + std::to_string(expected) + " records of " + std::to_string(record) +
                  " bytes, file has " + std::to_string(bytes.size()) + " bytes");
  const std::size_t base = s.size();
  s.labels.resize(base + expected);
  s.pixels.resize((base + expected) * kPixels);
  for (std::size_t i = 0; i < expected; ++i) {
    const unsigned char* r = bytes.data() + i * record;
    const std::int32_t label = r[label_bytes - 1];
    detail::check_label(label, classes, path, i);
    s.labels[base + i] = label;
    float* dst = s.image(base + i);
    for (std::size_t k = 0; k < kPixels; ++k) dst[k] = detail::pixel(r[label_bytes + k]);
  }
}

inline Split empty_cifar_split(std::size_t classes) {
  Split s;
  s.channels = 3;
  s.height = s.width = 32;
  s.num_classes = classes;
  return s;
}

/// `per_file` is the record count of each standard batch file (10000).
inline DatasetSplits load_cifar10(const fs::path& dir, std::size_t per_file = 10000) {
  DatasetSplits d;
  d.id = Dataset::Cifar10;
  d.train = empty_cifar_split(10);
  d.test = empty_cifar_split(10);
  for (int b = 1; b <= 5; ++b)
    read_cifar_file(dir / ("data_batch_" + std::to_string(b) + ".bin"), 1, 10, per_file, d.train);
  read_cifar_file(dir / "test_batch.bin", 1, 10, per_file, d.test);
  return d;
}

inline DatasetSplits load_cifar100(const fs::path& dir, std::size_t train_n = 50000, std::size_t test_n = 10000) {
  DatasetSplits d;
  d.id = Dataset::Cifar100;
  d.train = empty_cifar_split(100);
  d.test = empty_cifar_split(100);
  read_cifar_file(dir / "train.bin", 2, 100, train_n, d.train);
  read_cifar_file(dir / "test.bin", 2, 100, test_n, d.test);
  return d;
}

/// Explicit path if given, else $PCN_DATA_DIR. Empty when neither is set.
inline std::optional<fs::path> data_root(const std::string& flag) {
  if (!flag.empty()) return fs::path(flag);
  if (const char* env = std::getenv("PCN_DATA_DIR"); env && *env) return fs::path(env);
  return std::nullopt;
}

/// Directory holding the files for `d`: the root itself or its conventional subdirectory.
inline fs::path dataset_dir(const fs::path& root, Dataset d) {
  std::vector<fs::path> candidates;
  std::string probe;
  switch (d) {
    case Dataset::Mnist:
      candidates = {root / "mnist", root / "MNIST", root};
      probe = "train-images-idx3-ubyte";
      break;
    case Dataset::Cifar10:
      candidates = {root / "cifar-10-batches-bin", root / "cifar10", root};
      probe = "data_batch_1.bin";
      break;
    case Dataset::Cifar100:
      candidates = {root / "cifar-100-binary", root / "cifar100", root};
      probe = "train.bin";
      break;
  }
  for (const auto& c : candidates)
    if (fs::exists(c / probe)) return c;
  throw IoError("no " + dataset_name(d) + " files (" + probe + ") under " + root.string() +
                "; set --data-dir or PCN_DATA_DIR to the directory holding the standard files");
}

inline DatasetSplits load_dataset(Dataset d, const fs::path& root) {
  const fs::path dir = dataset_dir(root, d);
  switch (d) {
    case Dataset::Mnist: return load_mnist(dir);
    case Dataset::Cifar10: return load_cifar10(dir);
    case Dataset::Cifar100: return load_cifar100(dir);
  }
  throw std::invalid_argument("unknown dataset");
}

struct NormStats {
  std::vector<double> mean, std;

  void validate(std::size_t channels) const {
    if (mean.size() != channels || std.size() != channels)
      throw std::invalid_argument("normalization stats have " + std::to_string(mean.size()) + " channels, need " +
                                  std::to_string(channels));
    for (std::size_t c = 0; c < channels; ++c)
      if (!(std[c] > 0)) throw std::invalid_argument("channel " + std::to_string(c) + " has zero standard deviation");
  }
  friend bool operator==(const NormStats&, const NormStats&) = default;
};

/// Per-channel mean and population standard deviation over every pixel of the split.
inline NormStats compute_norm_stats(const Split& s) {
  if (s.size() == 0) throw std::invalid_argument("cannot compute normalization stats of an empty split");
  const std::size_t hw = s.height * s.width;
  NormStats st;
  st.mean.assign(s.channels, 0.0);
  st.std.assign(s.channels, 0.0);
  for (std::size_t c = 0; c < s.channels; ++c) {
    double sum = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      const float* p = s.image(i) + c * hw;
      for (std::size_t k = 0; k < hw; ++k) sum += p[k];
    }
    const double mean = sum / double(s.size() * hw);
    double sq = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      const float* p = s.image(i) + c * hw;
      for (std::size_t k = 0; k < hw; ++k) sq += (p[k] - mean) * (p[k] - mean);
    }
    st.mean[c] = mean;
    st.std[c] = std::sqrt(sq / double(s.size() * hw));
  }
  st.validate(s.channels);
  return st;
}

/// In place: x <- (x - mean_c) / std_c for every image in the split.
inline void normalize(Split& s, const NormStats& st) {
  st.validate(s.channels);
  const std::size_t hw = s.height * s.width;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t c = 0; c < s.channels; ++c) {
      float* p = s.image(i) + c * hw;
      const double m = st.mean[c], sd = st.std[c];
      for (std::size_t k = 0; k < hw; ++k) p[k] = float((p[k] - m) / sd);
    }
}

/// NCHW tensor versions; the channel axis is dim 1.
template <class T>
Tensor<T> normalize(const Tensor<T>& x, const NormStats& st) {
  const auto [N, C, H, W] = dims4(x.shape(), "normalize");
  st.validate(C);
  Tensor<T> y = x;
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t k = 0; k < H * W; ++k) {
        T& v = y[(n * C + c) * H * W + k];
        v = T((v - st.mean[c]) / st.std[c]);
      }
  return y;
}

template <class T>
Tensor<T> denormalize(const Tensor<T>& x, const NormStats& st) {
  const auto [N, C, H, W] = dims4(x.shape(), "denormalize");
  st.validate(C);
  Tensor<T> y = x;
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t k = 0; k < H * W; ++k) {
        T& v = y[(n * C + c) * H * W + k];
        v = T(v * st.std[c] + st.mean[c]);
      }
  return y;
}

inline constexpr std::size_t kAugmentPad = 4;

/// Translation by cropping a HxW window at (oy, ox) from the image zero-padded
/// by 4 on each side, then an optional horizontal flip. (4, 4) is the identity crop.
inline void translate_flip(const float* src, std::size_t C, std::size_t H, std::size_t W, std::size_t oy,
                           std::size_t ox, bool flip, float* dst) {
  if (oy > 2 * kAugmentPad || ox > 2 * kAugmentPad)
    throw std::invalid_argument("crop offset must lie in [0, 8]");
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < H; ++y) {
      const std::ptrdiff_t sy = std::ptrdiff_t(y + oy) - std::ptrdiff_t(kAugmentPad);
      for (std::size_t x = 0; x < W; ++x) {
        const std::size_t xo = flip ? W - 1 - x : x;
        const std::ptrdiff_t sx = std::ptrdiff_t(xo + ox) - std::ptrdiff_t(kAugmentPad);
        const bool inside = sy >= 0 && sy < std::ptrdiff_t(H) && sx >= 0 && sx < std::ptrdiff_t(W);
        dst[(c * H + y) * W + x] = inside ? src[(c * H + std::size_t(sy)) * W + std::size_t(sx)] : 0.0f;
      }
    }
}

/// Random +-4 pixel translation and a horizontal flip with probability 0.5.
inline void random_translate_flip(const float* src, std::size_t C, std::size_t H, std::size_t W, std::mt19937_64& rng,
                                  float* dst) {
  std::uniform_int_distribution<std::size_t> offset(0, 2 * kAugmentPad);
  std::bernoulli_distribution coin(0.5);
  const std::size_t oy = offset(rng), ox = offset(rng);
  translate_flip(src, C, H, W, oy, ox, coin(rng), dst);
}

inline Tensor<float> augment(const Tensor<float>& image, std::mt19937_64& rng) {
  const auto [N, C, H, W] = dims4(image.shape(), "augment");
  if (N != 1 || H != 32 || W != 32) throw ShapeError("augment expects 1xCx32x32, got " + shape_str(image.shape()));
  auto out = Tensor<float>::uninit(image.shape());
  random_translate_flip(image.data().data(), C, H, W, rng, out.data().data());
  return out;
}

struct Batch {
  Tensor<float> images;
  std::vector<std::int32_t> labels;
};

/// One pass over a split in shuffled (rng given) or file order; the last batch may be short.
class BatchIterator {
 public:
  BatchIterator(const Split& split, std::size_t batch_size, std::mt19937_64* rng = nullptr, bool augment = false)
      : split_(split), batch_(batch_size), rng_(rng), augment_(augment) {
    if (batch_size == 0) throw std::invalid_argument("batch size must be at least 1");
    if (augment && !rng) throw std::invalid_argument("augmentation needs a random generator");
    order_.resize(split.size());
    std::iota(order_.begin(), order_.end(), std::size_t(0));
    if (rng_) std::shuffle(order_.begin(), order_.end(), *rng_);
  }

  bool next(Batch& b) {
    if (pos_ >= order_.size()) return false;
    const std::size_t n = std::min(batch_, order_.size() - pos_);
    const std::size_t numel = split_.image_numel();
    b.images = Tensor<float>::uninit({n, split_.channels, split_.height, split_.width});
    b.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t idx = order_[pos_ + i];
      float* dst = b.images.data().data() + i * numel;
      if (augment_) {
        random_translate_flip(split_.image(idx), split_.channels, split_.height, split_.width, *rng_, dst);
      } else {
        std::copy_n(split_.image(idx), numel, dst);
      }
      b.labels[i] = split_.labels[idx];
    }
    pos_ += n;
    return true;
  }

  std::size_t num_batches() const { return (order_.size() + batch_ - 1) / batch_; }

 private:
  const Split& split_;
  std::size_t batch_;
  std::mt19937_64* rng_;
  bool augment_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

}  // namespace pcn
