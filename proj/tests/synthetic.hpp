#pragma once

#include <cstdlib>
#include <filesystem>
#include <random>
#include <string>
#include <unistd.h>

#include "pcn/datasets.hpp"

namespace pcn::test {

/// MNIST-shaped data that a small net can learn: class k is a bright 6x6
/// patch at one of ten fixed positions plus uniform noise. Labels cycle 0..9.
inline Split patch_split(std::size_t n, std::uint64_t seed, std::size_t channels = 1, std::size_t side = 28) {
  Split s;
  s.channels = channels;
  s.height = s.width = side;
  s.num_classes = 10;
  s.pixels.assign(n * channels * side * side, 0.f);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> noise(0.f, 0.3f);
  for (std::size_t i = 0; i < n; ++i) {
    const int k = int(i % 10);
    s.labels.push_back(k);
    float* img = s.image(i);
    for (std::size_t j = 0; j < s.image_numel(); ++j) img[j] = noise(rng);
    const std::size_t y0 = 2 + std::size_t(k / 5) * 12, x0 = 1 + std::size_t(k % 5) * 5;
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t y = y0; y < y0 + 6; ++y)
        for (std::size_t x = x0; x < x0 + 6; ++x) img[(c * side + y) * side + x] = 1.f;
  }
  return s;
}

inline DatasetSplits patch_dataset(std::size_t train, std::size_t test, std::uint64_t seed = 1) {
  DatasetSplits d;
  d.id = Dataset::Mnist;
  d.train = patch_split(train, seed);
  d.test = patch_split(test, seed + 1000);
  return d;
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag = "pcn") {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            (tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() { std::filesystem::remove_all(path_); }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

/// Real MNIST under $PCN_DATA_DIR, or nullopt.
inline std::optional<DatasetSplits> real_mnist() {
  const auto root = data_root("");
  if (!root) return std::nullopt;
  try {
    return load_dataset(Dataset::Mnist, *root);
  } catch (const IoError&) {
    return std::nullopt;
  }
}

}  // namespace pcn::test
