#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace pcn {

struct LayerSpec {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  bool pools_after = false;

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

enum class Dataset { Mnist, Cifar10, Cifar100 };

inline std::string dataset_name(Dataset d) {
  switch (d) {
    case Dataset::Mnist: return "mnist";
    case Dataset::Cifar10: return "cifar10";
    case Dataset::Cifar100: return "cifar100";
  }
  return "?";
}

inline Dataset parse_dataset(const std::string& s) {
  if (s == "mnist") return Dataset::Mnist;
  if (s == "cifar10") return Dataset::Cifar10;
  if (s == "cifar100") return Dataset::Cifar100;
  throw std::invalid_argument("unknown dataset '" + s + "' (expected mnist, cifar10 or cifar100)");
}

/// One architecture: a VGG-like stack of 3x3 convs
/// followed by global average pooling and a linear classifier.
struct ArchConfig {
  char name = 'E';
  std::vector<LayerSpec> layers;
  std::size_t num_classes = 10;
  std::size_t input_channels = 1;
  std::size_t input_size = 28;

  std::size_t depth() const noexcept { return layers.size(); }

  /// Channel count of representation r_l, l = 0..depth().
  std::size_t channels(std::size_t l) const { return l == 0 ? input_channels : layers.at(l - 1).out_channels; }

  /// Spatial side of representation r_l.
  std::size_t spatial(std::size_t l) const {
    std::size_t s = input_size;
    for (std::size_t i = 0; i < l; ++i)
      if (layers.at(i).pools_after) s /= 2;
    return s;
  }

  void validate() const {
    if (layers.empty()) throw std::invalid_argument("architecture has no layers");
    if (num_classes == 0 || input_channels == 0) throw std::invalid_argument("architecture has empty dimensions");
    std::size_t s = input_size, c = input_channels;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& L = layers[i];
      if (L.in_channels != c)
        throw std::invalid_argument("layer " + std::to_string(i) + " expects " + std::to_string(L.in_channels) +
                                    " input channels, previous layer gives " + std::to_string(c));
      if (L.pools_after) {
        if (s % 2) throw std::invalid_argument("layer " + std::to_string(i) + " pools an odd spatial size");
        s /= 2;
      }
      c = L.out_channels;
    }
    if (s == 0) throw std::invalid_argument("spatial size collapses to zero");
  }

  friend bool operator==(const ArchConfig&, const ArchConfig&) = default;
};

/// Filter counts of architectures A-E.
inline std::vector<std::size_t> arch_widths(char name) {
  switch (name) {
    case 'A': return {64, 64, 128, 128, 256, 256, 256, 256};
    case 'B': return {32, 32, 64, 64, 128, 128, 128, 128};
    case 'C':
    case 'D': return {32, 32, 64, 64, 128, 128};
    case 'E': return {16, 16, 32, 32, 64, 64};
    default: throw std::invalid_argument(std::string("unknown architecture '") + name + "' (expected A-E)");
  }
}

/// Builds a stack from widths; a layer pools exactly where it doubles the width.
inline ArchConfig make_arch(char name, const std::vector<std::size_t>& widths, std::size_t num_classes,
                            std::size_t input_channels, std::size_t input_size) {
  ArchConfig a;
  a.name = name;
  a.num_classes = num_classes;
  a.input_channels = input_channels;
  a.input_size = input_size;
  std::size_t c = input_channels;
  for (std::size_t i = 0; i < widths.size(); ++i) {
    const bool doubles = i > 0 && widths[i] == 2 * widths[i - 1];
    a.layers.push_back({c, widths[i], doubles});
    c = widths[i];
  }
  a.validate();
  return a;
}

inline ArchConfig make_arch(char name, Dataset d) {
  switch (d) {
    case Dataset::Mnist: return make_arch(name, arch_widths(name), 10, 1, 28);
    case Dataset::Cifar10: return make_arch(name, arch_widths(name), 10, 3, 32);
    case Dataset::Cifar100: return make_arch(name, arch_widths(name), 100, 3, 32);
  }
  throw std::invalid_argument("unknown dataset");
}

inline char parse_arch_name(const std::string& s) {
  if (s.size() != 1) throw std::invalid_argument("unknown architecture '" + s + "' (expected A-E)");
  arch_widths(s[0]);
  return s[0];
}

/// Report label in the PCN-<arch>-<T>[ (tied)] / Plain-<arch> convention.
inline std::string model_label(char arch, bool plain, int cycles, bool tied) {
  if (plain) return std::string("Plain-") + arch;
  return std::string("PCN-") + arch + "-" + std::to_string(cycles) + (tied ? " (tied)" : "");
}

}  // namespace pcn
