#pragma once

#include "cptrd/model_config.hpp"
#include "cptrd/tensor.hpp"

#include <cstdint>

namespace cptrd {

// Trainable prompt tensor. Shallow prompts hold l rows of width d; deep
// prompts hold L stacked blocks of l rows, one block per layer.
class SoftPrompt {
 public:
  SoftPrompt() = default;
  SoftPrompt(InjectionMode mode, int layers, int length, int dim);

  static SoftPrompt zeros(const ModelConfig& config);
  // uniform(-0.5, 0.5) / sqrt(d), seeded.
  static SoftPrompt random(const ModelConfig& config, std::uint64_t seed);
  static SoftPrompt from_values(const ModelConfig& config, RowMatrix values);

  InjectionMode mode() const { return mode_; }
  int layers() const { return layers_; }
  int length() const { return length_; }
  int dim() const { return dim_; }
  Eigen::Index size() const { return values_.size(); }

  const RowMatrix& values() const { return values_; }
  RowMatrix& values() { return values_; }

  // l x d block for layer `layer` (always layer 0 for shallow prompts).
  auto layer(int layer) const { return values_.middleRows(static_cast<Eigen::Index>(layer) * length_, length_); }
  auto layer(int layer) { return values_.middleRows(static_cast<Eigen::Index>(layer) * length_, length_); }

  // Row-major flattened view.
  Eigen::Map<const Vector> flat() const { return {values_.data(), values_.size()}; }
  Eigen::Map<Vector> flat() { return {values_.data(), values_.size()}; }

  bool matches(const ModelConfig& config) const;
  // Throws std::invalid_argument when the shape does not fit `config`.
  void check_shape(const ModelConfig& config) const;
  bool all_finite() const { return values_.allFinite(); }

  bool operator==(const SoftPrompt& other) const;

 private:
  InjectionMode mode_ = InjectionMode::shallow;
  int layers_ = 1;
  int length_ = 0;
  int dim_ = 0;
  RowMatrix values_;
};

}  // namespace cptrd
