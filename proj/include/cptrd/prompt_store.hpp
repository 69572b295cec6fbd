#pragma once

#include "cptrd/model_config.hpp"
#include "cptrd/soft_prompt.hpp"
#include "cptrd/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

namespace cptrd {

struct SplEntry {
  int task_id = 0;
  SoftPrompt prompt;
  Vector embedding;
  double recorded_f1 = 0;  // test F1 measured right after full-shot training
};

// Source prompt library: insertion-ordered, append-only between tasks.
// Entries are immutable snapshots; replace() swaps a whole entry, so readers
// holding an older snapshot are never affected.
class SourcePromptLibrary {
 public:
  using EntryPtr = std::shared_ptr<const SplEntry>;

  SourcePromptLibrary() = default;
  SourcePromptLibrary(const SourcePromptLibrary& other);
  SourcePromptLibrary& operator=(const SourcePromptLibrary& other);

  // Stores by value. Throws std::invalid_argument on a duplicate task id.
  void store(int task_id, const SoftPrompt& prompt, const Vector& embedding, double recorded_f1);
  // Replaces the prompt and recorded F1 of an existing entry atomically.
  void replace(int task_id, const SoftPrompt& prompt, double recorded_f1);

  std::vector<EntryPtr> snapshot() const;
  EntryPtr find(int task_id) const;  // null if absent
  EntryPtr back() const;             // null if empty
  std::size_t size() const;
  bool empty() const { return size() == 0; }

 private:
  mutable std::shared_mutex mutex_;
  std::vector<EntryPtr> entries_;
};

struct Similarity {
  Scalar euclidean = 0;  // 1 / (1 + ||a - b||)
  Scalar cosine = 0;     // 0 when either vector is zero
  Scalar score = 0;      // (euclidean + cosine) / 2
};

template <typename A, typename B>
Similarity similarity(const Eigen::MatrixBase<A>& a, const Eigen::MatrixBase<B>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("similarity: dimension mismatch");
  Similarity s;
  s.euclidean = Scalar(1) / (Scalar(1) + (a - b).norm());
  const Scalar na = a.norm(), nb = b.norm();
  s.cosine = (na == 0 || nb == 0) ? Scalar(0) : std::clamp(a.dot(b) / (na * nb), Scalar(-1), Scalar(1));
  s.score = (s.euclidean + s.cosine) / 2;
  return s;
}

struct InitResult {
  SoftPrompt prompt;
  std::optional<int> source;  // task id the prompt came from, if any
};

// Each initializer falls back to SoftPrompt::random(config, seed) when the
// library is empty.
InitResult init_clinit(const SourcePromptLibrary& library, const ModelConfig& config, std::uint64_t seed);
InitResult init_siminit(const SourcePromptLibrary& library, const Eigen::Ref<const Vector>& query,
                        const ModelConfig& config, std::uint64_t seed);
// Throws std::invalid_argument when stored prompts mix injection modes.
InitResult init_meaninit(const SourcePromptLibrary& library, const ModelConfig& config, std::uint64_t seed);

// Container round trip: tensors "<id>/prompt" and "<id>/embedding" in f64,
// metadata {"kind":"spl","entries":[{task_id, recorded_f1}, ...]}.
void save_library(const SourcePromptLibrary& library, const ModelConfig& config, const std::string& path);
// Throws FormatError on corruption or when the file's config differs from
// `config`.
SourcePromptLibrary load_library(const std::string& path, const ModelConfig& config);

}  // namespace cptrd
