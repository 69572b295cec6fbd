#pragma once

#include "cptrd/tensor.hpp"

#include <array>
#include <vector>

namespace cptrd {

enum Label : int { non_rumor = 0, rumor = 1 };
inline constexpr int label_count = 2;

// Maps each label to a non-empty, disjoint set of vocabulary ids.
class Verbalizer {
 public:
  Verbalizer() = default;
  Verbalizer(std::vector<TokenId> non_rumor_words, std::vector<TokenId> rumor_words);

  const std::vector<TokenId>& words(int label) const { return words_[static_cast<std::size_t>(label)]; }
  // Union of both word sets, non-rumor words first.
  const std::vector<TokenId>& all_words() const { return all_; }

  // Throws std::invalid_argument on empty/overlapping sets or out-of-range ids.
  void validate(int vocab_size) const;

 private:
  std::array<std::vector<TokenId>, label_count> words_;
  std::vector<TokenId> all_;
};

// Probability per label; entries are non-negative and sum to one.
struct LabelDistribution {
  std::array<Scalar, label_count> p{0.5, 0.5};

  Scalar operator[](int label) const { return p[static_cast<std::size_t>(label)]; }
  int argmax() const { return p[1] > p[0] ? 1 : 0; }
};

}  // namespace cptrd
