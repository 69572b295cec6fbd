#include "cptrd/model_config.hpp"

#include "cptrd/soft_prompt.hpp"
#include "cptrd/verbalizer.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace cptrd {

std::string_view to_string(InjectionMode mode) { return mode == InjectionMode::deep ? "deep" : "shallow"; }
std::string_view to_string(HeadMode mode) { return mode == HeadMode::cls ? "cls" : "verbalizer"; }

InjectionMode parse_injection_mode(std::string_view text) {
  if (text == "deep") return InjectionMode::deep;
  if (text == "shallow") return InjectionMode::shallow;
  throw std::invalid_argument("unknown injection mode: " + std::string(text));
}

HeadMode parse_head_mode(std::string_view text) {
  if (text == "verbalizer" || text == "ver") return HeadMode::verbalizer;
  if (text == "cls") return HeadMode::cls;
  throw std::invalid_argument("unknown head mode: " + std::string(text));
}

void ModelConfig::validate() const {
  if (vocab_size <= token::reserved_count) throw std::invalid_argument("vocab_size must exceed the reserved ids");
  if (d < 1 || heads < 1 || layers < 1) throw std::invalid_argument("d, heads and layers must be positive");
  if (d % heads != 0) throw std::invalid_argument("d must be divisible by heads");
  if (prompt_length < 1) throw std::invalid_argument("prompt length must be at least 1");
  if (max_seq < prompt_length + 3) throw std::invalid_argument("max_seq must be at least prompt length + 3");
  if (ffn_dim < 0) throw std::invalid_argument("ffn_dim must be non-negative");
}

bool ModelConfig::same_architecture(const ModelConfig& o) const {
  return vocab_size == o.vocab_size && d == o.d && layers == o.layers && heads == o.heads &&
         prompt_length == o.prompt_length && max_seq == o.max_seq && ffn() == o.ffn();
}

SoftPrompt::SoftPrompt(InjectionMode mode, int layers, int length, int dim)
    : mode_(mode), layers_(mode == InjectionMode::deep ? layers : 1), length_(length), dim_(dim),
      values_(RowMatrix::Zero(static_cast<Eigen::Index>(layers_) * length, dim)) {
  if (length < 1 || dim < 1 || layers_ < 1) throw std::invalid_argument("SoftPrompt: non-positive shape");
}

SoftPrompt SoftPrompt::zeros(const ModelConfig& config) {
  return SoftPrompt(config.injection_mode, config.layers, config.prompt_length, config.d);
}

SoftPrompt SoftPrompt::random(const ModelConfig& config, std::uint64_t seed) {
  SoftPrompt p = zeros(config);
  Rng rng(seed);
  const Scalar a = 0.5 / std::sqrt(static_cast<Scalar>(config.d));
  fill_uniform(p.values_, rng, -a, a);
  return p;
}

SoftPrompt SoftPrompt::from_values(const ModelConfig& config, RowMatrix values) {
  SoftPrompt p = zeros(config);
  if (values.rows() != p.values_.rows() || values.cols() != p.values_.cols())
    throw std::invalid_argument("SoftPrompt::from_values: shape mismatch");
  p.values_ = std::move(values);
  return p;
}

bool SoftPrompt::matches(const ModelConfig& config) const {
  return mode_ == config.injection_mode && length_ == config.prompt_length && dim_ == config.d &&
         layers_ == (config.injection_mode == InjectionMode::deep ? config.layers : 1);
}

void SoftPrompt::check_shape(const ModelConfig& config) const {
  if (!matches(config)) throw std::invalid_argument("soft prompt shape does not match the model config");
}

bool SoftPrompt::operator==(const SoftPrompt& o) const {
  return mode_ == o.mode_ && layers_ == o.layers_ && length_ == o.length_ && dim_ == o.dim_ &&
         values_ == o.values_;
}

Verbalizer::Verbalizer(std::vector<TokenId> non_rumor_words, std::vector<TokenId> rumor_words) {
  words_[0] = std::move(non_rumor_words);
  words_[1] = std::move(rumor_words);
  all_ = words_[0];
  all_.insert(all_.end(), words_[1].begin(), words_[1].end());
}

void Verbalizer::validate(int vocab_size) const {
  for (const auto& set : words_)
    if (set.empty()) throw std::invalid_argument("verbalizer: empty label word set");
  for (const TokenId t : all_)
    if (t < 0 || t >= vocab_size) throw std::invalid_argument("verbalizer: word id out of range");
  std::vector<TokenId> sorted = all_;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
    throw std::invalid_argument("verbalizer: label word sets overlap");
}

std::string hex_digest(std::uint64_t value) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[value & 0xf];
    value >>= 4;
  }
  return out;
}

}  // namespace cptrd
