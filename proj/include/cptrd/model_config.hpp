#pragma once

#include "cptrd/tensor.hpp"

#include <string>
#include <string_view>

namespace cptrd {

enum class InjectionMode { shallow, deep };
enum class HeadMode { verbalizer, cls };

std::string_view to_string(InjectionMode mode);
std::string_view to_string(HeadMode mode);
InjectionMode parse_injection_mode(std::string_view text);
HeadMode parse_head_mode(std::string_view text);

// Reserved vocabulary ids. Every vocabulary starts with these six entries.
namespace token {
inline constexpr TokenId pad = 0;
inline constexpr TokenId mask = 1;
inline constexpr TokenId sep = 2;
inline constexpr TokenId url = 3;
inline constexpr TokenId user = 4;
inline constexpr TokenId unk = 5;
inline constexpr TokenId reserved_count = 6;

inline constexpr std::string_view pad_text = "[PAD]";
inline constexpr std::string_view mask_text = "[MASK]";
inline constexpr std::string_view sep_text = "[SEP]";
inline constexpr std::string_view url_text = "<URL>";
inline constexpr std::string_view user_text = "<USER>";
inline constexpr std::string_view unk_text = "[UNK]";
}  // namespace token

struct ModelConfig {
  int vocab_size = 512;
  int d = 64;
  int layers = 4;
  int heads = 4;
  int prompt_length = 8;
  int max_seq = 48;
  int ffn_dim = 0;  // 0 means 4 * d
  InjectionMode injection_mode = InjectionMode::deep;
  HeadMode head_mode = HeadMode::verbalizer;

  int ffn() const { return ffn_dim > 0 ? ffn_dim : 4 * d; }
  int head_dim() const { return d / heads; }
  // Number of prompt rows: l for shallow prompts, L * l for deep prompts.
  int prompt_rows() const {
    return injection_mode == InjectionMode::deep ? layers * prompt_length : prompt_length;
  }

  // Throws std::invalid_argument naming the first violated invariant.
  void validate() const;

  bool same_architecture(const ModelConfig& other) const;
};

}  // namespace cptrd
