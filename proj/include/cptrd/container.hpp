#pragma once

#include "cptrd/backbone.hpp"
#include "cptrd/model_config.hpp"
#include "cptrd/tensor.hpp"

#include <json.hpp>

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace cptrd {

// Versioned tensor container shared by backbone checkpoints, prompt
// libraries and hypernetwork parameters.
//
//   "CPTRD"  u32 version
//   i32 vocab_size, d, layers, heads, prompt_length, max_seq, ffn_dim
//   u8 injection_mode, u8 head_mode
//   u32 metadata length, metadata JSON (UTF-8)
//   u32 tensor count, then per tensor:
//     u16 name length, name, u8 dtype (0 = f32, 1 = f64), u8 rank,
//     u64 dims[rank], little-endian row-major payload
//
inline constexpr std::string_view kContainerMagic = "CPTRD";
inline constexpr std::uint32_t kContainerVersion = 1;

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

struct NamedTensor {
  std::string name;
  std::vector<std::uint64_t> shape;  // row-major; product == values.size()
  RowMatrix values;                   // leading dims collapsed into rows
  DType dtype = DType::f32;
};

struct Container {
  ModelConfig config;
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<NamedTensor> tensors;

  const NamedTensor& get(const std::string& name) const;  // throws FormatError(0) if absent
};

std::string serialize(const Container& container);
// Throws FormatError with the byte offset of the first problem.
Container deserialize(std::string_view bytes);

void write_container(const std::string& path, const Container& container);
Container read_container(const std::string& path);

// Backbone checkpoints store every weight as f32 plus the digest of the
// loaded weights; loading verifies the digest. Weights must already be
// float32-representable (pretraining rounds them), else std::invalid_argument.
Container backbone_container(const Backbone& backbone);
Backbone backbone_from_container(const Container& container);
void save_backbone(const std::string& path, const Backbone& backbone);
Backbone load_backbone(const std::string& path);

}  // namespace cptrd
