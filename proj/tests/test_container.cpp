#include "cptrd/container.hpp"
#include "fixtures.hpp"

#include <doctest.h>

#include <cstring>
#include <filesystem>

using namespace cptrd;

namespace {

Container sample() {
  Container c;
  c.config = fixtures::tiny_config();
  c.metadata = {{"kind", "test"}, {"note", "ünïcode"}};
  NamedTensor a{"a", {2, 3}, RowMatrix(2, 3), DType::f64};
  a.values << 1, 2, 3, 4, 5, 1.0 / 3.0;
  NamedTensor b{"deep/prompt", {2, 2, 2}, RowMatrix(4, 2), DType::f32};
  b.values << 0.5, -1, 2, 0.25, 8, 16, -0.125, 3;
  c.tensors = {a, b};
  return c;
}

// Byte offset of the first tensor's dtype field.
std::size_t first_dtype_offset(const std::string& bytes) {
  std::uint32_t meta_len;
  const std::size_t meta_len_pos = 5 + 4 + 7 * 4 + 2;
  std::memcpy(&meta_len, bytes.data() + meta_len_pos, 4);
  return meta_len_pos + 4 + meta_len + 4 + 2 + 1;  // + count, name length, name "a"
}

}  // namespace

TEST_CASE("round trip is exact") {
  const Container c = sample();
  const std::string bytes = serialize(c);
  CHECK(bytes.substr(0, 5) == "CPTRD");
  const Container back = deserialize(bytes);
  CHECK(back.config.same_architecture(c.config));
  CHECK(back.config.injection_mode == c.config.injection_mode);
  CHECK(back.metadata == c.metadata);
  REQUIRE(back.tensors.size() == 2);
  CHECK(back.get("a").values == c.tensors[0].values);
  CHECK(back.get("a").shape == c.tensors[0].shape);
  CHECK(back.get("deep/prompt").values == c.tensors[1].values);
  CHECK(back.get("deep/prompt").dtype == DType::f32);
  CHECK(serialize(back) == bytes);
  CHECK_THROWS_AS(back.get("missing"), FormatError);
}

TEST_CASE("corruption is reported with its position") {
  const std::string good = serialize(sample());

  std::string bad = good;
  bad[0] = 'X';
  try {
    deserialize(bad);
    FAIL("bad magic accepted");
  } catch (const FormatError& e) {
    CHECK(e.position() == 0);
  }

  bad = good;
  bad[5] = 9;
  try {
    deserialize(bad);
    FAIL("bad version accepted");
  } catch (const FormatError& e) {
    CHECK(e.position() == 5);
  }

  for (std::size_t cut : {std::size_t{3}, std::size_t{20}, good.size() / 2, good.size() - 1}) {
    try {
      deserialize(std::string_view(good).substr(0, cut));
      FAIL("truncated container accepted");
    } catch (const FormatError& e) {
      CHECK(e.position() <= cut);
    }
  }

  CHECK_THROWS_AS(deserialize(good + "x"), FormatError);

  bad = good;
  const std::size_t dtype_pos = first_dtype_offset(good);
  REQUIRE(static_cast<std::uint8_t>(good[dtype_pos]) == 1);
  bad[dtype_pos] = 7;
  try {
    deserialize(bad);
    FAIL("bad dtype accepted");
  } catch (const FormatError& e) {
    CHECK(e.position() == dtype_pos);
  }
}

TEST_CASE("backbone checkpoints") {
  const ModelConfig c = fixtures::tiny_config();
  BackboneWeights w = Backbone::initialize(c, 4).weights();
  w.for_each([](const std::string&, Matrix& m) { round_to_float(m); });
  const Backbone b(c, w);

  const auto path = std::filesystem::temp_directory_path() / ("cptrd_test_bb_" + std::to_string(::getpid()));
  save_backbone(path.string(), b);
  const Backbone back = load_backbone(path.string());
  CHECK(back.digest() == b.digest());
  CHECK_FALSE(back.thawed());
  std::filesystem::remove(path);

  Container tampered = backbone_container(b);
  tampered.tensors[0].values(0, 0) += 1;
  CHECK_THROWS_AS(backbone_from_container(tampered), FormatError);

  Container other = backbone_container(b);
  other.metadata["kind"] = "spl";
  CHECK_THROWS_AS(backbone_from_container(other), FormatError);

  Container header = backbone_container(b);
  header.config.d = 16;
  header.config.heads = 2;
  CHECK_THROWS_AS(backbone_from_container(deserialize(serialize(header))), FormatError);

  // Weights that are not float32-representable would not round-trip.
  CHECK_THROWS_AS(backbone_container(fixtures::tiny_backbone(c, 5)), std::invalid_argument);
}
