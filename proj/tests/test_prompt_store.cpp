#include "cptrd/container.hpp"
#include "cptrd/prompt_store.hpp"
#include "fixtures.hpp"

#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <thread>

using namespace cptrd;
using fixtures::tiny_config;

namespace {

Vector vec(std::initializer_list<double> v) {
  Vector out(static_cast<Eigen::Index>(v.size()));
  std::copy(v.begin(), v.end(), out.data());
  return out;
}

SoftPrompt filled(const ModelConfig& c, double value) {
  SoftPrompt p = SoftPrompt::zeros(c);
  p.values().setConstant(value);
  return p;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("cptrd_test_" + std::to_string(::getpid()) + "_" + name);
}

}  // namespace

TEST_CASE("store keeps entries by value and in order") {
  const ModelConfig c = tiny_config();
  SourcePromptLibrary lib;
  CHECK(lib.empty());
  SoftPrompt p = SoftPrompt::random(c, 1);
  const SoftPrompt original = p;
  lib.store(1, p, Vector::Zero(c.d), 50);
  CHECK(lib.size() == 1);
  p.values().setConstant(9);
  CHECK(lib.find(1)->prompt == original);

  for (int id = 2; id <= 5; ++id) lib.store(id, SoftPrompt::random(c, id), Vector::Zero(c.d), id);
  std::vector<int> order;
  for (const auto& e : lib.snapshot()) order.push_back(e->task_id);
  CHECK(order == std::vector<int>{1, 2, 3, 4, 5});
  CHECK(lib.back()->task_id == 5);
  CHECK(lib.find(9) == nullptr);

  CHECK_THROWS_AS(lib.store(3, original, Vector::Zero(c.d), 1), std::invalid_argument);
  SoftPrompt bad = original;
  bad.values()(0, 0) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(lib.store(6, bad, Vector::Zero(c.d), 1), std::invalid_argument);
}

TEST_CASE("replace swaps a whole entry without touching old snapshots") {
  const ModelConfig c = tiny_config();
  SourcePromptLibrary lib;
  lib.store(1, filled(c, 1), Vector::Ones(c.d), 60);
  const auto before = lib.find(1);
  lib.replace(1, filled(c, 2), 70);
  CHECK(before->prompt == filled(c, 1));
  CHECK(before->recorded_f1 == 60);
  CHECK(lib.find(1)->prompt == filled(c, 2));
  CHECK(lib.find(1)->recorded_f1 == 70);
  CHECK(lib.find(1)->embedding == Vector::Ones(c.d));
  CHECK_THROWS_AS(lib.replace(2, filled(c, 2), 70), std::invalid_argument);
}

TEST_CASE("concurrent readers during replacement see whole entries") {
  const ModelConfig c = tiny_config();
  SourcePromptLibrary lib;
  lib.store(1, filled(c, 0), Vector::Zero(c.d), 0);
  std::atomic<bool> torn{false};
  std::thread reader([&] {
    for (int i = 0; i < 20000; ++i) {
      const auto e = lib.find(1);
      const double v = e->prompt.values()(0, 0);
      if ((e->prompt.values().array() != v).any() || e->recorded_f1 != v) torn = true;
    }
  });
  for (int v = 1; v <= 2000; ++v) lib.replace(1, filled(c, v), v);
  reader.join();
  CHECK_FALSE(torn.load());
}

TEST_CASE("similarity") {
  SUBCASE("identity") {
    const Similarity s = similarity(vec({1, 2, 3}), vec({1, 2, 3}));
    CHECK(s.euclidean == 1.0);
    CHECK(s.cosine == doctest::Approx(1.0));
    CHECK(s.score == doctest::Approx(1.0));
  }
  SUBCASE("orthogonal unit vectors") {
    const Similarity s = similarity(vec({1, 0}), vec({0, 1}));
    CHECK(s.euclidean == doctest::Approx(1.0 / (1.0 + std::sqrt(2.0))).epsilon(1e-15));
    CHECK(s.euclidean == doctest::Approx(0.41421).epsilon(1e-5));
    CHECK(s.cosine == 0.0);
    CHECK(s.score == doctest::Approx(0.20711).epsilon(1e-5));
  }
  SUBCASE("scaling changes the euclidean term only") {
    const Vector a = vec({1, 2}), b = vec({3, -1});
    const Similarity s1 = similarity(a, b), s2 = similarity(a, Vector(2 * b));
    CHECK(s2.cosine == doctest::Approx(s1.cosine).epsilon(1e-15));
    CHECK(s2.euclidean != s1.euclidean);
  }
  SUBCASE("zero vector has cosine 0") {
    CHECK(similarity(vec({0, 0}), vec({1, 1})).cosine == 0.0);
    CHECK(similarity(vec({1, 1}), vec({0, 0})).cosine == 0.0);
  }
  SUBCASE("dimension mismatch") { CHECK_THROWS_AS(similarity(vec({1}), vec({1, 2})), std::invalid_argument); }
  SUBCASE("score range") {
    Rng rng(3);
    for (int i = 0; i < 1000; ++i) {
      Vector a(5), b(5);
      fill_uniform(a, rng, -10, 10);
      fill_uniform(b, rng, -10, 10);
      const Similarity s = similarity(a, b);
      CHECK(s.euclidean > 0);
      CHECK(s.euclidean <= 1);
      CHECK(s.cosine >= -1);
      CHECK(s.cosine <= 1);
      CHECK(s.score > -0.5);
      CHECK(s.score <= 1);
    }
  }
}

TEST_CASE("clinit") {
  const ModelConfig c = tiny_config();
  SourcePromptLibrary lib;
  const InitResult empty = init_clinit(lib, c, 42);
  CHECK(empty.prompt == SoftPrompt::random(c, 42));
  CHECK_FALSE(empty.source.has_value());

  const SoftPrompt p1 = SoftPrompt::random(c, 1), p2 = SoftPrompt::random(c, 2);
  lib.store(1, p1, Vector::Zero(c.d), 0);
  CHECK(init_clinit(lib, c, 42).prompt == p1);
  lib.store(2, p2, Vector::Zero(c.d), 0);
  const InitResult r = init_clinit(lib, c, 42);
  CHECK(r.prompt == p2);
  CHECK(r.source == 2);
}

TEST_CASE("siminit") {
  ModelConfig c = tiny_config();
  c.d = 2;
  c.heads = 1;
  SourcePromptLibrary lib;
  CHECK(init_siminit(lib, vec({1, 0}), c, 5).prompt == SoftPrompt::random(c, 5));

  lib.store(1, SoftPrompt::random(c, 1), vec({1, 0}), 0);
  lib.store(2, SoftPrompt::random(c, 2), vec({0, 1}), 0);
  // Query (0.9, 0.1): task 1 scores (1/(1+0.1414) + 0.9939)/2, task 2 scores
  // (1/(1+1.2042) + 0.1104)/2.
  const Vector q = vec({0.9, 0.1});
  const double s1 = (1 / (1 + std::sqrt(0.01 + 0.01)) + 0.9 / std::sqrt(0.82)) / 2;
  const double s2 = (1 / (1 + std::sqrt(0.81 + 0.81)) + 0.1 / std::sqrt(0.82)) / 2;
  REQUIRE(s1 > s2);
  CHECK(init_siminit(lib, q, c, 5).source == 1);
  CHECK(init_siminit(lib, vec({0, 1}), c, 5).source == 2);
  CHECK(init_siminit(lib, vec({0, 1}), c, 5).prompt == lib.find(2)->prompt);

  SourcePromptLibrary tied;
  tied.store(4, SoftPrompt::random(c, 4), vec({1, 1}), 0);
  tied.store(3, SoftPrompt::random(c, 3), vec({1, 1}), 0);
  CHECK(init_siminit(tied, vec({0.5, 2}), c, 5).source == 3);
}

TEST_CASE("siminit picks the exhaustive argmax") {
  const ModelConfig c = tiny_config();
  Rng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    SourcePromptLibrary lib;
    for (int id = 1; id <= 6; ++id) {
      Vector z(c.d);
      fill_uniform(z, rng, -1, 1);
      lib.store(id, SoftPrompt::random(c, id), z, 0);
    }
    Vector q(c.d);
    fill_uniform(q, rng, -1, 1);
    int best = 0;
    double best_score = -1e9;
    for (const auto& e : lib.snapshot()) {
      const double s = (1 / (1 + (q - e->embedding).norm()) + q.dot(e->embedding) / (q.norm() * e->embedding.norm())) / 2;
      if (s > best_score) best_score = s, best = e->task_id;
    }
    CHECK(init_siminit(lib, q, c, 0).source == best);
  }
}

TEST_CASE("meaninit") {
  const ModelConfig c = tiny_config();
  SourcePromptLibrary lib;
  CHECK(init_meaninit(lib, c, 7).prompt == SoftPrompt::random(c, 7));

  lib.store(1, filled(c, 1), Vector::Zero(c.d), 0);
  CHECK(init_meaninit(lib, c, 7).prompt == filled(c, 1));
  lib.store(2, filled(c, 3), Vector::Zero(c.d), 0);
  CHECK(init_meaninit(lib, c, 7).prompt == filled(c, 2));

  SourcePromptLibrary three, reversed;
  std::vector<SoftPrompt> ps;
  for (int i = 0; i < 3; ++i) ps.push_back(SoftPrompt::random(c, 100 + i));
  for (int i = 0; i < 3; ++i) three.store(i + 1, ps[static_cast<std::size_t>(i)], Vector::Zero(c.d), 0);
  for (int i = 2; i >= 0; --i) reversed.store(i + 1, ps[static_cast<std::size_t>(i)], Vector::Zero(c.d), 0);
  RowMatrix acc = RowMatrix::Zero(ps[0].values().rows(), ps[0].values().cols());
  for (Eigen::Index r = 0; r < acc.rows(); ++r)
    for (Eigen::Index col = 0; col < acc.cols(); ++col) {
      double s = 0;
      for (const auto& p : ps) s += p.values()(r, col);
      acc(r, col) = s / 3;
    }
  const SoftPrompt mean = init_meaninit(three, c, 0).prompt;
  CHECK((mean.values() - acc).cwiseAbs().maxCoeff() < 1e-15);
  // Storage order does not matter.
  CHECK((init_meaninit(reversed, c, 0).prompt.values() - mean.values()).cwiseAbs().maxCoeff() < 1e-15);

  SourcePromptLibrary mixed;
  mixed.store(1, SoftPrompt::random(c, 1), Vector::Zero(c.d), 0);
  mixed.store(2, SoftPrompt::random(tiny_config(InjectionMode::shallow), 2), Vector::Zero(c.d), 0);
  CHECK_THROWS_AS(init_meaninit(mixed, c, 0), std::invalid_argument);
}

TEST_CASE("library persistence") {
  const ModelConfig c = tiny_config();
  SourcePromptLibrary lib;
  Rng rng(9);
  for (int id = 1; id <= 3; ++id) {
    Vector z(c.d);
    fill_uniform(z, rng, -1, 1);
    lib.store(id, SoftPrompt::random(c, id), z, 33.3 * id);
  }
  const auto path = temp_path("library.cptrd");
  save_library(lib, c, path.string());
  const SourcePromptLibrary back = load_library(path.string(), c);
  REQUIRE(back.size() == lib.size());
  for (int id = 1; id <= 3; ++id) {
    CHECK(back.find(id)->prompt == lib.find(id)->prompt);
    CHECK(back.find(id)->embedding == lib.find(id)->embedding);
    CHECK(back.find(id)->recorded_f1 == lib.find(id)->recorded_f1);
  }

  ModelConfig other = c;
  other.prompt_length += 1;
  CHECK_THROWS_AS(load_library(path.string(), other), FormatError);

  std::string bytes;
  {
    std::ifstream in(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
  }
  CHECK_THROWS_AS(load_library(path.string(), c), FormatError);
  std::filesystem::remove(path);
}
