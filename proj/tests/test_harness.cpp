#include "cptrd/data.hpp"
#include "cptrd/harness.hpp"
#include "fixtures.hpp"

#include <doctest.h>

#include <algorithm>
#include <numeric>

using namespace cptrd;

namespace {

SynthStreamConfig small_stream(LabelRule rule) {
  SynthStreamConfig s;
  s.n_tasks = 3;
  s.words_per_domain = 6;
  s.shared_words = 6;
  s.cue_words = 4;
  s.cues_per_domain = 2;
  s.rotation_step = 1;
  s.claim_length = 4;
  s.cues_per_claim = 1;
  s.comments_per_example = 1;
  s.comment_length = 2;
  s.examples_per_domain = 40;
  s.pretrain_sentences = 0;
  s.rule = rule;
  return s;
}

ModelConfig small_model() {
  ModelConfig c;
  c.vocab_size = 48;
  c.d = 8;
  c.layers = 2;
  c.heads = 2;
  c.prompt_length = 2;
  c.max_seq = 16;
  c.ffn_dim = 12;
  return c;
}

TrainingConfig quick() {
  TrainingConfig t;
  t.prompt_lr = t.baseline_lr = 0.3;
  t.finetune_lr = 0.01;
  t.tphnet_lr = 0.05;
  t.max_epochs = 3;
  t.patience = 1;
  t.few_shot_steps = 4;
  t.k_shots = {4, 2};
  return t;
}

struct Fixture {
  Vocabulary vocab;
  Verbalizer verbalizer;
  Backbone backbone;
  std::vector<EncodedTask> tasks;

  explicit Fixture(LabelRule rule = LabelRule::inverted) {
    const SynthStreamConfig s = small_stream(rule);
    const ModelConfig c = small_model();
    vocab = synth_vocabulary(s, c.vocab_size);
    verbalizer = synth_verbalizer(vocab);
    backbone = fixtures::tiny_backbone(c, 3);
    const SynthStream stream = synth_stream(s, c.vocab_size);
    for (std::size_t t = 0; t < stream.domains.size(); ++t) {
      DomainTask d = split(stream.domain_names[t], stream.domains[t], 7 + t);
      for (const int k : quick().k_shots) d.few_shot[k] = few_shot(d, k, 11 + t);
      tasks.push_back(encode_task(d, vocab));
    }
  }

  RunResult run(const MethodConfig& m, std::uint64_t seed = 1, TrainingConfig t = quick()) const {
    return run_stream(backbone, verbalizer, tasks, m, t, seed);
  }
};

MethodConfig method(Learner learner, InitStrategy init = InitStrategy::random) {
  MethodConfig m;
  m.learner = learner;
  m.init = init;
  m.name = "m";
  return m;
}

}  // namespace

TEST_CASE("method config validation and naming") {
  MethodConfig m = method(Learner::prompt_tuning);
  m.tphnet = true;
  CHECK_THROWS_AS(m.validate(), std::invalid_argument);
  m = method(Learner::finetune, InitStrategy::siminit);
  CHECK_THROWS_AS(m.validate(), std::invalid_argument);
  m = method(Learner::cpt_rd);
  m.mtl = true;
  m.tphnet = true;
  CHECK_THROWS_AS(m.validate(), std::invalid_argument);
  m.tphnet = false;
  CHECK_NOTHROW(m.validate());
  m.name = "../escape";
  CHECK_THROWS_AS(m.validate(), std::invalid_argument);

  CHECK(method(Learner::prompt_tuning).injection() == InjectionMode::shallow);
  CHECK(method(Learner::p_tuning_v2).injection() == InjectionMode::deep);
  CHECK(method(Learner::cpt_rd).injection() == InjectionMode::deep);
  CHECK_FALSE(method(Learner::finetune).injection().has_value());

  const MethodConfig parsed = method_from_json({{"learner", "cpt-rd"}, {"init", "siminit"}, {"tphnet", true}});
  CHECK(parsed.name == "cpt-rd-siminit-tphnet");
  CHECK(parsed.tuning_mode() == TuningMode::deep_prompt_tphnet);
  CHECK(method_from_json({{"learner", "cpt-rd"}, {"init", "siminit"}, {"rehearsal_per_domain", 50}}).name ==
        "cpt-rd-siminit-rehearsal");
  CHECK_THROWS(method_from_json({{"learner", "cpt-rd"}, {"colour", "red"}}));
  CHECK_THROWS(method_from_json({{"learner", "eann"}}));
  const MethodConfig back = method_from_json(to_json(parsed));
  CHECK(back.name == parsed.name);
  CHECK(back.tphnet);
}

TEST_CASE("training config defaults and validation") {
  const TrainingConfig t;
  CHECK(t.prompt_lr == 7e-3);
  CHECK(t.baseline_lr == 5e-3);
  CHECK(t.finetune_lr == 5e-5);
  CHECK(t.tphnet_lr == 1e-4);
  CHECK(t.batch_size == 16);
  CHECK(t.max_epochs == 100);
  CHECK(t.patience == 4);
  CHECK(t.few_shot_steps == 500);
  CHECK(t.k_shots == std::vector<int>{16, 8, 4});
  CHECK(t.beta == 0.01);
  CHECK_FALSE(t.few_shot_on_test);
  CHECK(t.max_grad_norm == 0);

  TrainingConfig bad = t;
  bad.max_grad_norm = -1;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = t;
  bad.batch_size = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = t;
  bad.k_shots = {0};
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = t;
  bad.patience = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  CHECK(training_from_json(to_json(t)).k_shots == t.k_shots);
  CHECK(training_from_json({{"max_grad_norm", 2.5}}).max_grad_norm == 2.5);
  CHECK_THROWS(training_from_json({{"learning_rate", 1}}));
}

TEST_CASE("gradient clipping") {
  CHECK(clip_factor(10, 0) == 1);
  CHECK(clip_factor(0.5, 1) == 1);
  CHECK(clip_factor(4, 1) == doctest::Approx(0.25));
  CHECK(4 * clip_factor(4, 2) == doctest::Approx(2));

  // A cap no gradient reaches leaves training untouched; a tight one changes it.
  const Fixture f;
  TrainingConfig loose = quick(), tight = quick();
  loose.max_grad_norm = 1e12;
  tight.max_grad_norm = 1e-3;
  const RunResult plain = f.run(method(Learner::cpt_rd)), capped = f.run(method(Learner::cpt_rd), 1, loose),
                  small = f.run(method(Learner::cpt_rd), 1, tight);
  CHECK(plain.r == capped.r);
  CHECK(plain.library.find(1)->prompt == capped.library.find(1)->prompt);
  CHECK_FALSE(plain.library.find(1)->prompt == small.library.find(1)->prompt);
  const RunResult ft = f.run(method(Learner::finetune)), ft_capped = f.run(method(Learner::finetune), 1, loose),
                  ft_small = f.run(method(Learner::finetune), 1, tight);
  CHECK(ft.r == ft_capped.r);
  CHECK_FALSE(ft.r == ft_small.r);
}

TEST_CASE("rehearsal buffer sampling") {
  const Fixture f;
  const auto empty = rehearsal_buffer(f.tasks, 0, 5);
  for (const auto& b : empty) CHECK(b.empty());
  const auto all = rehearsal_buffer(f.tasks, 1000, 5);
  for (std::size_t t = 0; t < f.tasks.size(); ++t) CHECK(all[t].size() == f.tasks[t].train.size());

  // Ten-example domain, two samples: seeded shuffle of the indices, keep the
  // first two in their original order.
  EncodedTask ten;
  for (int i = 0; i < 10; ++i) ten.train.push_back({{6 + i}, {}, i % 2});
  const std::vector<EncodedTask> one{ten};
  const auto got = rehearsal_buffer(one, 2, 9);
  std::vector<int> idx(10);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(mix_seed(9, {seed_tag::rehearsal, 1}));
  std::shuffle(idx.begin(), idx.end(), rng);
  std::vector<int> expected(idx.begin(), idx.begin() + 2);
  std::sort(expected.begin(), expected.end());
  REQUIRE(got[0].size() == 2);
  for (int j = 0; j < 2; ++j) CHECK(got[0][static_cast<std::size_t>(j)].claim[0] == 6 + expected[static_cast<std::size_t>(j)]);
  CHECK(rehearsal_buffer(one, 2, 9)[0][0].claim == got[0][0].claim);
}

TEST_CASE("CPT-RD replays stored prompts exactly") {
  const Fixture f;
  for (const InitStrategy init :
       {InitStrategy::random, InitStrategy::clinit, InitStrategy::siminit, InitStrategy::meaninit}) {
    const RunResult r = f.run(method(Learner::cpt_rd, init));
    INFO(to_string(init));
    const int n = r.r.tasks();
    for (int k = 1; k <= n; ++k)
      for (int i = 1; i < k; ++i) CHECK(r.r(k, i) == r.r(i, i));
    CHECK(*bwt(r.r) == 0.0);
    CHECK(r.library.size() == static_cast<std::size_t>(n));
    // Row 0 and the first zero-shot use the same random prompt.
    CHECK(r.stages[0].zero_shot_f1 == r.r(0, 1));
    CHECK_FALSE(r.stages[0].source_task.has_value());
    for (int k = 1; k <= n; ++k) {
      const StageRecord& s = r.stages[static_cast<std::size_t>(k - 1)];
      CHECK(s.zero_shot_f1 == r.r(k - 1, k));
      CHECK(s.full_shot_f1 == r.r(k, k));
      CHECK(s.few_shot_f1.size() == 2);
      CHECK(s.digest_before == s.digest_after);
      CHECK(r.library.find(k)->recorded_f1 == s.full_shot_f1);
    }
    if (init == InitStrategy::clinit || init == InitStrategy::siminit) CHECK(r.stages[1].source_task.has_value());
  }
}

TEST_CASE("random-init zero-shot equals the baseline row") {
  const Fixture f;
  const RunResult r = f.run(method(Learner::cpt_rd));
  CHECK(*fwt(r.r) == 0.0);
}

TEST_CASE("runs are deterministic per seed") {
  const Fixture f;
  MethodConfig m = method(Learner::cpt_rd, InitStrategy::siminit);
  m.tphnet = true;
  const RunResult a = f.run(m, 4), b = f.run(m, 4);
  CHECK(a.r == b.r);
  CHECK(*a.tphnet == *b.tphnet);
  const RunResult c = f.run(m, 5);
  CHECK_FALSE(a.library.find(1)->prompt == c.library.find(1)->prompt);
}

TEST_CASE("TPHNet consolidation never forgets") {
  const Fixture f;
  MethodConfig m = method(Learner::cpt_rd, InitStrategy::siminit);
  m.tphnet = true;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const RunResult r = f.run(m, seed);
    CHECK(*bwt(r.r) >= 0.0);
    for (int k = 1; k <= r.r.tasks(); ++k)
      for (int i = 1; i < k; ++i) CHECK(r.r(k, i) >= r.r(i, i));
    REQUIRE(r.tphnet.has_value());
    CHECK(r.tphnet->all_finite());
    CHECK(r.params_fraction > trainable_fraction(small_model(), TuningMode::deep_prompt));
  }
}

TEST_CASE("baselines evolve one set of parameters") {
  const Fixture f;
  for (const Learner learner : {Learner::finetune, Learner::prompt_tuning, Learner::p_tuning_v2}) {
    MethodConfig m = method(learner);
    if (learner == Learner::finetune) m.head = HeadMode::cls;
    const auto before = f.backbone.digest();
    const RunResult r = f.run(m);
    INFO(to_string(learner));
    CHECK(f.backbone.digest() == before);
    CHECK(r.library.empty());
    CHECK(r.r.has(r.r.tasks(), 1));
    CHECK(bwt(r.r).has_value());
    if (learner == Learner::finetune) {
      CHECK(r.params_fraction == 1.0);
      CHECK(r.stages[0].digest_before != r.stages[0].digest_after);
    } else {
      CHECK(r.stages[0].digest_before == r.stages[0].digest_after);
    }
  }
}

TEST_CASE("rehearsal with zero samples equals the plain run") {
  const Fixture f;
  MethodConfig plain = method(Learner::cpt_rd, InitStrategy::siminit);
  MethodConfig reh = plain;
  reh.rehearsal_per_domain = 0;
  CHECK(f.run(plain).r == f.run(reh).r);
  reh.rehearsal_per_domain = 5;
  const RunResult r = f.run(reh);
  CHECK(*bwt(r.r) == 0.0);
}

TEST_CASE("MTL fills only the final row") {
  const Fixture f;
  MethodConfig m = method(Learner::cpt_rd);
  m.mtl = true;
  StreamRunner runner(f.backbone, f.verbalizer, f.tasks, m, quick(), 1);
  runner.run_pooled();
  const RMatrix& r = runner.rmatrix();
  const int n = r.tasks();
  for (int i = 1; i <= n; ++i) {
    CHECK(r.has(n, i));
    for (int j = 1; j < n; ++j) CHECK_FALSE(r.has(j, i));
  }
  CHECK_NOTHROW(avg_f1(r));
  // Transfer metrics need the diagonal, which pooled training never fills.
  CHECK_THROWS_AS(bwt(r), std::invalid_argument);
  CHECK_THROWS_AS(fwt(r), std::invalid_argument);
}

TEST_CASE("stream preconditions") {
  const Fixture f;
  const std::vector<EncodedTask> one(f.tasks.begin(), f.tasks.begin() + 1);
  CHECK_THROWS_AS(run_stream(f.backbone, f.verbalizer, one, method(Learner::cpt_rd), quick(), 1),
                  std::invalid_argument);
  std::vector<EncodedTask> missing = f.tasks;
  missing[1].few_shot.erase(4);
  CHECK_THROWS_AS(run_stream(f.backbone, f.verbalizer, missing, method(Learner::cpt_rd), quick(), 1),
                  std::invalid_argument);
  missing = f.tasks;
  missing[2].validation.clear();
  CHECK_THROWS_AS(run_stream(f.backbone, f.verbalizer, missing, method(Learner::cpt_rd), quick(), 1),
                  std::invalid_argument);

  StreamRunner runner(f.backbone, f.verbalizer, f.tasks, method(Learner::cpt_rd), quick(), 1);
  CHECK_THROWS(runner.run_task(2));
  runner.run_task(1);
  CHECK(runner.completed() == 1);
}

TEST_CASE("few-shot evaluation on the test split is a switch") {
  const Fixture f;
  TrainingConfig t = quick();
  const RunResult val = f.run(method(Learner::cpt_rd), 1, t);
  t.few_shot_on_test = true;
  const RunResult test = f.run(method(Learner::cpt_rd), 1, t);
  CHECK(val.r == test.r);
  bool differs = false;
  for (std::size_t k = 0; k < val.stages.size(); ++k) differs |= val.stages[k].few_shot_f1 != test.stages[k].few_shot_f1;
  CHECK(differs);
}

TEST_CASE("stage records serialise") {
  const Fixture f;
  const RunResult r = f.run(method(Learner::cpt_rd, InitStrategy::clinit));
  const nlohmann::json j = to_json(r.stages[1]);
  CHECK(j.at("task_id") == 2);
  CHECK(j.at("init") == "clinit");
  CHECK(j.at("source_task") == 1);
  CHECK(j.at("few_shot_f1").contains("4"));
}
