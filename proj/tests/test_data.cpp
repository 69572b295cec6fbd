#include "cptrd/data.hpp"

#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

using namespace cptrd;

namespace {

std::vector<RumorExample> balanced(int n, const std::string& domain = "d") {
  std::vector<RumorExample> out;
  for (int i = 0; i < n; ++i) out.push_back({"claim " + std::to_string(i), {"c" + std::to_string(i)}, i % 2, domain});
  return out;
}

std::multiset<std::string> claims(const std::vector<RumorExample>& v) {
  std::multiset<std::string> out;
  for (const auto& e : v) out.insert(e.claim);
  return out;
}

// Counts of each cue token in a claim.
std::map<std::string, int> cue_counts(const RumorExample& ex) {
  std::map<std::string, int> out;
  for (const auto& w : split_whitespace(ex.claim))
    if ((w.rfind("rc", 0) == 0 || w.rfind("nc", 0) == 0) && w.size() > 2 && std::isdigit(w[2])) ++out[w];
  return out;
}

}  // namespace

TEST_CASE("parse_jsonl") {
  const auto three = parse_jsonl(
      R"({"claim": "a b", "comments": ["x"], "label": "rumor", "domain": "d1"}
{"claim": "c", "comments": [], "label": "non-rumor", "domain": "d1"}

{"claim": "e", "comments": ["y", "z"], "label": "rumor", "domain": "d2"}
)");
  REQUIRE(three.size() == 3);
  CHECK(three[0].label == Label::rumor);
  CHECK(three[1].label == Label::non_rumor);
  CHECK(three[2].comments == std::vector<std::string>{"y", "z"});
  CHECK(three[2].domain == "d2");

  CHECK(parse_jsonl("").empty());

  try {
    parse_jsonl(R"({"claim": "a", "comments": [], "label": "rumor", "domain": "d"}
{"claim": "b", "comments": [], "domain": "d"})");
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_jsonl(R"({"claim": "b", "comments": [], "label": "maybe", "domain": "d"})"), DataError);
  CHECK_THROWS_AS(parse_jsonl("not json"), DataError);
}

TEST_CASE("load_jsonl reads a file") {
  const auto path = std::filesystem::temp_directory_path() / ("cptrd_test_" + std::to_string(::getpid()) + ".jsonl");
  {
    std::ofstream out(path);
    out << R"({"claim": "a", "comments": [], "label": "rumor", "domain": "d"})" << "\n";
  }
  CHECK(load_jsonl(path.string()).size() == 1);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(load_jsonl(path.string()), DataError);
}

TEST_CASE("preprocess") {
  CHECK(preprocess_text("see http://t.co/abc now") == "see <URL> now");
  CHECK(preprocess_text("see https://x.org") == "see <URL>");
  CHECK(preprocess_text("@alice said so") == "<USER> said so");
  CHECK(preprocess_text("plain words here") == "plain words here");
  CHECK(preprocess_text("  spaced \t  out ") == "spaced out");

  const RumorExample ex{"@bob http://a.b c", {"ok @x"}, 1, "d"};
  const RumorExample once = preprocess(ex);
  CHECK(once.claim == "<USER> <URL> c");
  CHECK(once.comments[0] == "ok <USER>");
  CHECK(preprocess(once) == once);

  Rng rng(3);
  const std::vector<std::string> parts{"@u", "http://x", "https://y/z", "word", "@", "http:", " ", "\t", "tok"};
  std::uniform_int_distribution<std::size_t> pick(0, parts.size() - 1);
  for (int i = 0; i < 500; ++i) {
    std::string s;
    for (int k = 0; k < 8; ++k) s += parts[pick(rng)] + (k % 3 ? " " : "");
    const std::string p = preprocess_text(s);
    CHECK(preprocess_text(p) == p);
  }
}

TEST_CASE("split sizes and determinism") {
  const DomainTask t20 = split("d", balanced(20), 1);
  CHECK(t20.train.size() == 6);
  CHECK(t20.validation.size() == 7);
  CHECK(t20.test.size() == 7);
  const DomainTask t100 = split("d", balanced(100), 1);
  CHECK(t100.train.size() == 30);
  CHECK(t100.validation.size() == 35);
  CHECK(t100.test.size() == 35);

  const DomainTask again = split("d", balanced(100), 1);
  CHECK(again.train == t100.train);
  CHECK(again.test == t100.test);

  CHECK_THROWS_AS(split("d", balanced(9), 1), DataError);
  std::vector<RumorExample> one_class = balanced(20);
  for (auto& e : one_class) e.label = 1;
  CHECK_THROWS_AS(split("d", one_class, 1), DataError);
}

TEST_CASE("splits are disjoint and cover the domain") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto all = balanced(10 + static_cast<int>(seed) * 3);
    const DomainTask t = split("d", all, seed);
    std::multiset<std::string> joined = claims(t.train);
    for (const auto& c : claims(t.validation)) joined.insert(c);
    for (const auto& c : claims(t.test)) joined.insert(c);
    CHECK(joined == claims(all));
    std::set<std::string> unique(joined.begin(), joined.end());
    CHECK(unique.size() == all.size());
  }
}

TEST_CASE("few_shot") {
  const DomainTask t = split("d", balanced(100), 2);
  const auto four = few_shot(t, 4, 9);
  CHECK(four.size() == 8);
  CHECK(std::count_if(four.begin(), four.end(), [](const auto& e) { return e.label == 1; }) == 4);
  CHECK(few_shot(t, 4, 9) == four);
  const auto train = claims(t.train);
  for (const auto& e : four) CHECK(train.count(e.claim) == 1);
  CHECK_THROWS_AS(few_shot(t, 16, 9), DataError);
  CHECK_THROWS_AS(few_shot(t, 0, 9), DataError);
}

TEST_CASE("vocabulary") {
  const Vocabulary v = Vocabulary::build({"b a a c", "a b"}, 9, {"z"});
  CHECK(v.size() == 9);
  CHECK(v.word(token::mask) == token::mask_text);
  CHECK(v.word(6) == "z");
  CHECK(v.word(7) == "a");
  CHECK(v.word(8) == "b");
  CHECK(v.id("c") == token::unk);
  CHECK(v.encode("a z q") == std::vector<TokenId>{7, 6, token::unk});
  CHECK_THROWS_AS(Vocabulary::build({}, 7, {"x", "y"}), DataError);
}

TEST_CASE("group_by_domain keeps first-seen order") {
  auto a = balanced(3, "beta"), b = balanced(2, "alpha");
  std::vector<RumorExample> all{a[0], b[0], a[1], b[1], a[2]};
  const auto groups = group_by_domain(all);
  REQUIRE(groups.size() == 2);
  CHECK(groups[0].first == "beta");
  CHECK(groups[0].second.size() == 3);
  CHECK(groups[1].first == "alpha");
}

TEST_CASE("synthetic stream: consistent rule is linearly separable on cue counts") {
  SynthStreamConfig c;
  c.rule = LabelRule::consistent;
  const SynthStream s = synth_stream(c, 256);
  REQUIRE(s.domains.size() == 5);
  for (std::size_t t = 0; t < s.domains.size(); ++t) {
    const DomainCues cues = synth_domain_cues(c, static_cast<int>(t));
    int correct = 0;
    for (const auto& ex : s.domains[t]) {
      double score = 0;
      for (const auto& [w, n] : cue_counts(ex)) {
        if (std::count(cues.rumor.begin(), cues.rumor.end(), w)) score += n;
        if (std::count(cues.non_rumor.begin(), cues.non_rumor.end(), w)) score -= n;
      }
      correct += (score > 0 ? 1 : 0) == ex.label;
    }
    CHECK(correct == static_cast<int>(s.domains[t].size()));
  }
}

TEST_CASE("synthetic stream: inverted rule defeats any fixed cue probe on consecutive domains") {
  SynthStreamConfig c;
  c.rule = LabelRule::inverted;
  const SynthStream s = synth_stream(c, 256);
  // Every claim draws all its cues from one pool (rc* or nc*), so any probe
  // on cue counts factors through the pool. Enumerate all four pool -> label
  // maps.
  auto pool = [](const RumorExample& ex) {
    const auto counts = cue_counts(ex);
    REQUIRE_FALSE(counts.empty());
    const bool rc = counts.begin()->first[0] == 'r';
    for (const auto& [w, n] : counts) REQUIRE((w[0] == 'r') == rc);
    return rc ? 1 : 0;
  };
  for (std::size_t t = 0; t + 1 < s.domains.size(); ++t) {
    double best = 0;
    for (int map = 0; map < 4; ++map) {
      const int label_for[2] = {map & 1, (map >> 1) & 1};
      double acc = 0;
      for (const std::size_t d : {t, t + 1}) {
        int correct = 0;
        for (const auto& ex : s.domains[d]) correct += label_for[pool(ex)] == ex.label;
        acc += static_cast<double>(correct) / static_cast<double>(s.domains[d].size());
      }
      best = std::max(best, acc / 2);
    }
    CHECK(best <= 0.5);
  }
}

TEST_CASE("synthetic stream: rotated rule shifts the cue window") {
  SynthStreamConfig c;
  c.rule = LabelRule::rotated;
  const DomainCues d0 = synth_domain_cues(c, 0), d1 = synth_domain_cues(c, 1);
  CHECK(d0.rumor.size() == static_cast<std::size_t>(c.cues_per_domain));
  std::vector<std::string> shared;
  for (const auto& w : d1.rumor)
    if (std::count(d0.rumor.begin(), d0.rumor.end(), w)) shared.push_back(w);
  CHECK(shared.size() == static_cast<std::size_t>(c.cues_per_domain - c.rotation_step));
}

TEST_CASE("synthetic stream determinism and limits") {
  SynthStreamConfig c;
  c.rule = LabelRule::inverted;
  const SynthStream a = synth_stream(c, 256), b = synth_stream(c, 256);
  CHECK(a.manifest.dump() == b.manifest.dump());
  CHECK(a.domains == b.domains);
  REQUIRE(a.corpus.size() == b.corpus.size());
  for (std::size_t i = 0; i < a.corpus.size(); ++i) {
    CHECK(a.corpus[i].text == b.corpus[i].text);
    CHECK(a.corpus[i].focus == b.corpus[i].focus);
  }
  c.seed = 2;
  CHECK_FALSE(synth_stream(c, 256).domains == a.domains);

  CHECK_THROWS_AS(synth_stream(c, c.required_vocab() - 1), DataError);
  SynthStreamConfig one = c;
  one.n_tasks = 1;
  CHECK_THROWS_AS(synth_stream(one, 256), DataError);
}

TEST_CASE("synthetic corpus focus marks a label word") {
  SynthStreamConfig c;
  const SynthStream s = synth_stream(c, 256);
  CHECK(static_cast<int>(s.corpus.size()) == c.pretrain_sentences);
  std::set<std::string> label_words;
  for (int y = 0; y < label_count; ++y)
    for (const auto& w : default_verbalizer_words(y)) label_words.insert(w);
  int trailing = 0;
  for (const auto& line : s.corpus) {
    const auto words = split_whitespace(line.text);
    REQUIRE(line.focus >= 0);
    REQUIRE(line.focus < static_cast<int>(words.size()));
    CHECK(label_words.count(words[static_cast<std::size_t>(line.focus)]) == 1);
    trailing += line.focus == 0 && words.back()[0] == '<';
  }
  CHECK(trailing > 0);
}

TEST_CASE("synth config json round trip rejects unknown keys") {
  SynthStreamConfig c;
  c.rule = LabelRule::rotated;
  c.n_tasks = 4;
  const SynthStreamConfig back = synth_config_from_json(to_json(c));
  CHECK(back.rule == LabelRule::rotated);
  CHECK(back.n_tasks == 4);
  nlohmann::json j = to_json(c);
  j["bogus"] = 1;
  CHECK_THROWS_AS(synth_config_from_json(j), DataError);
}
