#include "cptrd/data.hpp"

#include "cptrd/model_config.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <sstream>

namespace cptrd {

std::string_view label_name(int label) { return label == Label::rumor ? "rumor" : "non-rumor"; }

int parse_label(std::string_view text) {
  if (text == "rumor") return Label::rumor;
  if (text == "non-rumor") return Label::non_rumor;
  throw DataError("unknown label: " + std::string(text));
}

// ---------------------------------------------------------------------------
// Vocabulary

Vocabulary::Vocabulary()
    : Vocabulary(std::vector<std::string>{std::string(token::pad_text), std::string(token::mask_text),
                                          std::string(token::sep_text), std::string(token::url_text),
                                          std::string(token::user_text), std::string(token::unk_text)}) {}

Vocabulary::Vocabulary(std::vector<std::string> words) : words_(std::move(words)) {
  if (words_.size() < static_cast<std::size_t>(token::reserved_count) || words_[token::mask] != token::mask_text ||
      words_[token::sep] != token::sep_text || words_[token::url] != token::url_text ||
      words_[token::user] != token::user_text)
    throw DataError("vocabulary must start with the reserved symbols");
  for (std::size_t i = 0; i < words_.size(); ++i) {
    if (!index_.emplace(words_[i], static_cast<TokenId>(i)).second)
      throw DataError("duplicate vocabulary word: " + words_[i]);
  }
}

Vocabulary Vocabulary::build(const std::vector<std::string>& texts, int size,
                             const std::vector<std::string>& required) {
  Vocabulary base;
  std::vector<std::string> words = base.words_;
  auto add = [&](const std::string& w) {
    if (std::find(words.begin(), words.end(), w) == words.end()) words.push_back(w);
  };
  for (const auto& w : required) add(w);
  std::unordered_map<std::string, long> counts;
  for (const auto& text : texts)
    for (auto& w : split_whitespace(text)) ++counts[w];
  std::vector<std::pair<std::string, long>> ranked(counts.begin(), counts.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  for (const auto& [w, c] : ranked) {
    if (static_cast<int>(words.size()) >= size) break;
    add(w);
  }
  if (static_cast<int>(words.size()) > size) throw DataError("vocabulary size too small for the required words");
  return Vocabulary(std::move(words));
}

TokenId Vocabulary::id(std::string_view word) const {
  const auto it = index_.find(std::string(word));
  return it == index_.end() ? token::unk : it->second;
}

bool Vocabulary::contains(std::string_view word) const { return index_.count(std::string(word)) > 0; }

std::vector<TokenId> Vocabulary::encode(std::string_view text) const {
  std::vector<TokenId> out;
  for (const auto& w : split_whitespace(text)) out.push_back(id(w));
  return out;
}

std::vector<std::string> split_whitespace(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream is{std::string(text)};
  std::string w;
  while (is >> w) out.push_back(std::move(w));
  return out;
}

// ---------------------------------------------------------------------------
// JSONL ingestion and preprocessing

std::vector<RumorExample> parse_jsonl(std::string_view content) {
  std::vector<RumorExample> out;
  std::vector<std::string> errors;
  std::istringstream in{std::string(content)};
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      for (const char* field : {"claim", "comments", "label", "domain"})
        if (!j.contains(field)) throw DataError(std::string("missing field '") + field + "'");
      RumorExample ex;
      ex.claim = j.at("claim").get<std::string>();
      if (split_whitespace(ex.claim).empty()) throw DataError("empty claim");
      ex.comments = j.at("comments").get<std::vector<std::string>>();
      ex.label = parse_label(j.at("label").get<std::string>());
      ex.domain = j.at("domain").get<std::string>();
      out.push_back(std::move(ex));
    } catch (const std::exception& e) {
      errors.push_back("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (!errors.empty()) {
    std::string msg = "malformed JSONL input";
    for (const auto& e : errors) msg += "\n  " + e;
    throw DataError(msg);
  }
  return out;
}

std::vector<RumorExample> load_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_jsonl(buf.str());
}

std::string preprocess_text(std::string_view text) {
  std::string out;
  for (const auto& w : split_whitespace(text)) {
    if (!out.empty()) out += ' ';
    if (w.rfind("http://", 0) == 0 || w.rfind("https://", 0) == 0)
      out += token::url_text;
    else if (w.rfind('@', 0) == 0)
      out += token::user_text;
    else
      out += w;
  }
  return out;
}

RumorExample preprocess(const RumorExample& example) {
  RumorExample out = example;
  out.claim = preprocess_text(example.claim);
  for (auto& c : out.comments) c = preprocess_text(c);
  return out;
}

// ---------------------------------------------------------------------------
// Splits and few-shot sampling

DomainTask split(const std::string& name, std::vector<RumorExample> examples, std::uint64_t seed) {
  const std::size_t n = examples.size();
  if (n < 10) throw DataError("domain " + name + " has fewer than 10 examples");
  Rng rng(seed);
  std::shuffle(examples.begin(), examples.end(), rng);
  const std::size_t train_end = n * 30 / 100;
  const std::size_t val_end = n * 65 / 100;
  DomainTask task;
  task.name = name;
  task.train.assign(examples.begin(), examples.begin() + static_cast<std::ptrdiff_t>(train_end));
  task.validation.assign(examples.begin() + static_cast<std::ptrdiff_t>(train_end),
                         examples.begin() + static_cast<std::ptrdiff_t>(val_end));
  task.test.assign(examples.begin() + static_cast<std::ptrdiff_t>(val_end), examples.end());
  auto check = [&](const std::vector<RumorExample>& part, const char* part_name) {
    for (int y = 0; y < label_count; ++y) {
      const bool present = std::any_of(part.begin(), part.end(), [y](const auto& e) { return e.label == y; });
      if (!present)
        throw DataError("domain " + name + ": " + part_name + " split has no " + std::string(label_name(y)) +
                        " examples");
    }
  };
  check(task.train, "train");
  check(task.validation, "validation");
  check(task.test, "test");
  return task;
}

std::vector<RumorExample> few_shot(const DomainTask& task, int k, std::uint64_t seed) {
  if (k < 1) throw DataError("few_shot: k must be positive");
  Rng rng(seed);
  std::vector<RumorExample> out;
  for (int y = 0; y < label_count; ++y) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < task.train.size(); ++i)
      if (task.train[i].label == y) idx.push_back(i);
    if (idx.size() < static_cast<std::size_t>(k))
      throw DataError("few_shot: domain " + task.name + " has only " + std::to_string(idx.size()) + " " +
                      std::string(label_name(y)) + " training examples, need " + std::to_string(k));
    std::shuffle(idx.begin(), idx.end(), rng);
    for (int i = 0; i < k; ++i) out.push_back(task.train[idx[static_cast<std::size_t>(i)]]);
  }
  std::shuffle(out.begin(), out.end(), rng);
  return out;
}

std::vector<std::pair<std::string, std::vector<RumorExample>>> group_by_domain(const std::vector<RumorExample>& all) {
  std::vector<std::pair<std::string, std::vector<RumorExample>>> out;
  for (const auto& ex : all) {
    auto it = std::find_if(out.begin(), out.end(), [&](const auto& g) { return g.first == ex.domain; });
    if (it == out.end()) {
      out.emplace_back(ex.domain, std::vector<RumorExample>{});
      it = std::prev(out.end());
    }
    it->second.push_back(ex);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic streams

std::string_view to_string(LabelRule rule) {
  switch (rule) {
    case LabelRule::consistent: return "consistent";
    case LabelRule::inverted: return "inverted";
    case LabelRule::rotated: return "rotated";
  }
  return "consistent";
}

LabelRule parse_label_rule(std::string_view text) {
  if (text == "consistent") return LabelRule::consistent;
  if (text == "inverted") return LabelRule::inverted;
  if (text == "rotated") return LabelRule::rotated;
  throw DataError("unknown label rule: " + std::string(text));
}

namespace {

constexpr const char* kFrameSame = "<same>";
constexpr const char* kFrameFlip = "<flip>";

std::string cue_word(int label, int i) { return (label == Label::rumor ? "rc" : "nc") + std::to_string(i); }
std::string shared_word(int i) { return "s" + std::to_string(i); }
std::string domain_word(int t, int i) { return "d" + std::to_string(t) + "_" + std::to_string(i); }

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), 0x5eedu};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

template <typename T>
const T& pick(const std::vector<T>& v, Rng& rng) {
  std::uniform_int_distribution<std::size_t> dist(0, v.size() - 1);
  return v[dist(rng)];
}

std::string filler(const SynthStreamConfig& c, int domain, Rng& rng) {
  std::bernoulli_distribution shared(c.shared_fraction);
  if (shared(rng)) return shared_word(std::uniform_int_distribution<int>(0, c.shared_words - 1)(rng));
  return domain_word(domain, std::uniform_int_distribution<int>(0, c.words_per_domain - 1)(rng));
}

std::string join(const std::vector<std::string>& words) {
  std::string out;
  for (const auto& w : words) {
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

std::vector<std::string> make_claim(const SynthStreamConfig& c, int domain, const std::vector<std::string>& cues,
                                    Rng& rng) {
  std::vector<std::string> words;
  for (int i = 0; i < c.cues_per_claim; ++i) words.push_back(pick(cues, rng));
  while (static_cast<int>(words.size()) < c.claim_length) words.push_back(filler(c, domain, rng));
  std::shuffle(words.begin(), words.end(), rng);
  return words;
}

std::vector<std::string> make_comment(const SynthStreamConfig& c, int domain, Rng& rng) {
  std::vector<std::string> words;
  for (int i = 0; i < c.comment_length; ++i) words.push_back(filler(c, domain, rng));
  return words;
}

bool polarity_flipped(const SynthStreamConfig& c, int domain) {
  return c.rule == LabelRule::inverted && domain % 2 == 1;
}

}  // namespace

void SynthStreamConfig::validate() const {
  if (n_tasks < 2) throw DataError("synthetic stream needs at least 2 tasks");
  if (words_per_domain < 1 || shared_words < 1 || cue_words < 1) throw DataError("vocabulary partitions must be non-empty");
  if (shared_fraction < 0.0 || shared_fraction > 1.0) throw DataError("shared_fraction must lie in [0, 1]");
  if (cues_per_domain < 1 || cues_per_domain > cue_words) throw DataError("cues_per_domain must lie in [1, cue_words]");
  if (rotation_step < 0) throw DataError("rotation_step must be non-negative");
  if (examples_per_domain < 10) throw DataError("examples_per_domain must be at least 10");
  if (cues_per_claim < 1 || claim_length < cues_per_claim) throw DataError("claim must hold its cue tokens");
  if (comment_length < 0 || comments_per_example < 0) throw DataError("comment sizes must be non-negative");
  if (pretrain_sentences < 0 || max_frame < 0) throw DataError("corpus sizes must be non-negative");
}

int SynthStreamConfig::required_vocab() const {
  return token::reserved_count + 4 /* label words */ + 2 /* frames */ + 2 * cue_words + shared_words +
         n_tasks * words_per_domain;
}

std::vector<std::string> default_verbalizer_words(int label) {
  if (label == Label::rumor) return {"false", "fake"};
  return {"true", "real"};
}

Vocabulary synth_vocabulary(const SynthStreamConfig& c, int vocab_size) {
  c.validate();
  if (c.required_vocab() > vocab_size)
    throw DataError("synthetic layout needs " + std::to_string(c.required_vocab()) + " words but vocab_size is " +
                    std::to_string(vocab_size));
  Vocabulary base;
  std::vector<std::string> words = base.words();
  for (int y = 0; y < label_count; ++y)
    for (auto& w : default_verbalizer_words(y)) words.push_back(w);
  words.emplace_back(kFrameSame);
  words.emplace_back(kFrameFlip);
  for (int y = 0; y < label_count; ++y)
    for (int i = 0; i < c.cue_words; ++i) words.push_back(cue_word(y, i));
  for (int i = 0; i < c.shared_words; ++i) words.push_back(shared_word(i));
  for (int t = 0; t < c.n_tasks; ++t)
    for (int i = 0; i < c.words_per_domain; ++i) words.push_back(domain_word(t, i));
  for (int i = 0; static_cast<int>(words.size()) < vocab_size; ++i) words.push_back("<unused" + std::to_string(i) + ">");
  return Vocabulary(std::move(words));
}

Verbalizer synth_verbalizer(const Vocabulary& vocab) {
  std::array<std::vector<TokenId>, label_count> ids;
  for (int y = 0; y < label_count; ++y)
    for (auto& w : default_verbalizer_words(y)) {
      if (!vocab.contains(w)) throw DataError("verbalizer word missing from vocabulary: " + w);
      ids[static_cast<std::size_t>(y)].push_back(vocab.id(w));
    }
  return Verbalizer(ids[0], ids[1]);
}

DomainCues synth_domain_cues(const SynthStreamConfig& c, int index) {
  DomainCues cues;
  std::array<std::vector<std::string>, label_count> by_class;
  for (int y = 0; y < label_count; ++y) {
    if (c.rule == LabelRule::rotated) {
      for (int j = 0; j < c.cues_per_domain; ++j) by_class[static_cast<std::size_t>(y)].push_back(
          cue_word(y, (index * c.rotation_step + j) % c.cue_words));
    } else {
      for (int j = 0; j < c.cue_words; ++j) by_class[static_cast<std::size_t>(y)].push_back(cue_word(y, j));
    }
  }
  const bool flip = polarity_flipped(c, index);
  cues.rumor = by_class[flip ? 0 : 1];
  cues.non_rumor = by_class[flip ? 1 : 0];
  return cues;
}

nlohmann::json to_json(const SynthStreamConfig& c) {
  return {{"n_tasks", c.n_tasks},
          {"words_per_domain", c.words_per_domain},
          {"shared_words", c.shared_words},
          {"shared_fraction", c.shared_fraction},
          {"cue_words", c.cue_words},
          {"cues_per_domain", c.cues_per_domain},
          {"rotation_step", c.rotation_step},
          {"rule", std::string(to_string(c.rule))},
          {"examples_per_domain", c.examples_per_domain},
          {"claim_length", c.claim_length},
          {"cues_per_claim", c.cues_per_claim},
          {"comments_per_example", c.comments_per_example},
          {"comment_length", c.comment_length},
          {"pretrain_sentences", c.pretrain_sentences},
          {"max_frame", c.max_frame},
          {"seed", c.seed}};
}

SynthStreamConfig synth_config_from_json(const nlohmann::json& j) {
  SynthStreamConfig c;
  static const std::vector<std::string> known = {
      "n_tasks",      "words_per_domain", "shared_words",         "shared_fraction", "cue_words",
      "cues_per_domain", "rotation_step", "rule",                 "examples_per_domain", "claim_length",
      "cues_per_claim", "comments_per_example", "comment_length", "pretrain_sentences", "max_frame",
      "seed"};
  for (const auto& [key, value] : j.items())
    if (std::find(known.begin(), known.end(), key) == known.end()) throw DataError("unknown synth key: " + key);
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("n_tasks", c.n_tasks);
  get("words_per_domain", c.words_per_domain);
  get("shared_words", c.shared_words);
  get("shared_fraction", c.shared_fraction);
  get("cue_words", c.cue_words);
  get("cues_per_domain", c.cues_per_domain);
  get("rotation_step", c.rotation_step);
  if (j.contains("rule")) c.rule = parse_label_rule(j.at("rule").get<std::string>());
  get("examples_per_domain", c.examples_per_domain);
  get("claim_length", c.claim_length);
  get("cues_per_claim", c.cues_per_claim);
  get("comments_per_example", c.comments_per_example);
  get("comment_length", c.comment_length);
  get("pretrain_sentences", c.pretrain_sentences);
  get("max_frame", c.max_frame);
  get("seed", c.seed);
  c.validate();
  return c;
}

SynthStream synth_stream(const SynthStreamConfig& c, int vocab_size) {
  const Vocabulary vocab = synth_vocabulary(c, vocab_size);
  (void)vocab;
  SynthStream out;
  out.manifest = to_json(c);
  out.manifest["vocab_size"] = vocab_size;
  nlohmann::json domains = nlohmann::json::array();

  for (int t = 0; t < c.n_tasks; ++t) {
    const std::string name = "domain" + std::to_string(t + 1);
    const DomainCues cues = synth_domain_cues(c, t);
    Rng rng(derive_seed(c.seed, static_cast<std::uint64_t>(t) + 1));
    std::vector<RumorExample> examples;
    for (int i = 0; i < c.examples_per_domain; ++i) {
      RumorExample ex;
      ex.label = i % 2;
      ex.domain = name;
      ex.claim = join(make_claim(c, t, ex.label == Label::rumor ? cues.rumor : cues.non_rumor, rng));
      for (int k = 0; k < c.comments_per_example; ++k) ex.comments.push_back(join(make_comment(c, t, rng)));
      examples.push_back(std::move(ex));
    }
    out.domain_names.push_back(name);
    out.domains.push_back(std::move(examples));
    domains.push_back({{"name", name},
                       {"domain_words", {domain_word(t, 0), domain_word(t, c.words_per_domain - 1)}},
                       {"rumor_cues", cues.rumor},
                       {"non_rumor_cues", cues.non_rumor},
                       {"polarity_flipped", polarity_flipped(c, t)},
                       {"examples", c.examples_per_domain}});
  }
  out.manifest["domains"] = domains;

  // Pretraining corpus: label word, claim, [SEP], comments, with a run of r
  // frame tokens either in front of the label word or at the very end. A
  // <same> frame makes the label word agree with the cue class, <flip>
  // inverts it, and no frame leaves it random. Trailing frames teach the
  // backbone to read a frame wherever it sits, which is what a prefix-only
  // prompt has to emulate.
  Rng rng(derive_seed(c.seed, 0));
  std::vector<std::string> all_cues[label_count];
  for (int y = 0; y < label_count; ++y)
    for (int i = 0; i < c.cue_words; ++i) all_cues[y].push_back(cue_word(y, i));
  std::uniform_int_distribution<int> domain_dist(0, c.n_tasks - 1);
  std::uniform_int_distribution<int> frame_len(0, c.max_frame);
  std::bernoulli_distribution coin(0.5);
  for (int s = 0; s < c.pretrain_sentences; ++s) {
    const int t = domain_dist(rng);
    const int cue_class = coin(rng) ? 1 : 0;
    const int r = frame_len(rng);
    int word_class = coin(rng) ? 1 : 0;
    bool flip = false, trailing = false;
    if (r > 0) {
      flip = coin(rng);
      trailing = coin(rng);
      word_class = flip ? 1 - cue_class : cue_class;
    }
    const std::string_view frame = flip ? kFrameFlip : kFrameSame;
    std::vector<std::string> words;
    if (!trailing)
      for (int i = 0; i < r; ++i) words.emplace_back(frame);
    const int focus = static_cast<int>(words.size());
    words.push_back(pick(default_verbalizer_words(word_class), rng));
    for (auto& w : make_claim(c, t, all_cues[cue_class], rng)) words.push_back(std::move(w));
    words.emplace_back(token::sep_text);
    for (int k = 0; k < c.comments_per_example; ++k)
      for (auto& w : make_comment(c, t, rng)) words.push_back(std::move(w));
    if (trailing)
      for (int i = 0; i < r; ++i) words.emplace_back(frame);
    out.corpus.push_back({join(words), focus});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Encoding

EncodedExample encode_example(const RumorExample& example, const Vocabulary& vocab) {
  EncodedExample out;
  out.claim = vocab.encode(example.claim);
  for (const auto& c : example.comments) {
    auto ids = vocab.encode(c);
    out.comments.insert(out.comments.end(), ids.begin(), ids.end());
  }
  out.label = example.label;
  return out;
}

std::vector<EncodedExample> encode_examples(const std::vector<RumorExample>& examples, const Vocabulary& vocab) {
  std::vector<EncodedExample> out;
  out.reserve(examples.size());
  for (const auto& e : examples) out.push_back(encode_example(e, vocab));
  return out;
}

EncodedTask encode_task(const DomainTask& task, const Vocabulary& vocab) {
  EncodedTask out;
  out.name = task.name;
  out.train = encode_examples(task.train, vocab);
  out.validation = encode_examples(task.validation, vocab);
  out.test = encode_examples(task.test, vocab);
  for (const auto& [k, examples] : task.few_shot) out.few_shot[k] = encode_examples(examples, vocab);
  return out;
}

}  // namespace cptrd
