#pragma once

#include "cptrd/model.hpp"
#include "cptrd/tensor.hpp"
#include "cptrd/verbalizer.hpp"

#include <json.hpp>

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace cptrd {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RumorExample {
  std::string claim;
  std::vector<std::string> comments;
  int label = 0;  // Label::non_rumor or Label::rumor
  std::string domain;

  bool operator==(const RumorExample&) const = default;
};

std::string_view label_name(int label);
int parse_label(std::string_view text);  // "rumor" | "non-rumor"

struct DomainTask {
  std::string name;
  std::vector<RumorExample> train;
  std::vector<RumorExample> validation;
  std::vector<RumorExample> test;
  std::map<int, std::vector<RumorExample>> few_shot;  // k -> k examples per class
};

// Whitespace tokenizer over a fixed word list. Ids below
// token::reserved_count are the reserved symbols.
class Vocabulary {
 public:
  Vocabulary();
  explicit Vocabulary(std::vector<std::string> words);

  // Reserved symbols, then `required`, then corpus words by descending
  // frequency (ties lexicographic) until `size` entries.
  static Vocabulary build(const std::vector<std::string>& texts, int size, const std::vector<std::string>& required);

  int size() const { return static_cast<int>(words_.size()); }
  const std::string& word(TokenId id) const { return words_.at(static_cast<std::size_t>(id)); }
  TokenId id(std::string_view word) const;  // token::unk when absent
  bool contains(std::string_view word) const;
  std::vector<TokenId> encode(std::string_view text) const;
  const std::vector<std::string>& words() const { return words_; }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, TokenId> index_;
};

std::vector<std::string> split_whitespace(std::string_view text);

// One JSON object per line: {claim, comments, label, domain}. Blank lines are
// skipped. Throws DataError listing every malformed line.
std::vector<RumorExample> load_jsonl(const std::string& path);
std::vector<RumorExample> parse_jsonl(std::string_view content);

// Tokens starting with http:// or https:// become <URL>; tokens starting
// with @ become <USER>. Whitespace is normalised to single spaces.
RumorExample preprocess(const RumorExample& example);
std::string preprocess_text(std::string_view text);

// Seeded shuffle, then contiguous 30% / 35% / 35% cut. Throws DataError on
// fewer than 10 examples or a split missing a class.
DomainTask split(const std::string& name, std::vector<RumorExample> examples, std::uint64_t seed);

// Exactly k examples per class from the train split.
std::vector<RumorExample> few_shot(const DomainTask& task, int k, std::uint64_t seed);

// Groups examples by their domain field, keeping first-seen domain order.
std::vector<std::pair<std::string, std::vector<RumorExample>>> group_by_domain(const std::vector<RumorExample>& all);

// ---------------------------------------------------------------------------
// Synthetic domain streams.

enum class LabelRule { consistent, inverted, rotated };

std::string_view to_string(LabelRule rule);
LabelRule parse_label_rule(std::string_view text);

struct SynthStreamConfig {
  int n_tasks = 5;
  int words_per_domain = 24;   // domain-private filler vocabulary
  int shared_words = 32;       // filler shared by all domains
  double shared_fraction = 0.3;
  int cue_words = 12;          // cue tokens per class
  int cues_per_domain = 8;     // rotated rule: window size
  int rotation_step = 2;       // rotated rule: window shift per domain
  LabelRule rule = LabelRule::consistent;
  int examples_per_domain = 400;
  int claim_length = 8;
  int cues_per_claim = 2;
  int comments_per_example = 2;
  int comment_length = 3;
  int pretrain_sentences = 4000;
  int max_frame = 4;           // longest frame run in the pretraining corpus
  std::uint64_t seed = 1;

  void validate() const;
  int required_vocab() const;
};

nlohmann::json to_json(const SynthStreamConfig& config);
SynthStreamConfig synth_config_from_json(const nlohmann::json& j);

// Unlabeled pretraining line; `focus` is the word index the masking step
// should favour (-1 for none).
struct CorpusLine {
  std::string text;
  int focus = -1;
};

struct SynthStream {
  std::vector<std::string> domain_names;
  std::vector<std::vector<RumorExample>> domains;  // per domain, balanced labels
  std::vector<CorpusLine> corpus;
  nlohmann::json manifest;
};

// Word list shared by every synthetic stream with the same layout
// parameters, so one backbone serves all rules.
Vocabulary synth_vocabulary(const SynthStreamConfig& config, int vocab_size);
Verbalizer synth_verbalizer(const Vocabulary& vocab);

std::vector<std::string> default_verbalizer_words(int label);

// Throws DataError when the layout needs more than `vocab_size` words.
SynthStream synth_stream(const SynthStreamConfig& config, int vocab_size);

// Cue tokens carrying the rumor / non-rumor signal for domain `index` (0-based).
struct DomainCues {
  std::vector<std::string> rumor;
  std::vector<std::string> non_rumor;
};
DomainCues synth_domain_cues(const SynthStreamConfig& config, int index);

// Encoded counterpart of DomainTask, used by the training harness.
struct EncodedTask {
  std::string name;
  std::vector<EncodedExample> train;
  std::vector<EncodedExample> validation;
  std::vector<EncodedExample> test;
  std::map<int, std::vector<EncodedExample>> few_shot;
};

EncodedExample encode_example(const RumorExample& example, const Vocabulary& vocab);
std::vector<EncodedExample> encode_examples(const std::vector<RumorExample>& examples, const Vocabulary& vocab);
EncodedTask encode_task(const DomainTask& task, const Vocabulary& vocab);

}  // namespace cptrd
