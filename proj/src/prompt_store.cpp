#include "cptrd/prompt_store.hpp"

#include "cptrd/container.hpp"

#include <mutex>

namespace cptrd {

SourcePromptLibrary::SourcePromptLibrary(const SourcePromptLibrary& other) : entries_(other.snapshot()) {}

SourcePromptLibrary& SourcePromptLibrary::operator=(const SourcePromptLibrary& other) {
  if (this != &other) {
    auto copy = other.snapshot();
    std::unique_lock lock(mutex_);
    entries_ = std::move(copy);
  }
  return *this;
}

void SourcePromptLibrary::store(int task_id, const SoftPrompt& prompt, const Vector& embedding, double recorded_f1) {
  if (!prompt.all_finite() || !embedding.allFinite()) throw std::invalid_argument("store: non-finite prompt or embedding");
  auto entry = std::make_shared<const SplEntry>(SplEntry{task_id, prompt, embedding, recorded_f1});
  std::unique_lock lock(mutex_);
  for (const auto& e : entries_)
    if (e->task_id == task_id) throw std::invalid_argument("store: task " + std::to_string(task_id) + " already stored");
  entries_.push_back(std::move(entry));
}

void SourcePromptLibrary::replace(int task_id, const SoftPrompt& prompt, double recorded_f1) {
  std::unique_lock lock(mutex_);
  for (auto& e : entries_) {
    if (e->task_id != task_id) continue;
    if (!(prompt.mode() == e->prompt.mode() && prompt.values().rows() == e->prompt.values().rows() &&
          prompt.values().cols() == e->prompt.values().cols()))
      throw std::invalid_argument("replace: prompt shape differs from the stored entry");
    e = std::make_shared<const SplEntry>(SplEntry{task_id, prompt, e->embedding, recorded_f1});
    return;
  }
  throw std::invalid_argument("replace: no entry for task " + std::to_string(task_id));
}

std::vector<SourcePromptLibrary::EntryPtr> SourcePromptLibrary::snapshot() const {
  std::shared_lock lock(mutex_);
  return entries_;
}

SourcePromptLibrary::EntryPtr SourcePromptLibrary::find(int task_id) const {
  std::shared_lock lock(mutex_);
  for (const auto& e : entries_)
    if (e->task_id == task_id) return e;
  return nullptr;
}

SourcePromptLibrary::EntryPtr SourcePromptLibrary::back() const {
  std::shared_lock lock(mutex_);
  return entries_.empty() ? nullptr : entries_.back();
}

std::size_t SourcePromptLibrary::size() const {
  std::shared_lock lock(mutex_);
  return entries_.size();
}

InitResult init_clinit(const SourcePromptLibrary& library, const ModelConfig& config, std::uint64_t seed) {
  const auto last = library.back();
  if (!last) return {SoftPrompt::random(config, seed), std::nullopt};
  return {last->prompt, last->task_id};
}

InitResult init_siminit(const SourcePromptLibrary& library, const Eigen::Ref<const Vector>& query,
                        const ModelConfig& config, std::uint64_t seed) {
  const auto entries = library.snapshot();
  if (entries.empty()) return {SoftPrompt::random(config, seed), std::nullopt};
  const SplEntry* best = nullptr;
  Scalar best_score = 0;
  for (const auto& e : entries) {
    const Scalar s = similarity(e->embedding, query).score;
    if (!best || s > best_score || (s == best_score && e->task_id < best->task_id)) {
      best = e.get();
      best_score = s;
    }
  }
  return {best->prompt, best->task_id};
}

InitResult init_meaninit(const SourcePromptLibrary& library, const ModelConfig& config, std::uint64_t seed) {
  const auto entries = library.snapshot();
  if (entries.empty()) return {SoftPrompt::random(config, seed), std::nullopt};
  SoftPrompt mean = entries.front()->prompt;
  for (std::size_t i = 1; i < entries.size(); ++i) {
    const SoftPrompt& p = entries[i]->prompt;
    if (p.mode() != mean.mode()) throw std::invalid_argument("meaninit: library mixes shallow and deep prompts");
    if (p.values().rows() != mean.values().rows() || p.values().cols() != mean.values().cols())
      throw std::invalid_argument("meaninit: library prompts differ in shape");
    mean.values() += p.values();
  }
  mean.values() /= static_cast<Scalar>(entries.size());
  return {mean, std::nullopt};
}

void save_library(const SourcePromptLibrary& library, const ModelConfig& config, const std::string& path) {
  Container c;
  c.config = config;
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : library.snapshot()) {
    e->prompt.check_shape(config);
    entries.push_back({{"task_id", e->task_id}, {"recorded_f1", e->recorded_f1}});
    const std::string id = std::to_string(e->task_id);
    const auto& v = e->prompt.values();
    c.tensors.push_back({id + "/prompt",
                         {static_cast<std::uint64_t>(e->prompt.layers()), static_cast<std::uint64_t>(e->prompt.length()),
                          static_cast<std::uint64_t>(e->prompt.dim())},
                         v,
                         DType::f64});
    c.tensors.push_back({id + "/embedding", {static_cast<std::uint64_t>(e->embedding.size())},
                         RowMatrix(e->embedding.transpose()), DType::f64});
  }
  c.metadata = {{"kind", "spl"}, {"entries", entries}};
  write_container(path, c);
}

SourcePromptLibrary load_library(const std::string& path, const ModelConfig& config) {
  const Container c = read_container(path);
  if (c.metadata.value("kind", "") != "spl") throw FormatError("container is not a prompt library", 0);
  if (!c.config.same_architecture(config) || c.config.prompt_length != config.prompt_length ||
      c.config.injection_mode != config.injection_mode)
    throw FormatError("prompt library was written for a different model config", 0);
  SourcePromptLibrary library;
  try {
    for (const auto& meta : c.metadata.at("entries")) {
      const int id = meta.at("task_id").get<int>();
      const double f1 = meta.at("recorded_f1").get<double>();
      const NamedTensor& p = c.get(std::to_string(id) + "/prompt");
      const NamedTensor& z = c.get(std::to_string(id) + "/embedding");
      if (z.values.size() != config.d) throw FormatError("embedding of task " + std::to_string(id) + " has wrong size", 0);
      const SoftPrompt prompt = SoftPrompt::from_values(config, p.values);
      library.store(id, prompt, Eigen::Map<const Vector>(z.values.data(), z.values.size()), f1);
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad library metadata: ") + e.what(), 0);
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("bad library entry: ") + e.what(), 0);
  }
  return library;
}

}  // namespace cptrd
