#include "cptrd/experiment.hpp"

#include "cptrd/container.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

namespace fs = std::filesystem;

namespace cptrd {

namespace {

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, value] : j.items())
    if (!known.count(key)) throw ConfigError(where + ": unknown key '" + key + "'");
}

template <typename T>
void read(const nlohmann::json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(where + ": key '" + key + "' has the wrong type");
  }
}

ModelConfig model_from_json(const nlohmann::json& j) {
  reject_unknown(j, {"vocab_size", "d", "layers", "heads", "prompt_length", "max_seq", "ffn_dim"}, "model");
  ModelConfig m;
  read(j, "vocab_size", m.vocab_size, "model");
  read(j, "d", m.d, "model");
  read(j, "layers", m.layers, "model");
  read(j, "heads", m.heads, "model");
  read(j, "prompt_length", m.prompt_length, "model");
  read(j, "max_seq", m.max_seq, "model");
  read(j, "ffn_dim", m.ffn_dim, "model");
  return m;
}

nlohmann::json to_json(const ModelConfig& m) {
  return {{"vocab_size", m.vocab_size}, {"d", m.d},         {"layers", m.layers}, {"heads", m.heads},
          {"prompt_length", m.prompt_length}, {"max_seq", m.max_seq}, {"ffn_dim", m.ffn_dim}};
}

PretrainConfig pretrain_from_json(const nlohmann::json& j, double& held_out) {
  reject_unknown(j, {"steps", "batch_size", "learning_rate", "mask_prob", "focus_mask_prob", "seed", "held_out_fraction"},
                 "pretrain");
  PretrainConfig p;
  read(j, "steps", p.steps, "pretrain");
  read(j, "batch_size", p.batch_size, "pretrain");
  read(j, "learning_rate", p.learning_rate, "pretrain");
  read(j, "mask_prob", p.mask_prob, "pretrain");
  read(j, "focus_mask_prob", p.focus_mask_prob, "pretrain");
  read(j, "seed", p.seed, "pretrain");
  read(j, "held_out_fraction", held_out, "pretrain");
  if (p.steps < 1 || p.batch_size < 1) throw ConfigError("pretrain: steps and batch_size must be >= 1");
  if (!(p.learning_rate > 0)) throw ConfigError("pretrain: learning_rate must be positive");
  if (!(p.mask_prob >= 0 && p.mask_prob <= 1 && p.focus_mask_prob >= 0 && p.focus_mask_prob <= 1))
    throw ConfigError("pretrain: masking probabilities must lie in [0, 1]");
  if (!(held_out > 0 && held_out < 1)) throw ConfigError("pretrain: held_out_fraction must lie in (0, 1)");
  return p;
}

std::string resolve(const fs::path& base, const std::string& p) {
  if (p.empty() || fs::path(p).is_absolute() || base.empty()) return p;
  return (base / p).lexically_normal().string();
}

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << content;
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

}  // namespace

fs::path ExperimentConfig::checkpoint_path() const {
  return checkpoint.empty() ? fs::path(output) / "backbone.cptrd" : fs::path(checkpoint);
}

ExperimentConfig experiment_from_json(const nlohmann::json& j, const fs::path& base_dir) {
  try {
    reject_unknown(j, {"model", "data", "pretrain", "checkpoint", "methods", "orders", "seeds", "training", "output"},
                   "config");
    ExperimentConfig c;
    if (j.contains("model")) c.model = model_from_json(j.at("model"));
    c.model.validate();

    if (!j.contains("data")) throw ConfigError("config: missing 'data'");
    const auto& d = j.at("data");
    reject_unknown(d, {"synth", "jsonl", "split_seed"}, "data");
    read(d, "split_seed", c.data.split_seed, "data");
    if (d.contains("synth") == d.contains("jsonl")) throw ConfigError("data: give exactly one of 'synth' or 'jsonl'");
    if (d.contains("synth")) {
      c.data.synth = synth_config_from_json(d.at("synth"));
      c.data.synth->validate();
      if (c.data.synth->required_vocab() > c.model.vocab_size)
        throw ConfigError("data: synthetic layout needs " + std::to_string(c.data.synth->required_vocab()) +
                          " words but model.vocab_size is " + std::to_string(c.model.vocab_size));
    } else {
      read(d, "jsonl", c.data.jsonl, "data");
      if (c.data.jsonl.empty()) throw ConfigError("data: 'jsonl' lists no files");
      for (auto& p : c.data.jsonl) p = resolve(base_dir, p);
    }

    if (j.contains("pretrain")) c.pretrain = pretrain_from_json(j.at("pretrain"), c.held_out_fraction);
    read(j, "checkpoint", c.checkpoint, "config");
    c.checkpoint = resolve(base_dir, c.checkpoint);
    read(j, "output", c.output, "config");
    if (c.output.empty()) throw ConfigError("config: 'output' must not be empty");

    if (j.contains("methods")) {
      if (!j.at("methods").is_array()) throw ConfigError("config: 'methods' must be an array");
      std::set<std::string> names;
      for (const auto& m : j.at("methods")) {
        c.methods.push_back(method_from_json(m));
        if (!names.insert(c.methods.back().name).second)
          throw ConfigError("config: duplicate method name '" + c.methods.back().name + "'");
      }
    }
    read(j, "orders", c.orders, "config");
    read(j, "seeds", c.seeds, "config");
    if (c.seeds.empty()) throw ConfigError("config: 'seeds' must not be empty");
    if (j.contains("training")) c.training = training_from_json(j.at("training"));
    c.training.validate();
    return c;
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  } catch (const DataError& e) {
    throw ConfigError(e.what());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

ExperimentConfig load_experiment(const fs::path& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return experiment_from_json(j, path.parent_path());
}

nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json data = {{"split_seed", c.data.split_seed}};
  if (c.data.synth)
    data["synth"] = to_json(*c.data.synth);
  else
    data["jsonl"] = c.data.jsonl;
  nlohmann::json methods = nlohmann::json::array();
  for (const auto& m : c.methods) methods.push_back(to_json(m));
  return {{"model", to_json(c.model)},
          {"data", data},
          {"pretrain",
           {{"steps", c.pretrain.steps},
            {"batch_size", c.pretrain.batch_size},
            {"learning_rate", c.pretrain.learning_rate},
            {"mask_prob", c.pretrain.mask_prob},
            {"focus_mask_prob", c.pretrain.focus_mask_prob},
            {"seed", c.pretrain.seed},
            {"held_out_fraction", c.held_out_fraction}}},
          {"checkpoint", c.checkpoint},
          {"methods", methods},
          {"orders", c.orders},
          {"seeds", c.seeds},
          {"training", to_json(c.training)},
          {"output", c.output}};
}

const DomainTask& PreparedData::domain(const std::string& name) const {
  for (const auto& d : domains)
    if (d.name == name) return d;
  throw ConfigError("unknown domain '" + name + "'");
}

PreparedData prepare_data(const ExperimentConfig& config) {
  PreparedData out;
  std::vector<std::pair<std::string, std::vector<RumorExample>>> grouped;
  try {
    if (config.data.synth) {
      const SynthStream stream = synth_stream(*config.data.synth, config.model.vocab_size);
      out.vocab = synth_vocabulary(*config.data.synth, config.model.vocab_size);
      for (std::size_t t = 0; t < stream.domains.size(); ++t) grouped.emplace_back(stream.domain_names[t], stream.domains[t]);
      for (const auto& line : stream.corpus) out.corpus.push_back({out.vocab.encode(line.text), line.focus});
      out.manifest = stream.manifest;
    } else {
      std::vector<RumorExample> all;
      nlohmann::json files = nlohmann::json::array();
      for (const auto& path : config.data.jsonl) {
        auto part = load_jsonl(path);
        files.push_back({{"path", path}, {"examples", part.size()}});
        for (auto& e : part) all.push_back(preprocess(e));
      }
      std::vector<std::string> texts;
      for (const auto& e : all) {
        texts.push_back(e.claim);
        for (const auto& c : e.comments) texts.push_back(c);
      }
      std::vector<std::string> required;
      for (int y = 0; y < label_count; ++y)
        for (auto& w : default_verbalizer_words(y)) required.push_back(w);
      out.vocab = Vocabulary::build(texts, config.model.vocab_size, required);
      grouped = group_by_domain(all);
      for (const auto& e : all) {
        std::string line = e.claim + " " + std::string(token::sep_text);
        for (const auto& c : e.comments) line += " " + c;
        std::vector<TokenId> tokens = out.vocab.encode(line);
        if (static_cast<int>(tokens.size()) > config.model.max_seq) tokens.resize(static_cast<std::size_t>(config.model.max_seq));
        out.corpus.push_back({std::move(tokens), -1});
      }
      out.manifest = {{"source", "jsonl"}, {"files", files}, {"vocab_size", out.vocab.size()}};
    }
    out.verbalizer = synth_verbalizer(out.vocab);
    for (std::size_t t = 0; t < grouped.size(); ++t) {
      DomainTask task = split(grouped[t].first, grouped[t].second, mix_seed(config.data.split_seed, {t}));
      for (const int k : config.training.k_shots)
        task.few_shot[k] = few_shot(task, k, mix_seed(config.data.split_seed, {t, static_cast<std::uint64_t>(k)}));
      out.domains.push_back(std::move(task));
    }
  } catch (const DataError& e) {
    throw ConfigError(e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (out.domains.size() < 2) throw ConfigError("data source has fewer than two domains");
  return out;
}

std::vector<std::vector<std::string>> effective_orders(const ExperimentConfig& config, const PreparedData& data) {
  if (!config.orders.empty()) return config.orders;
  std::vector<std::string> natural;
  for (const auto& d : data.domains) natural.push_back(d.name);
  return {natural};
}

void validate_orders(const ExperimentConfig& config, const PreparedData& data) {
  for (const auto& order : effective_orders(config, data)) {
    if (order.size() < 2) throw ConfigError("every task order needs at least two domains");
    std::set<std::string> seen;
    for (const auto& name : order) {
      data.domain(name);
      if (!seen.insert(name).second) throw ConfigError("domain '" + name + "' appears twice in one order");
    }
  }
}

std::vector<EncodedTask> encode_order(const PreparedData& data, const std::vector<std::string>& order) {
  std::vector<EncodedTask> out;
  for (const auto& name : order) out.push_back(encode_task(data.domain(name), data.vocab));
  return out;
}

PretrainReport cmd_pretrain(const ExperimentConfig& config, const PreparedData& data,
                            const std::function<void(const std::string&)>& progress) {
  if (data.corpus.empty()) throw ConfigError("pretrain: the data source produced no corpus");
  const auto held = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(data.corpus.size() * config.held_out_fraction)));
  if (held >= data.corpus.size()) throw ConfigError("pretrain: corpus too small for a held-out split");
  const std::vector<CorpusSequence> train(data.corpus.begin(), data.corpus.end() - static_cast<std::ptrdiff_t>(held));
  const std::vector<CorpusSequence> held_out(data.corpus.end() - static_cast<std::ptrdiff_t>(held), data.corpus.end());

  PretrainReport report;
  const Backbone random = Backbone::initialize(config.model, config.pretrain.seed);
  const Backbone trained = pretrain_backbone(config.model, train, config.pretrain, [&](const PretrainLog& l) {
    report.log.push_back(l);
    if (progress && (l.step % 500 == 0 || l.step == config.pretrain.steps))
      progress("step " + std::to_string(l.step) + " loss " + std::to_string(l.loss));
  });
  const std::uint64_t eval_seed = mix_seed(config.pretrain.seed, {99});
  report.held_out_random =
      masked_lm_loss(random, held_out, eval_seed, config.pretrain.mask_prob, config.pretrain.focus_mask_prob);
  report.held_out_pretrained =
      masked_lm_loss(trained, held_out, eval_seed, config.pretrain.mask_prob, config.pretrain.focus_mask_prob);
  report.digest = hex_digest(trained.digest());

  const fs::path ckpt = config.checkpoint_path();
  if (ckpt.has_parent_path()) fs::create_directories(ckpt.parent_path());
  save_backbone(ckpt.string(), trained);
  fs::create_directories(config.output);
  std::ostringstream csv;
  csv << "step,loss\n" << std::setprecision(17);
  for (const auto& l : report.log) csv << l.step << ',' << l.loss << '\n';
  write_file(fs::path(config.output) / "pretrain_log.csv", csv.str());
  const nlohmann::json summary = {{"checkpoint", ckpt.string()},
                                  {"digest", report.digest},
                                  {"held_out_loss_random", report.held_out_random},
                                  {"held_out_loss_pretrained", report.held_out_pretrained},
                                  {"held_out_sequences", held_out.size()},
                                  {"manifest", data.manifest}};
  write_file(fs::path(config.output) / "pretrain.json", summary.dump(2) + "\n");
  return report;
}

nlohmann::json metrics_json(const MethodConfig& method, std::uint64_t seed, const std::string& order,
                            const RunResult& result, const TrainingConfig& training) {
  nlohmann::json j = {{"method", method.name},
                      {"learner", to_string(method.learner)},
                      {"seed", seed},
                      {"order", order},
                      {"avg_f1", avg_f1(result.r)},
                      {"params_fraction", result.params_fraction}};
  const auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  if (method.mtl) {
    j["fwt"] = nullptr;
    j["bwt"] = nullptr;
    j["fs_f1"] = nullptr;
  } else {
    j["fwt"] = opt(fwt(result.r));
    j["bwt"] = opt(bwt(result.r));
    std::vector<std::map<int, double>> per_task;
    for (const auto& s : result.stages) per_task.push_back(s.few_shot_f1);
    nlohmann::json fs = nlohmann::json::object();
    for (const int k : training.k_shots) fs[std::to_string(k)] = fs_f1(per_task, k);
    j["fs_f1"] = fs;
  }
  return j;
}

std::vector<RunCell> plan_grid(const ExperimentConfig& config, const PreparedData& data) {
  if (config.methods.empty()) throw ConfigError("config: no methods to run");
  validate_orders(config, data);
  const auto orders = effective_orders(config, data);
  std::vector<RunCell> cells;
  for (const auto& m : config.methods)
    for (std::size_t o = 0; o < orders.size(); ++o)
      for (const auto seed : config.seeds) {
        RunCell cell{m, "order" + std::to_string(o + 1), orders[o], seed, {}};
        cell.dir = fs::path(config.output) / m.name / cell.order_name / std::to_string(seed);
        cells.push_back(std::move(cell));
      }
  return cells;
}

RunResult run_cell(const RunCell& cell, const Backbone& backbone, const PreparedData& data,
                   const TrainingConfig& training, const ProgressFn& progress) {
  const std::vector<EncodedTask> tasks = encode_order(data, cell.order);
  RunResult result = run_stream(backbone, data.verbalizer, tasks, cell.method, training, cell.seed, progress);
  fs::create_directories(cell.dir);
  write_file(cell.dir / "rmatrix.csv", result.r.to_csv(cell.order));
  write_file(cell.dir / "metrics.json", metrics_json(cell.method, cell.seed, cell.order_name, result, training).dump(2) + "\n");
  std::string stages;
  for (const auto& s : result.stages) stages += to_json(s).dump() + "\n";
  write_file(cell.dir / "stages.jsonl", stages);
  ModelConfig mc = backbone.config();
  if (const auto mode = cell.method.injection()) mc.injection_mode = *mode;
  if (!result.library.empty()) save_library(result.library, mc, (cell.dir / "library.cptrd").string());
  if (result.tphnet) save_tphnet(*result.tphnet, mc, (cell.dir / "tphnet.cptrd").string());
  return result;
}

namespace {

nlohmann::json mean_std(const std::vector<double>& xs) {
  if (xs.empty()) return nullptr;
  double mean = 0;
  for (const double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  double var = 0;
  for (const double x : xs) var += (x - mean) * (x - mean);
  const double sd = xs.size() > 1 ? std::sqrt(var / static_cast<double>(xs.size() - 1)) : 0.0;
  return {{"mean", mean}, {"std", sd}, {"n", xs.size()}};
}

}  // namespace

nlohmann::json aggregate(const std::vector<nlohmann::json>& metrics) {
  std::vector<std::string> order;
  std::map<std::string, std::vector<const nlohmann::json*>> by_method;
  for (const auto& m : metrics) {
    const std::string name = m.at("method").get<std::string>();
    if (!by_method.count(name)) order.push_back(name);
    by_method[name].push_back(&m);
  }
  nlohmann::json out = nlohmann::json::array();
  for (const auto& name : order) {
    const auto& runs = by_method[name];
    auto collect = [&](const char* key) {
      std::vector<double> xs;
      for (const auto* r : runs)
        if (r->contains(key) && !r->at(key).is_null()) xs.push_back(r->at(key).get<double>());
      return xs;
    };
    nlohmann::json fs = nlohmann::json::object();
    std::map<std::string, std::vector<double>> fs_values;
    for (const auto* r : runs)
      if (r->contains("fs_f1") && r->at("fs_f1").is_object())
        for (const auto& [k, v] : r->at("fs_f1").items()) fs_values[k].push_back(v.get<double>());
    for (const auto& [k, xs] : fs_values) fs[k] = mean_std(xs);
    out.push_back({{"method", name},
                   {"runs", runs.size()},
                   {"avg_f1", mean_std(collect("avg_f1"))},
                   {"fwt", mean_std(collect("fwt"))},
                   {"bwt", mean_std(collect("bwt"))},
                   {"fs_f1", fs},
                   {"params_fraction", runs.front()->at("params_fraction")}});
  }
  return out;
}

RunSummary cmd_run(const ExperimentConfig& config, const PreparedData& data, int jobs,
                   const std::function<void(const std::string&)>& progress) {
  const std::vector<RunCell> cells = plan_grid(config, data);
  const fs::path ckpt = config.checkpoint_path();
  if (!fs::exists(ckpt)) throw ConfigError("checkpoint " + ckpt.string() + " not found; run 'pretrain' first");
  Backbone backbone;
  try {
    backbone = load_backbone(ckpt.string());
  } catch (const FormatError& e) {
    throw ConfigError("checkpoint " + ckpt.string() + ": " + e.what());
  }
  if (!backbone.config().same_architecture(config.model))
    throw ConfigError("checkpoint " + ckpt.string() + " was trained for a different model config");
  data.verbalizer.validate(config.model.vocab_size);

  std::mutex mutex;
  auto say = [&](const std::string& msg) {
    if (!progress) return;
    std::lock_guard lock(mutex);
    progress(msg);
  };
  std::vector<std::optional<nlohmann::json>> metrics(cells.size());
  std::vector<std::string> errors(cells.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < cells.size(); i = next++) {
      const RunCell& cell = cells[i];
      const std::string label = cell.method.name + "/" + cell.order_name + "/" + std::to_string(cell.seed);
      try {
        const RunResult r = run_cell(cell, backbone, data, config.training, [&](const std::string& m) { say(label + ": " + m); });
        metrics[i] = metrics_json(cell.method, cell.seed, cell.order_name, r, config.training);
        say(label + ": done, avg F1 " + std::to_string(metrics[i]->at("avg_f1").get<double>()));
      } catch (const std::exception& e) {
        errors[i] = label + ": " + e.what();
        say(errors[i]);
      }
    }
  };
  const int n = std::clamp(jobs, 1, static_cast<int>(cells.size()));
  std::vector<std::thread> pool;
  for (int t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  RunSummary summary;
  std::vector<nlohmann::json> done;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (metrics[i]) {
      done.push_back(*metrics[i]);
      ++summary.completed;
    } else {
      ++summary.failed;
      summary.errors.push_back(errors[i]);
    }
  }
  fs::create_directories(config.output);
  write_file(fs::path(config.output) / "aggregate.json", aggregate(done).dump(2) + "\n");
  return summary;
}

ReportOutput cmd_report(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw ConfigError(dir.string() + " is not a directory");
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file() && e.path().filename() == "metrics.json") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw ConfigError("no completed runs (metrics.json) below " + dir.string());

  std::vector<nlohmann::json> metrics;
  // method -> task index -> k -> cumulative fs.F1 per run
  std::map<std::string, std::map<int, std::map<std::string, std::vector<double>>>> curve;
  std::set<std::string> ks;
  for (const auto& f : files) {
    try {
      metrics.push_back(nlohmann::json::parse(read_file(f)));
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(f.string() + ": " + e.what());
    }
    const std::string method = metrics.back().at("method").get<std::string>();
    const fs::path stages = f.parent_path() / "stages.jsonl";
    if (!fs::exists(stages)) continue;
    std::istringstream in(read_file(stages));
    std::string line;
    std::map<std::string, double> running;
    int index = 0;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto s = nlohmann::json::parse(line);
      ++index;
      auto& slot = curve[method][index];
      for (const auto& [k, v] : s.at("few_shot_f1").items()) {
        ks.insert(k);
        running[k] += v.get<double>();
        slot[k].push_back(running[k] / index);
      }
      if (s.at("few_shot_f1").empty()) slot.emplace("", std::vector<double>{});
    }
  }

  const nlohmann::json agg = aggregate(metrics);
  std::vector<std::string> kcols(ks.begin(), ks.end());
  std::sort(kcols.begin(), kcols.end(), [](const std::string& a, const std::string& b) { return std::stoi(a) < std::stoi(b); });

  auto cell = [](const nlohmann::json& ms) -> std::string {
    if (ms.is_null()) return "-";
    std::ostringstream o;
    o << std::fixed << std::setprecision(1) << ms.at("mean").get<double>() << " ± " << ms.at("std").get<double>();
    return o.str();
  };
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> header{"method", "runs", "Avg.F1", "FWT", "BWT"};
  for (const auto& k : kcols) header.push_back("fs.F1@" + k);
  header.push_back("params %");
  rows.push_back(header);
  for (const auto& a : agg) {
    std::vector<std::string> row{a.at("method").get<std::string>(), std::to_string(a.at("runs").get<int>()),
                                 cell(a.at("avg_f1")), cell(a.at("fwt")), cell(a.at("bwt"))};
    for (const auto& k : kcols) row.push_back(a.at("fs_f1").contains(k) ? cell(a.at("fs_f1").at(k)) : "-");
    std::ostringstream p;
    p << std::setprecision(4) << 100.0 * a.at("params_fraction").get<double>();
    row.push_back(p.str());
    rows.push_back(row);
  }
  // Column widths by code points so the ± sign does not skew alignment.
  auto width = [](const std::string& s) {
    std::size_t n = 0;
    for (const unsigned char ch : s) n += (ch & 0xC0) != 0x80;
    return n;
  };
  std::vector<std::size_t> w(header.size(), 0);
  for (const auto& r : rows)
    for (std::size_t i = 0; i < r.size(); ++i) w[i] = std::max(w[i], width(r[i]));
  std::ostringstream table;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t i = 0; i < rows[r].size(); ++i) {
      table << rows[r][i] << std::string(w[i] - width(rows[r][i]), ' ');
      table << (i + 1 < rows[r].size() ? "  " : "\n");
    }
    if (r == 0) {
      std::size_t total = 0;
      for (const auto x : w) total += x + 2;
      table << std::string(total - 2, '-') << '\n';
    }
  }
  table << "not implemented: EANN, Adapter, ParallelAdapter\n";

  std::ostringstream csv;
  csv << "method,task_index";
  for (const auto& k : kcols) csv << ",fs_f1_" << k;
  csv << '\n' << std::setprecision(17);
  for (const auto& a : agg) {
    const std::string method = a.at("method").get<std::string>();
    if (!curve.count(method)) continue;
    for (const auto& [index, by_k] : curve.at(method)) {
      csv << method << ',' << index;
      for (const auto& k : kcols) {
        csv << ',';
        const auto it = by_k.find(k);
        if (it == by_k.end() || it->second.empty()) continue;
        double m = 0;
        for (const double x : it->second) m += x;
        csv << m / static_cast<double>(it->second.size());
      }
      csv << '\n';
    }
  }

  ReportOutput out{table.str(), csv.str(), static_cast<int>(metrics.size())};
  write_file(dir / "report.txt", out.table);
  write_file(dir / "fs_curve.csv", out.fs_curve);
  return out;
}

}  // namespace cptrd
