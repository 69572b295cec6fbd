// Acceptance run: pretrains a desk-scale backbone, runs the synthetic
// method grid and prints one PASS/FAIL line per criterion. Exits nonzero if
// any criterion fails.
//
//   cptrd_acceptance [--config configs/desk.json] [--work DIR]

#include "cptrd/container.hpp"
#include "cptrd/experiment.hpp"
#include "oracles.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>

using namespace cptrd;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double x, int precision = 2) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", precision, x);
  return buf;
}

double mean(const std::vector<double>& xs) {
  return xs.empty() ? 0.0 : std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
}

void log(const std::string& msg) { std::cerr << msg << std::endl; }

struct Run {
  std::string stream, method, order;
  std::uint64_t seed = 0;
  bool prompt_mode = false;
  RunResult result;
  double avg = 0, bwt = 0, fwt = 0, seconds = 0;
};

MethodConfig cpt_rd(InitStrategy init, bool tphnet = false, int rehearsal = 0) {
  return method_from_json({{"learner", "cpt-rd"},
                           {"init", std::string(to_string(init))},
                           {"tphnet", tphnet},
                           {"rehearsal_per_domain", rehearsal}});
}

class Grid {
 public:
  Grid(const ExperimentConfig& base, const Backbone& backbone) : base_(base), backbone_(backbone) {}

  const PreparedData& stream(const std::string& rule) {
    auto it = data_.find(rule);
    if (it == data_.end()) {
      ExperimentConfig c = base_;
      c.data.synth->rule = parse_label_rule(rule);
      it = data_.emplace(rule, prepare_data(c)).first;
    }
    return it->second;
  }

  // Order 1 is the natural domain order, order 2 its reverse.
  const Run& run(const std::string& rule, const MethodConfig& m, std::uint64_t seed, int order) {
    const std::string key = rule + "/" + m.name + "/" + std::to_string(order) + "/" + std::to_string(seed);
    if (const auto it = runs_.find(key); it != runs_.end()) return it->second;
    const PreparedData& data = stream(rule);
    std::vector<std::string> names;
    for (const auto& d : data.domains) names.push_back(d.name);
    if (order == 2) std::reverse(names.begin(), names.end());

    Run r;
    r.stream = rule;
    r.method = m.name;
    r.order = "order" + std::to_string(order);
    r.seed = seed;
    r.prompt_mode = m.injection().has_value();
    const auto t0 = Clock::now();
    r.result = run_stream(backbone_, data.verbalizer, encode_order(data, names), m, base_.training, seed);
    r.seconds = seconds_since(t0);
    r.avg = avg_f1(r.result.r);
    if (!m.mtl) {
      r.bwt = *bwt(r.result.r);
      r.fwt = *fwt(r.result.r);
    }
    log("  " + key + ": avg " + fmt(r.avg) + " bwt " + fmt(r.bwt) + " fwt " + fmt(r.fwt) + " (" + fmt(r.seconds, 1) + " s)");
    return runs_.emplace(key, std::move(r)).first->second;
  }

  const std::map<std::string, Run>& runs() const { return runs_; }

 private:
  ExperimentConfig base_;
  const Backbone& backbone_;
  std::map<std::string, PreparedData> data_;
  std::map<std::string, Run> runs_;
};

struct Verdict {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(int id, const std::string& title, const Verdict& v) {
  failures += !v.pass;
  std::cout << (v.pass ? "PASS" : "FAIL") << "  C" << id << " " << title << ": " << v.detail << std::endl;
}

const std::vector<std::string> kSuite{"inverted", "rotated"};
const std::vector<InitStrategy> kInits{InitStrategy::random, InitStrategy::clinit, InitStrategy::siminit,
                                       InitStrategy::meaninit};
constexpr std::uint64_t kSeeds = 3;

Verdict replay(Grid& g) {
  int runs = 0, exact = 0;
  double slowest = 0;
  for (const auto& rule : kSuite)
    for (const auto init : kInits)
      for (std::uint64_t seed = 1; seed <= kSeeds; ++seed)
        for (int order = 1; order <= 2; ++order) {
          const Run& r = g.run(rule, cpt_rd(init), seed, order);
          ++runs;
          exact += r.bwt == 0.0;
          slowest = std::max(slowest, r.seconds);
        }
  return {exact == runs && slowest < 300,
          std::to_string(exact) + "/" + std::to_string(runs) + " runs with BWT == 0 exactly; slowest run " +
              fmt(slowest, 1) + " s"};
}

Verdict consolidation(Grid& g) {
  int runs = 0, ok = 0;
  double worst = 1e9;
  for (const auto& rule : kSuite)
    for (std::uint64_t seed = 1; seed <= kSeeds; ++seed)
      for (int order = 1; order <= 2; ++order) {
        const Run& r = g.run(rule, cpt_rd(InitStrategy::siminit, true), seed, order);
        ++runs;
        ok += r.bwt >= 0;
        worst = std::min(worst, r.bwt);
      }
  return {ok == runs, std::to_string(ok) + "/" + std::to_string(runs) + " runs with BWT >= 0; min BWT " + fmt(worst)};
}

Verdict forgetting(Grid& g) {
  const MethodConfig m = method_from_json({{"learner", "finetune"}, {"head", "cls"}});
  int negative = 0;
  std::vector<double> bwts;
  for (std::uint64_t seed = 1; seed <= kSeeds; ++seed)
    for (int order = 1; order <= 2; ++order) {
      const Run& r = g.run("inverted", m, seed, order);
      negative += r.bwt < 0;
      bwts.push_back(r.bwt);
    }
  return {negative >= 5, std::to_string(negative) + "/6 fine-tuning runs with BWT < 0; mean BWT " + fmt(mean(bwts))};
}

Verdict transfer(Grid& g) {
  std::vector<double> gaps;
  std::string per_seed;
  for (std::uint64_t seed = 1; seed <= kSeeds; ++seed) {
    std::vector<double> seed_gaps;
    for (int order = 1; order <= 2; ++order)
      seed_gaps.push_back(g.run("rotated", cpt_rd(InitStrategy::siminit), seed, order).fwt -
                          g.run("rotated", cpt_rd(InitStrategy::random), seed, order).fwt);
    gaps.push_back(mean(seed_gaps));
    per_seed += (per_seed.empty() ? "" : ", ") + fmt(gaps.back());
  }
  const double gap = mean(gaps);
  return {gap >= 5, "SimInit - random FWT = " + fmt(gap) + " F1 (per seed over both orders: " + per_seed + ")"};
}

Verdict metric_oracles() {
  const double deviation = oracles::metric_oracle_deviation(1000, 20240);
  RMatrix r(3);
  for (int j = 0; j <= 3; ++j)
    for (int i = 1; i <= 3; ++i) r.set(j, i, 0);
  r.set(3, 1, 60), r.set(3, 2, 70), r.set(3, 3, 80);
  const double a = avg_f1(r);
  RMatrix b(3);
  for (int j = 0; j <= 3; ++j)
    for (int i = 1; i <= 3; ++i) b.set(j, i, 0);
  b.set(1, 1, 80), b.set(2, 2, 70), b.set(3, 1, 70), b.set(3, 2, 70);
  const double w = *bwt(b);
  RMatrix f(3);
  for (int j = 0; j <= 3; ++j)
    for (int i = 1; i <= 3; ++i) f.set(j, i, 50);
  f.set(1, 2, 60), f.set(2, 3, 70);
  const double t = *fwt(f);
  const bool hand = std::abs(a - 70) < 1e-12 && std::abs(w + 5) < 1e-12 && std::abs(t - 15) < 1e-12;
  return {deviation <= 1e-12 && hand, "max deviation over 1000 random matrices " + fmt(deviation * 1e12, 3) +
                                          "e-12; hand examples avg " + fmt(a) + ", BWT " + fmt(w) + ", FWT " + fmt(t)};
}

Verdict gradients() {
  double worst = 0;
  std::string worst_kind;
  for (int i = 0; i < 100; ++i) {
    const oracles::GradientCase c = oracles::gradient_case(i, 777);
    if (!(c.error <= worst)) worst = c.error, worst_kind = c.kind;
  }
  std::ostringstream o;
  o << "100 cases, max relative error " << worst << " (" << worst_kind << ")";
  return {worst < 1e-4, o.str()};
}

Verdict frozen_audit(const Grid& g, const Backbone& backbone, const std::string& digest) {
  int stages = 0, equal = 0;
  for (const auto& [key, r] : g.runs())
    if (r.prompt_mode)
      for (const auto& s : r.result.stages) {
        ++stages;
        equal += s.digest_before == s.digest_after && s.digest_before == digest;
      }
  const bool unchanged = hex_digest(backbone.digest()) == digest;
  return {stages > 0 && equal == stages && unchanged,
          std::to_string(equal) + "/" + std::to_string(stages) + " prompt-mode stages kept the checkpoint digest; " +
              "backbone " + (unchanged ? "unchanged" : "CHANGED") + " after the grid"};
}

Verdict efficiency(const ModelConfig& desk) {
  auto ordered = [](const ModelConfig& c) {
    const double s = trainable_fraction(c, TuningMode::shallow_prompt), d = trainable_fraction(c, TuningMode::deep_prompt),
                 t = trainable_fraction(c, TuningMode::deep_prompt_tphnet), f = trainable_fraction(c, TuningMode::finetune);
    return s < d && d < t && t < f && f == 1.0;
  };
  bool audited = true;
  for (const auto mode :
       {TuningMode::shallow_prompt, TuningMode::deep_prompt, TuningMode::deep_prompt_tphnet, TuningMode::finetune})
    audited &= std::abs(trainable_fraction(desk, mode) - oracles::audited_fraction(desk, mode)) < 1e-15;

  ModelConfig bert;
  bert.vocab_size = 30522;
  bert.d = 768;
  bert.layers = 12;
  bert.heads = 12;
  bert.prompt_length = 40;
  bert.max_seq = 512;
  bert.ffn_dim = 3072;
  const double shallow = 100 * trainable_fraction(bert, TuningMode::shallow_prompt);
  const double deep = 100 * trainable_fraction(bert, TuningMode::deep_prompt);
  const auto within2 = [](double x, double target) { return x >= target / 2 && x <= target * 2; };
  const bool pass = ordered(desk) && ordered(bert) && audited && within2(shallow, 0.03) && within2(deep, 0.6);
  return {pass, std::string("ordering ") + (ordered(desk) && ordered(bert) ? "holds" : "BROKEN") + " (desk and BERT-base); " +
                    "desk counts " + (audited ? "match" : "DIFFER FROM") + " the tensor audit; BERT-base shallow " +
                    fmt(shallow, 4) + "%, deep " + fmt(deep, 3) + "% (targets 0.03%, 0.6%, factor 2)"};
}

Verdict rehearsal(Grid& g) {
  bool nonnegative = true;
  std::vector<double> with, without;
  std::string per_stream;
  for (const auto& rule : kSuite) {
    std::vector<double> w, wo;
    for (std::uint64_t seed = 1; seed <= kSeeds; ++seed)
      for (int order = 1; order <= 2; ++order) {
        const Run& r = g.run(rule, cpt_rd(InitStrategy::siminit, false, 50), seed, order);
        nonnegative &= r.bwt >= 0;
        w.push_back(r.avg);
        wo.push_back(g.run(rule, cpt_rd(InitStrategy::siminit), seed, order).avg);
      }
    with.insert(with.end(), w.begin(), w.end());
    without.insert(without.end(), wo.begin(), wo.end());
    per_stream += "; " + rule + " " + fmt(mean(w)) + " vs " + fmt(mean(wo));
  }
  const double gap = mean(with) - mean(without);
  return {nonnegative && gap >= -2,
          std::string("BWT ") + (nonnegative ? ">= 0 in every run" : "NEGATIVE in some run") + "; suite Avg.F1 " +
              fmt(mean(with)) + " with rehearsal vs " + fmt(mean(without)) + " without (gap " + fmt(gap) + ")" + per_stream};
}

Verdict solvability(Grid& g, Clock::time_point start) {
  int domains = 0, solved = 0;
  double lowest = 100;
  for (const std::string rule : {"inverted", "rotated", "consistent"})
    for (std::uint64_t seed = 1; seed <= (rule == "consistent" ? 1 : kSeeds); ++seed)
      for (int order = 1; order <= 2; ++order) {
        const Run& r = g.run(rule, cpt_rd(InitStrategy::random), seed, order);
        for (const auto& s : r.result.stages) {
          ++domains;
          solved += s.full_shot_f1 >= 95;
          lowest = std::min(lowest, s.full_shot_f1);
        }
      }
  const double minutes = seconds_since(start) / 60;
  return {solved == domains && minutes < 30, std::to_string(solved) + "/" + std::to_string(domains) +
                                                 " full-shot domain results >= 95 F1 (lowest " + fmt(lowest) +
                                                 "); total wall-clock " + fmt(minutes, 1) + " min"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria on the desk-scale synthetic suite"};
  std::string config_path = CPTRD_DESK_CONFIG;
  std::string work = (fs::temp_directory_path() / "cptrd_acceptance").string();
  app.add_option("--config", config_path, "Desk experiment config")->check(CLI::ExistingFile);
  app.add_option("--work", work, "Scratch directory for the checkpoint");
  CLI11_PARSE(app, argc, argv);

  const auto start = Clock::now();
  try {
    ExperimentConfig config = load_experiment(config_path);
    if (!config.data.synth) throw ConfigError("acceptance needs a synthetic data source");
    config.output = work;
    config.checkpoint.clear();

    log("pretraining backbone (" + std::to_string(config.pretrain.steps) + " steps)");
    const PreparedData corpus = prepare_data(config);
    const PretrainReport pre = cmd_pretrain(config, corpus);
    const Backbone backbone = load_backbone(config.checkpoint_path().string());
    log("  digest " + pre.digest + ", held-out MLM loss " + fmt(pre.held_out_random, 3) + " -> " +
        fmt(pre.held_out_pretrained, 3) + " (" + fmt(seconds_since(start), 1) + " s)");

    Grid grid(config, backbone);
    std::map<int, std::pair<std::string, Verdict>> verdicts;
    verdicts[1] = {"replay zero-forgetting", replay(grid)};
    verdicts[2] = {"TPHNet consolidation", consolidation(grid)};
    verdicts[3] = {"fine-tuning forgets", forgetting(grid)};
    verdicts[4] = {"SimInit forward transfer", transfer(grid)};
    verdicts[9] = {"rehearsal parity", rehearsal(grid)};
    verdicts[5] = {"metric oracles", metric_oracles()};
    verdicts[6] = {"gradient suite", gradients()};
    verdicts[8] = {"parameter efficiency", efficiency(config.model)};
    // Last: it adds the remaining runs and then reads the clock.
    verdicts[10] = {"full-shot solvability", solvability(grid, start)};
    verdicts[7] = {"frozen backbone", frozen_audit(grid, backbone, pre.digest)};
    for (const auto& [id, v] : verdicts) report(id, v.first, v.second);
  } catch (const std::exception& e) {
    std::cout << "FAIL  acceptance aborted: " << e.what() << std::endl;
    return 1;
  }
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
