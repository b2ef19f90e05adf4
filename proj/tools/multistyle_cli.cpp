// multistyle: command-line pipeline for multi-style controlled generation
// on synthetic corpora. Each subcommand rebuilds its inputs from the config
// deterministically and writes its artifacts plus the resolved config into
// the output directory.

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/fmt/fmt.h>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "multistyle/config.hpp"
#include "multistyle/pipeline.hpp"

namespace fs = std::filesystem;
using namespace multistyle;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitError = 1;
constexpr int kExitConfig = 2;
constexpr int kExitRejected = 3;

struct Options {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string formulation;
  std::string targets;
  std::string axis;
  std::string generations;
  std::string checkpoint;
  int jobs = 1;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Context {
  ExperimentConfig cfg;
  fs::path out;
  int jobs = 1;
};

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << text;
  spdlog::debug("wrote {}", p.string());
}

void write_json(const fs::path& p, const nlohmann::json& j) { write_file(p, j.dump(2) + "\n"); }

// Loads the config, applies command-line overrides and writes the resolved
// config. Every failure here is a configuration error.
Context load_context(const Options& o) {
  Context ctx;
  try {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(read_file(o.config_path));
    } catch (const nlohmann::json::parse_error& e) {
      throw ValidationError(std::string("config is not valid JSON: ") + e.what());
    }
    ctx.cfg = experiment_config_from_json(j);
    if (o.seed) apply_seed(ctx.cfg, *o.seed);
    if (!o.formulation.empty()) ctx.cfg.reward.formulation = parse_formulation(o.formulation);
    if (!o.targets.empty()) ctx.cfg.targets = resolve_targets(ctx.cfg, o.targets);
    if (!o.axis.empty()) find_axis(ctx.cfg.stack.corpus, o.axis);
    detail::require(o.jobs >= 1, "--jobs must be >= 1");
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  ctx.out = o.out.empty() ? fs::path(ctx.cfg.output_dir) : fs::path(o.out);
  ctx.jobs = o.jobs;
  fs::create_directories(ctx.out);
  write_json(ctx.out / "config.json", to_json(ctx.cfg));
  return ctx;
}

void require_targets(const ExperimentConfig& cfg) {
  if (cfg.targets.empty()) throw ConfigError("no targets: set \"targets\" in the config or pass --targets");
}

std::vector<const StyleAxis*> selected_axes(const ExperimentConfig& cfg, const std::string& axis) {
  std::vector<const StyleAxis*> out;
  for (const auto& a : cfg.stack.corpus.axes)
    if (axis.empty() || a.name == axis) out.push_back(&a);
  return out;
}

std::string prompts_jsonl(const std::vector<Prompt>& prompts) {
  std::string out;
  for (const auto& p : prompts) out += nlohmann::json{{"tokens", p.tokens}, {"source", p.source}}.dump() + "\n";
  return out;
}

std::string records_jsonl(const std::vector<GenerationRecord>& recs) {
  std::string out;
  for (const auto& r : recs) out += to_json(r).dump() + "\n";
  return out;
}

std::string report_csv(const std::vector<EvalReport>& reports) {
  std::string out = csv_header(reports.front().targets.size()) + "\n";
  for (const auto& r : reports) out += csv_row(r) + "\n";
  return out;
}

void log_report(const EvalReport& r) {
  std::string styles;
  for (std::size_t i = 0; i < r.targets.size(); ++i)
    styles += fmt::format(" {}={:.3f}", r.targets[i].axis, r.style_accuracy[i]);
  spdlog::info("{}:{} joint={:.3f} ppl={:.2f}", r.name, styles, r.joint_accuracy, r.mean_perplexity);
}

// ---------------------------------------------------------------------------

int cmd_datagen(const Context& ctx) {
  const auto& cfg = ctx.cfg;
  const auto corpus = generate_corpus(cfg.stack.corpus);
  auto [train, held] = split_corpus(corpus, cfg.stack.heldout_fraction, derive_seed(cfg.stack.corpus.seed, 0x73706c6974ULL));
  write_file(ctx.out / "corpus.jsonl", to_jsonl(corpus));
  write_file(ctx.out / "train.jsonl", to_jsonl(train));
  write_file(ctx.out / "heldout.jsonl", to_jsonl(held));
  write_file(ctx.out / "prompts.jsonl", prompts_jsonl(eval_prompts(cfg)));
  spdlog::info("datagen: {} sequences ({} train, {} held out)", corpus.size(), train.size(), held.size());
  return kExitOk;
}

struct DiscOutputs {
  LinearDiscriminator disc;
  DiscriminatorReport report;
};

std::vector<DiscOutputs> train_selected(const Context& ctx, const std::string& axis) {
  const auto& cfg = ctx.cfg;
  const auto corpus = generate_corpus(cfg.stack.corpus);
  auto [train, held] = split_corpus(corpus, cfg.stack.heldout_fraction, derive_seed(cfg.stack.corpus.seed, 0x73706c6974ULL));
  const auto axes = selected_axes(cfg, axis);
  std::vector<DiscOutputs> out(axes.size());
  parallel_for(axes.size(), ctx.jobs, [&](std::size_t i) {
    out[i].disc = train_axis_discriminator(cfg.stack, train, held, *axes[i], &out[i].report);
  });
  return out;
}

int cmd_train_disc(const Context& ctx, const std::string& axis) {
  std::string csv = "axis,heldout_macro_f1\n";
  nlohmann::json report = nlohmann::json::array();
  for (auto& [disc, rep] : train_selected(ctx, axis)) {
    auto raw = disc;
    raw.temperature.reset();
    write_json(ctx.out / ("disc_" + rep.axis + ".json"), to_json(raw));
    csv += fmt::format("{},{:.6f}\n", rep.axis, rep.heldout_macro_f1);
    report.push_back({{"axis", rep.axis}, {"heldout_macro_f1", rep.heldout_macro_f1}});
    spdlog::info("train-disc: {} macro-F1 {:.3f}", rep.axis, rep.heldout_macro_f1);
  }
  write_file(ctx.out / "disc_report.csv", csv);
  write_json(ctx.out / "disc_report.json", report);
  return kExitOk;
}

int cmd_calibrate(const Context& ctx, const std::string& axis) {
  std::string csv = "axis,temperature,ece_before,ece_after,nll_before,nll_after\n";
  for (auto& [disc, rep] : train_selected(ctx, axis)) {
    write_json(ctx.out / ("disc_" + rep.axis + ".calibrated.json"), to_json(disc));
    write_json(ctx.out / ("calibration_" + rep.axis + ".json"), {{"axis", rep.axis},
                                                                {"temperature", rep.temperature},
                                                                {"ece_before", rep.ece_before},
                                                                {"ece_after", rep.ece_after},
                                                                {"nll_before", rep.nll_before},
                                                                {"nll_after", rep.nll_after}});
    csv += fmt::format("{},{:.6f},{:.6f},{:.6f},{:.6f},{:.6f}\n", rep.axis, rep.temperature, rep.ece_before,
                       rep.ece_after, rep.nll_before, rep.nll_after);
    spdlog::info("calibrate: {} T={:.3f} ECE {:.4f} -> {:.4f}", rep.axis, rep.temperature, rep.ece_before,
                 rep.ece_after);
  }
  write_file(ctx.out / "calibration.csv", csv);
  return kExitOk;
}

int cmd_train_rl(const Context& ctx) {
  const auto& cfg = ctx.cfg;
  require_targets(cfg);
  const auto stack = build_stack(cfg.stack);
  spdlog::info("train-rl: {} reward, targets {}", to_string(cfg.reward.formulation), targets_to_string(cfg.targets));
  const auto run = run_rl(cfg, stack, ctx.jobs, [](const UpdateRecord& r) {
    spdlog::debug("update {} reward={:.4f} kl={:.3f} beta={:.4f} hit={:.3f}", r.update, r.mean_reward, r.mean_kl,
                  r.beta, r.target_rate);
  });
  log_report(run.base);
  log_report(run.trained);

  const auto& res = run.result;
  write_json(ctx.out / "policy.json", to_json(res.policy));
  write_json(ctx.out / "values.json", to_json(res.values));
  write_file(ctx.out / "history.jsonl", to_jsonl(res.history));
  write_json(ctx.out / "validity.json",
             {{"accepted", run.validity.accepted}, {"reason", run.validity.reason}, {"final_kl", res.history.final_kl()}});
  write_file(ctx.out / "generations.jsonl", records_jsonl(run.records));
  write_file(ctx.out / "report.csv", report_csv({run.base, run.trained}));
  write_json(ctx.out / "report.json", {{"base", to_json(run.base)}, {"trained", to_json(run.trained)}});
  if (!run.validity.accepted) {
    spdlog::error("run rejected: {}", run.validity.reason);
    return kExitRejected;
  }
  spdlog::info("final KL {:.3f}: run accepted", res.history.final_kl());
  return kExitOk;
}

int cmd_pplm_decode(const Context& ctx) {
  const auto& cfg = ctx.cfg;
  require_targets(cfg);
  const auto stack = build_stack(cfg.stack);
  const auto run = run_pplm(cfg, stack, ctx.jobs);
  spdlog::info("pplm: RNN held-out perplexity {:.2f}", run.heldout_perplexity);
  nlohmann::json heads = nlohmann::json::array();
  for (std::size_t i = 0; i < run.heads.size(); ++i) {
    write_json(ctx.out / ("head_" + cfg.targets[i].axis + ".json"), to_json(run.heads[i]));
    heads.push_back({{"axis", cfg.targets[i].axis}, {"heldout_macro_f1", run.head_f1[i]}});
  }
  log_report(run.unsteered);
  log_report(run.steered);
  write_json(ctx.out / "rnn.json", to_json(run.lm));
  write_json(ctx.out / "rnn_training.json",
             {{"epoch_losses", run.epoch_losses}, {"heldout_perplexity", run.heldout_perplexity}, {"heads", heads}});
  write_file(ctx.out / "generations.jsonl", records_jsonl(run.records));
  write_file(ctx.out / "report.csv", report_csv({run.unsteered, run.steered}));
  write_json(ctx.out / "report.json", {{"unsteered", to_json(run.unsteered)}, {"pplm", to_json(run.steered)}});
  return kExitOk;
}

std::vector<Generation> read_generations(const fs::path& p) {
  std::vector<Generation> out;
  std::istringstream in(read_file(p));
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    out.push_back({j.at("prompt").get<TokenSeq>(), j.at("completion").get<TokenSeq>(), j.value("source", "")});
  }
  return out;
}

int cmd_evaluate(const Context& ctx, const Options& o) {
  const auto& cfg = ctx.cfg;
  require_targets(cfg);
  if (o.generations.empty() == o.checkpoint.empty()) throw ConfigError("evaluate needs exactly one of --generations or --checkpoint");
  const auto stack = build_stack(cfg.stack);
  std::vector<GenerationRecord> records;
  EvalReport rep;
  if (!o.generations.empty()) {
    const auto gens = read_generations(o.generations);
    for (const auto& g : gens) {
      for (Token t : g.completion)
        if (t < 0 || t >= cfg.stack.corpus.vocab_size) throw ValidationError("generation token out of vocabulary");
    }
    rep = full_report(gens, stack.discriminators, cfg.targets, stack.reference, &records, "generations");
  } else {
    const auto policy = policy_from_json(nlohmann::json::parse(read_file(o.checkpoint)));
    detail::require(policy.vocab_size() == cfg.stack.corpus.vocab_size, "checkpoint vocabulary does not match the config");
    rep = evaluate_policy(cfg, stack, policy, eval_prompts(cfg), "checkpoint", ctx.jobs, &records);
  }
  log_report(rep);
  write_file(ctx.out / "records.jsonl", records_jsonl(records));
  write_file(ctx.out / "report.csv", report_csv({rep}));
  write_json(ctx.out / "report.json", to_json(rep));
  return kExitOk;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string file_tag(std::string s) {
  for (char& c : s)
    if (c == '=' || c == ',') c = c == '=' ? '-' : '_';
  return s;
}

int cmd_sweep(const Context& ctx) {
  const auto& base_cfg = ctx.cfg;
  const auto& sw = base_cfg.sweep;
  if (sw.formulations.empty() || sw.target_sets.empty() || sw.seeds.empty())
    throw ConfigError("sweep needs nonempty sweep.formulations, sweep.target_sets and sweep.seeds");

  // Seed-specific configs and stacks are shared by every cell with that seed.
  std::vector<ExperimentConfig> seed_cfgs;
  for (auto s : sw.seeds) {
    seed_cfgs.push_back(base_cfg);
    apply_seed(seed_cfgs.back(), s);
  }
  std::vector<Stack> stacks(sw.seeds.size());
  parallel_for(stacks.size(), ctx.jobs, [&](std::size_t i) { stacks[i] = build_stack(seed_cfgs[i].stack); });
  spdlog::info("sweep: {} cells", sw.formulations.size() * sw.target_sets.size() * sw.seeds.size());

  struct Cell {
    std::size_t f, t, s;
    EvalReport report;
    double final_kl = 0.0;
    bool accepted = true;
    std::string history;
  };
  std::vector<Cell> cells;
  for (std::size_t t = 0; t < sw.target_sets.size(); ++t)
    for (std::size_t f = 0; f < sw.formulations.size(); ++f)
      for (std::size_t s = 0; s < sw.seeds.size(); ++s) cells.push_back({f, t, s, {}, 0.0, true, ""});

  parallel_for(cells.size(), ctx.jobs, [&](std::size_t i) {
    auto& c = cells[i];
    ExperimentConfig cfg = seed_cfgs[c.s];
    cfg.targets = sw.target_sets[c.t];
    cfg.reward.formulation = sw.formulations[c.f];
    const auto run = run_rl(cfg, stacks[c.s]);
    c.final_kl = run.result.history.final_kl();
    c.accepted = run.validity.accepted;
    c.history = to_jsonl(run.result.history);
    c.report = run.trained;
    spdlog::info("cell {} {} seed {}: joint {:.3f} kl {:.2f}{}", to_string(cfg.reward.formulation),
                 targets_to_string(cfg.targets), sw.seeds[c.s], c.report.joint_accuracy, c.final_kl,
                 c.accepted ? "" : " REJECTED");
  });

  std::size_t max_targets = 0;
  for (const auto& t : sw.target_sets) max_targets = std::max(max_targets, t.size());
  std::string csv = "formulation,targets,seed,joint_accuracy";
  for (std::size_t i = 0; i < max_targets; ++i) csv += ",style_acc_" + std::to_string(i);
  csv += ",mean_perplexity,final_kl,valid\n";
  auto style_cols = [&](const std::vector<double>& acc) {
    std::string s;
    for (std::size_t i = 0; i < max_targets; ++i) s += i < acc.size() ? fmt::format(",{:.6f}", acc[i]) : ",";
    return s;
  };
  fs::create_directories(ctx.out / "cells");
  nlohmann::json summary = nlohmann::json::array();
  bool all_valid = true;
  for (const auto& c : cells) {
    const auto name = std::string(to_string(sw.formulations[c.f]));
    const auto tg = targets_to_string(sw.target_sets[c.t]);
    csv += fmt::format("{},\"{}\",{},{:.6f}{},{:.6f},{:.6f},{}\n", name, tg, sw.seeds[c.s], c.report.joint_accuracy,
                       style_cols(c.report.style_accuracy), c.report.mean_perplexity, c.final_kl,
                       c.accepted ? "yes" : "no");
    write_file(ctx.out / "cells" / fmt::format("{}__{}__{}.jsonl", name, file_tag(tg), sw.seeds[c.s]), c.history);
    summary.push_back({{"formulation", name},
                       {"targets", tg},
                       {"seed", sw.seeds[c.s]},
                       {"final_kl", c.final_kl},
                       {"valid", c.accepted},
                       {"report", to_json(c.report)}});
    all_valid = all_valid && c.accepted;
  }
  // Medians over seeds of accepted runs only; rejected runs stay listed above.
  for (std::size_t t = 0; t < sw.target_sets.size(); ++t) {
    for (std::size_t f = 0; f < sw.formulations.size(); ++f) {
      std::vector<double> joint, ppl, kl;
      std::vector<std::vector<double>> acc(sw.target_sets[t].size());
      for (const auto& c : cells) {
        if (c.t != t || c.f != f || !c.accepted) continue;
        joint.push_back(c.report.joint_accuracy);
        ppl.push_back(c.report.mean_perplexity);
        kl.push_back(c.final_kl);
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i].push_back(c.report.style_accuracy[i]);
      }
      const auto name = std::string(to_string(sw.formulations[f]));
      const auto tg = targets_to_string(sw.target_sets[t]);
      if (joint.empty()) {
        csv += fmt::format("{},\"{}\",median,{},,,none\n", name, tg, std::string(max_targets, ','));
        continue;
      }
      std::vector<double> med_acc;
      for (auto& a : acc) med_acc.push_back(median(a));
      csv += fmt::format("{},\"{}\",median,{:.6f}{},{:.6f},{:.6f},{}\n", name, tg, median(joint), style_cols(med_acc),
                         median(ppl), median(kl), joint.size());
    }
  }
  write_file(ctx.out / "sweep.csv", csv);
  write_json(ctx.out / "sweep.json", summary);
  if (!all_valid) {
    spdlog::error("sweep: at least one run was rejected (final KL above {})", base_cfg.ppo.kl_reject_threshold);
    return kExitRejected;
  }
  return kExitOk;
}

void setup_logging() {
  auto logger = spdlog::stderr_color_mt("multistyle");
  spdlog::set_default_logger(logger);
  spdlog::set_pattern("[%l] %v");
  const char* env = std::getenv("MULTISTYLE_LOG");
  spdlog::set_level(env ? spdlog::level::from_str(env) : spdlog::level::info);
}

}  // namespace

int main(int argc, char** argv) {
  setup_logging();
  CLI::App app{"Multi-style controlled generation on synthetic corpora"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config_path, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", o.seed, "global seed (overrides the config)");
    sub->add_option("--out", o.out, "output directory (overrides the config)");
    sub->add_option("--jobs", o.jobs, "worker threads")->check(CLI::PositiveNumber);
  };
  auto with_targets = [&](CLI::App* sub) {
    sub->add_option("--targets", o.targets, "axis=class,... (overrides the config)");
  };

  auto* datagen = app.add_subcommand("datagen", "generate the synthetic corpus and prompts");
  auto* train_disc = app.add_subcommand("train-disc", "train style discriminators");
  auto* calibrate = app.add_subcommand("calibrate", "fit discriminator temperatures");
  auto* train_rl = app.add_subcommand("train-rl", "PPO fine-tuning of the tabular policy");
  auto* pplm = app.add_subcommand("pplm-decode", "gradient-steered decoding with a small RNN");
  auto* evaluate = app.add_subcommand("evaluate", "evaluate generations or a policy checkpoint");
  auto* sweep = app.add_subcommand("sweep", "formulations x target sets x seeds");
  for (auto* s : {datagen, train_disc, calibrate, train_rl, pplm, evaluate, sweep}) common(s);
  for (auto* s : {train_disc, calibrate}) s->add_option("--axis", o.axis, "single axis (default: all)");
  for (auto* s : {train_rl, pplm, evaluate}) with_targets(s);
  train_rl->add_option("--formulation", o.formulation, "reward formulation (overrides the config)");
  evaluate->add_option("--generations", o.generations, "JSONL with prompt/completion/source")->check(CLI::ExistingFile);
  evaluate->add_option("--checkpoint", o.checkpoint, "policy checkpoint (JSON)")->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);

  try {
    const Context ctx = load_context(o);
    if (datagen->parsed()) return cmd_datagen(ctx);
    if (train_disc->parsed()) return cmd_train_disc(ctx, o.axis);
    if (calibrate->parsed()) return cmd_calibrate(ctx, o.axis);
    if (train_rl->parsed()) return cmd_train_rl(ctx);
    if (pplm->parsed()) return cmd_pplm_decode(ctx);
    if (evaluate->parsed()) return cmd_evaluate(ctx, o);
    if (sweep->parsed()) return cmd_sweep(ctx);
  } catch (const ConfigError& e) {
    spdlog::error("invalid config: {}", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kExitError;
  }
  return kExitError;
}
