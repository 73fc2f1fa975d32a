// latf: data generators, training, evaluation and ablations for the
// lookahead sequence model, wired for reproducibility: every run writes
// a manifest that replays it exactly (see `latf rerun`).

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <malloc.h>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "latf/ablate.hpp"
#include "latf/harness.hpp"
#include "latf/infill.hpp"
#include "latf/sat.hpp"
#include "latf/words.hpp"

namespace fs = std::filesystem;
using namespace latf;

namespace {

constexpr const char* kOutRootEnv = "LATF_OUT_ROOT";

// distinguishes bad input (exit 1) from internal faults (exit 2)
struct UserError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

fs::path resolve_out(const std::string& out) {
  fs::path p(out);
  if (p.is_relative()) {
    if (const char* root = std::getenv(kOutRootEnv)) p = fs::path(root) / p;
  }
  return p;
}

uint64_t ensure_seed(uint64_t seed, bool seed_given) {
  if (seed_given) return seed;
  // auto-drawn, then recorded in the manifest: runs stay reproducible
  std::random_device rd;
  return (static_cast<uint64_t>(rd()) << 32) ^ rd();
}

std::string run_id_from(const Manifest& args) {
  uint64_t h = tag("run");
  for (const auto& [k, v] : args.items()) {
    if (k == "arg.out") continue;  // output location must not change results
    h = mix_u64(h ^ tag(k));
    h = mix_u64(h ^ tag(v));
  }
  char buf[20];
  snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void write_manifest(const Manifest& args, const fs::path& dir) {
  Manifest m;
  m.set("manifest_version", static_cast<int64_t>(1));
  m.set("format_version", static_cast<int64_t>(kCheckpointVersion));
  m.set("run_id", run_id_from(args));
  for (const auto& [k, v] : args.items()) m.set(k, v);
  m.save((dir / "manifest.txt").string());
}

std::vector<double> parse_double_list(const std::string& csv) {
  std::vector<double> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(std::stod(item));
  }
  if (out.empty()) throw UserError("empty list: '" + csv + "'");
  return out;
}

std::vector<int> parse_int_list(const std::string& csv) {
  std::vector<int> out;
  for (double v : parse_double_list(csv)) out.push_back(static_cast<int>(v));
  return out;
}

// ------------------------------------------------------------------
// subcommand bodies, reusable from `rerun`
// ------------------------------------------------------------------

int run_gen_sat(const Manifest& a) {
  fs::path out = resolve_out(a.get("arg.out"));
  int n = static_cast<int>(a.get_int("arg.n"));
  int m = static_cast<int>(a.get_int("arg.m"));
  int k = static_cast<int>(a.get_int("arg.k"));
  double temp = a.get_double("arg.temp");
  int prompt_len = static_cast<int>(a.get_int("arg.prompt_len"));
  uint64_t seed = a.get_u64("arg.seed");

  Rng rng(derive_seed(seed, {tag("gen_sat")}));
  SatInstance inst = sample_random_ksat(n, m, k, rng);
  BoltzmannOracle oracle(inst, temp);
  Datasets data = make_sat_dataset(oracle, prompt_len, seed);

  fs::create_directories(out);
  save_dimacs(inst, (out / "instance.cnf").string());
  save_dataset_dir(data, out.string());
  write_manifest(a, out);
  std::cout << "wrote " << data.train.size() << "/" << data.valid.size() << "/"
            << data.test.size() << " examples under " << out.string() << "\n";
  return 0;
}

int run_gen_infill(const Manifest& a) {
  fs::path out = resolve_out(a.get("arg.out"));
  InfillOptions opt;
  opt.mask_p = a.get_double("arg.mask_p");
  opt.min_len = static_cast<int>(a.get_int("arg.min_len"));
  opt.max_len = static_cast<int>(a.get_int("arg.max_len"));
  opt.train_n = static_cast<int>(a.get_int("arg.train_n"));
  opt.valid_n = static_cast<int>(a.get_int("arg.valid_n"));
  opt.test_n = static_cast<int>(a.get_int("arg.test_n"));
  uint64_t seed = a.get_u64("arg.seed");

  std::vector<std::string> words = read_wordlist(a.get("arg.words"));
  InfillStats stats;
  Datasets data = gen_infill_dataset(words, opt, seed, &stats);
  fs::create_directories(out);
  save_dataset_dir(data, out.string());
  write_manifest(a, out);
  std::cout << "kept " << stats.kept_words << " of " << stats.raw_words
            << " words (" << format_double(100.0 * stats.retention())
            << "%); splits " << data.train.size() << "/" << data.valid.size()
            << "/" << data.test.size() << "\n";
  return 0;
}

int run_harvest_words(const Manifest& a) {
  fs::path out = resolve_out(a.get("arg.out"));
  std::vector<std::string> roots;
  std::stringstream ss(a.get("arg.roots"));
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) roots.push_back(item);
  }
  std::vector<std::string> words =
      harvest_words(roots, static_cast<int>(a.get_int("arg.min_len")),
                    static_cast<int>(a.get_int("arg.max_len")));
  if (words.empty()) throw UserError("no words found under the given roots");
  fs::create_directories(out.parent_path().empty() ? "." : out.parent_path());
  std::ofstream os(out);
  for (const std::string& w : words) os << w << "\n";
  std::cout << "harvested " << words.size() << " words to " << out.string()
            << "\n";
  return 0;
}

int run_ingest_tsv(const Manifest& a) {
  fs::path out = resolve_out(a.get("arg.out"));
  Datasets data = ingest_tsv(a.get("arg.train"), a.get_or("arg.valid", ""),
                             a.get_or("arg.test", ""));
  fs::create_directories(out);
  save_dataset_dir(data, out.string());
  write_manifest(a, out);
  std::cout << "vocab " << data.vocab.size() << "; splits "
            << data.train.size() << "/" << data.valid.size() << "/"
            << data.test.size() << "\n";
  return 0;
}

int run_train(const Manifest& a, ModelKind kind) {
  fs::path out = resolve_out(a.get("arg.out"));
  Datasets data = load_dataset_dir(a.get("arg.data"));
  ExperimentConfig cfg = ExperimentConfig::load(a.get("arg.config"));
  cfg.seed = a.get_u64("arg.seed");

  ModelBundle base;
  if (kind == ModelKind::lookahead) {
    base = load_bundle(a.get("arg.base"));
    if (base.kind != ModelKind::base)
      throw UserError("--base must point at a base checkpoint");
  }
  TrainResult result = train_model(
      kind, cfg, data, kind == ModelKind::lookahead ? &base : nullptr,
      &std::cerr);

  fs::create_directories(out);
  Manifest extra;
  for (const auto& [k, v] : a.items()) extra.set(k, v);
  extra.set("run_id", run_id_from(a));
  extra.set("best_epoch", static_cast<int64_t>(result.best_epoch));
  extra.set("train_steps", static_cast<int64_t>(result.steps));
  extra.set("epochs_trained", static_cast<int64_t>(result.log.size()));
  save_bundle(result.bundle, out.string(), extra);

  std::ofstream log((out / "train_log.csv").string());
  log << "epoch,train_loss,valid_loss,valid_accuracy\n";
  for (const EpochLog& e : result.log)
    log << e.epoch << "," << format_double(e.train_loss) << ","
        << format_double(e.valid_loss) << "," << format_double(e.valid_accuracy)
        << "\n";
  std::cout << "best epoch " << result.best_epoch << " valid loss "
            << format_double(result.log.empty()
                                 ? 0.0
                                 : result.log[static_cast<size_t>(result.best_epoch)]
                                       .valid_loss)
            << "\n";
  return 0;
}

const Dataset& pick_split(const Datasets& data, const std::string& split) {
  if (split == "train") return data.train;
  if (split == "valid") return data.valid;
  if (split == "test") return data.test;
  throw UserError("unknown split '" + split + "'");
}

int run_eval(const Manifest& a) {
  fs::path out = resolve_out(a.get("arg.out"));
  ModelBundle bundle = load_bundle(a.get("arg.ckpt"));
  Datasets data = load_dataset_dir(a.get("arg.data"));
  if (bundle.vocab_hash != data.vocab.content_hash())
    throw UserError("checkpoint vocabulary does not match the dataset");
  const Dataset& ds = pick_split(data, a.get("arg.split"));
  uint64_t seed = a.get_u64("arg.seed");

  LookaheadConfig cfg = bundle.lookcfg;
  if (a.has("arg.tau")) cfg.tau = a.get_double("arg.tau");
  if (a.has("arg.rollouts"))
    cfg.n_rollouts = static_cast<int>(a.get_int("arg.rollouts"));
  if (a.has("arg.rollout_len"))
    cfg.rollout_len = static_cast<int>(a.get_int("arg.rollout_len"));

  MetricsReport report = evaluate(bundle, ds, cfg, seed);

  fs::create_directories(out);
  std::ofstream csv((out / "metrics.csv").string());
  csv << metrics_csv_header() << "\n"
      << metrics_csv_row(run_id_from(a), a.get("arg.split"), bundle,
                         cfg.n_rollouts, cfg.rollout_len, cfg.tau, seed, report)
      << "\n";
  std::ofstream timing((out / "timings.txt").string());
  timing << "scored_tokens=" << report.total_tokens << "\n"
         << "wall_seconds=" << format_double(report.wall_seconds) << "\n"
         << "seconds_per_token="
         << format_double(report.total_tokens
                              ? report.wall_seconds /
                                    static_cast<double>(report.total_tokens)
                              : 0.0)
         << "\n";
  write_manifest(a, out);
  std::cout << "loss " << format_double(report.loss_per_token) << " accuracy "
            << format_double(report.accuracy) << "\n";
  return 0;
}

int run_ablate(const Manifest& a) {
  fs::path out = resolve_out(a.get("arg.out"));
  ModelBundle bundle = load_bundle(a.get("arg.ckpt"));
  Datasets data = load_dataset_dir(a.get("arg.data"));
  if (bundle.vocab_hash != data.vocab.content_hash())
    throw UserError("checkpoint vocabulary does not match the dataset");
  const Dataset& ds = pick_split(data, a.get("arg.split"));
  uint64_t seed = a.get_u64("arg.seed");

  AblationGrid grid;
  grid.taus = parse_double_list(a.get("arg.taus"));
  grid.rollout_counts = parse_int_list(a.get("arg.rollout_counts"));
  grid.rollout_lens = parse_int_list(a.get("arg.rollout_lens"));

  fs::create_directories(out);
  std::ofstream rollout_log;
  bool dump = a.get_or("arg.dump_rollouts", "0") == "1";
  if (dump) rollout_log.open((out / "rollouts.txt").string());

  std::vector<AblationRow> rows =
      ablation_sweep(bundle, ds, grid, seed, dump ? &rollout_log : nullptr);

  std::ofstream csv((out / "ablation.csv").string());
  csv << metrics_csv_header() << "\n";
  std::string run_id = run_id_from(a);
  for (const AblationRow& r : rows)
    csv << metrics_csv_row(run_id, a.get("arg.split"), bundle, r.m_rollouts,
                           r.rollout_len, r.tau, seed, r.report)
        << "\n";
  write_manifest(a, out);
  std::cout << rows.size() << " grid points -> " << (out / "ablation.csv").string()
            << "\n";
  return 0;
}

int dispatch(const std::string& cmd, const Manifest& args) {
  if (cmd == "gen-sat") return run_gen_sat(args);
  if (cmd == "gen-infill") return run_gen_infill(args);
  if (cmd == "harvest-words") return run_harvest_words(args);
  if (cmd == "ingest-tsv") return run_ingest_tsv(args);
  if (cmd == "train-base") return run_train(args, ModelKind::base);
  if (cmd == "train-lookahead") return run_train(args, ModelKind::lookahead);
  if (cmd == "eval") return run_eval(args);
  if (cmd == "ablate") return run_ablate(args);
  throw UserError("manifest names unknown subcommand '" + cmd + "'");
}

}  // namespace

int main(int argc, char** argv) {
  // big transient graph buffers churn; keep them on the free list
  mallopt(M_MMAP_THRESHOLD, 1 << 30);

  CLI::App app{"lookahead transformer lab"};
  app.require_subcommand(1);

  // shared option state
  std::string out, data_dir, config_path, ckpt, base, split = "test";
  std::string words_path, tsv_train, tsv_valid, tsv_test, roots;
  std::string taus = "1", rollout_counts = "5", rollout_lens = "5";
  std::string manifest_path;
  uint64_t seed = 0;
  bool seed_given = false;
  int n_vars = 15, m_clauses = 64, k_lits = 3, prompt_len = 5;
  double temp = 2.0 / 3.0, mask_p = 0.4, tau_override = -1.0;
  int min_len = 5, max_len = 15;
  int train_n = 201000, valid_n = 10000, test_n = 10000;
  int rollouts_override = 0, rollout_len_override = 0;
  bool dump_rollouts_flag = false;

  auto add_seed = [&](CLI::App* cmd) {
    cmd->add_option("--seed", seed, "rng seed (auto-drawn and recorded if omitted)")
        ->each([&](const std::string&) { seed_given = true; });
  };
  auto add_out = [&](CLI::App* cmd) {
    cmd->add_option("--out", out,
                    "output directory (relative paths resolve under $" +
                        std::string(kOutRootEnv) + ")")
        ->required();
  };

  CLI::App* gen_sat = app.add_subcommand("gen-sat", "sample a random k-SAT task");
  gen_sat->add_option("--n", n_vars, "variable count");
  gen_sat->add_option("--m", m_clauses, "clause count");
  gen_sat->add_option("--k", k_lits, "literals per clause");
  gen_sat->add_option("--temp", temp, "Boltzmann temperature");
  gen_sat->add_option("--prompt-len", prompt_len, "prompt bits");
  add_seed(gen_sat);
  add_out(gen_sat);

  CLI::App* gen_infill = app.add_subcommand("gen-infill", "letter infilling dataset");
  gen_infill->add_option("--words", words_path, "wordlist, one word per line")
      ->required();
  gen_infill->add_option("--mask-p", mask_p, "mask probability");
  gen_infill->add_option("--min-len", min_len, "shortest word kept");
  gen_infill->add_option("--max-len", max_len, "longest word kept");
  gen_infill->add_option("--train-n", train_n, "training words");
  gen_infill->add_option("--valid-n", valid_n, "validation words");
  gen_infill->add_option("--test-n", test_n, "test words");
  add_seed(gen_infill);
  add_out(gen_infill);

  CLI::App* harvest = app.add_subcommand(
      "harvest-words", "collect alphabetic tokens from a directory tree");
  harvest->add_option("--roots", roots, "comma-separated directories")->required();
  harvest->add_option("--min-len", min_len, "shortest word kept");
  harvest->add_option("--max-len", max_len, "longest word kept");
  add_out(harvest);

  CLI::App* ingest = app.add_subcommand("ingest-tsv", "tab-separated seq2seq data");
  ingest->add_option("--train", tsv_train, "training tsv")->required();
  ingest->add_option("--valid", tsv_valid, "validation tsv");
  ingest->add_option("--test", tsv_test, "test tsv");
  add_out(ingest);

  CLI::App* train_base = app.add_subcommand("train-base", "train a causal baseline");
  train_base->add_option("--data", data_dir, "dataset directory")->required();
  train_base->add_option("--config", config_path, "key=value experiment config")
      ->required();
  add_seed(train_base);
  add_out(train_base);

  CLI::App* train_look =
      app.add_subcommand("train-lookahead", "train a lookahead model");
  train_look->add_option("--data", data_dir, "dataset directory")->required();
  train_look->add_option("--config", config_path, "key=value experiment config")
      ->required();
  train_look->add_option("--base", base, "base checkpoint directory")->required();
  add_seed(train_look);
  add_out(train_look);

  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  eval_cmd->add_option("--ckpt", ckpt, "checkpoint directory")->required();
  eval_cmd->add_option("--data", data_dir, "dataset directory")->required();
  eval_cmd->add_option("--split", split, "train|valid|test");
  eval_cmd->add_option("--tau", tau_override, "proposal temperature override");
  eval_cmd->add_option("--rollouts", rollouts_override, "rollout count override");
  eval_cmd->add_option("--rollout-len", rollout_len_override,
                       "rollout length override");
  add_seed(eval_cmd);
  add_out(eval_cmd);

  CLI::App* ablate_cmd =
      app.add_subcommand("ablate", "evaluation-only rollout/temperature sweep");
  ablate_cmd->add_option("--ckpt", ckpt, "lookahead checkpoint directory")
      ->required();
  ablate_cmd->add_option("--data", data_dir, "dataset directory")->required();
  ablate_cmd->add_option("--split", split, "train|valid|test");
  ablate_cmd->add_option("--taus", taus, "comma-separated temperatures");
  ablate_cmd->add_option("--rollout-counts", rollout_counts,
                         "comma-separated M values");
  ablate_cmd->add_option("--rollout-lens", rollout_lens,
                         "comma-separated N values");
  ablate_cmd->add_flag("--dump-rollouts", dump_rollouts_flag,
                       "log sampled rollouts for the first example");
  add_seed(ablate_cmd);
  add_out(ablate_cmd);

  CLI::App* rerun = app.add_subcommand("rerun", "replay a run from its manifest");
  rerun->add_option("--manifest", manifest_path, "manifest.txt of a prior run")
      ->required();
  rerun->add_option("--out", out, "new output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    Manifest args;
    std::string cmd;
    if (gen_sat->parsed()) {
      cmd = "gen-sat";
      args.set("arg.n", static_cast<int64_t>(n_vars));
      args.set("arg.m", static_cast<int64_t>(m_clauses));
      args.set("arg.k", static_cast<int64_t>(k_lits));
      args.set("arg.temp", temp);
      args.set("arg.prompt_len", static_cast<int64_t>(prompt_len));
      args.set("arg.seed", ensure_seed(seed, seed_given));
      args.set("arg.out", out);
    } else if (gen_infill->parsed()) {
      cmd = "gen-infill";
      args.set("arg.words", words_path);
      args.set("arg.mask_p", mask_p);
      args.set("arg.min_len", static_cast<int64_t>(min_len));
      args.set("arg.max_len", static_cast<int64_t>(max_len));
      args.set("arg.train_n", static_cast<int64_t>(train_n));
      args.set("arg.valid_n", static_cast<int64_t>(valid_n));
      args.set("arg.test_n", static_cast<int64_t>(test_n));
      args.set("arg.seed", ensure_seed(seed, seed_given));
      args.set("arg.out", out);
    } else if (harvest->parsed()) {
      cmd = "harvest-words";
      args.set("arg.roots", roots);
      args.set("arg.min_len", static_cast<int64_t>(min_len));
      args.set("arg.max_len", static_cast<int64_t>(max_len));
      args.set("arg.out", out);
    } else if (ingest->parsed()) {
      cmd = "ingest-tsv";
      args.set("arg.train", tsv_train);
      if (!tsv_valid.empty()) args.set("arg.valid", tsv_valid);
      if (!tsv_test.empty()) args.set("arg.test", tsv_test);
      args.set("arg.out", out);
    } else if (train_base->parsed() || train_look->parsed()) {
      cmd = train_base->parsed() ? "train-base" : "train-lookahead";
      args.set("arg.data", data_dir);
      args.set("arg.config", config_path);
      if (train_look->parsed()) args.set("arg.base", base);
      uint64_t s = seed_given ? seed : 0;
      if (!seed_given) {
        ExperimentConfig cfg = ExperimentConfig::load(config_path);
        s = cfg.seed ? cfg.seed : ensure_seed(0, false);
      }
      args.set("arg.seed", s);
      args.set("arg.out", out);
    } else if (eval_cmd->parsed()) {
      cmd = "eval";
      args.set("arg.ckpt", ckpt);
      args.set("arg.data", data_dir);
      args.set("arg.split", split);
      if (eval_cmd->count("--tau")) args.set("arg.tau", tau_override);
      if (eval_cmd->count("--rollouts"))
        args.set("arg.rollouts", static_cast<int64_t>(rollouts_override));
      if (eval_cmd->count("--rollout-len"))
        args.set("arg.rollout_len", static_cast<int64_t>(rollout_len_override));
      args.set("arg.seed", ensure_seed(seed, seed_given));
      args.set("arg.out", out);
    } else if (ablate_cmd->parsed()) {
      cmd = "ablate";
      args.set("arg.ckpt", ckpt);
      args.set("arg.data", data_dir);
      args.set("arg.split", split);
      args.set("arg.taus", taus);
      args.set("arg.rollout_counts", rollout_counts);
      args.set("arg.rollout_lens", rollout_lens);
      if (dump_rollouts_flag) args.set("arg.dump_rollouts", "1");
      args.set("arg.seed", ensure_seed(seed, seed_given));
      args.set("arg.out", out);
    } else if (rerun->parsed()) {
      Manifest prior = Manifest::load(manifest_path);
      cmd = prior.get("command");
      for (const auto& [k, v] : prior.items())
        if (k.rfind("arg.", 0) == 0) args.set(k, v);
      args.set("arg.out", out);
      args.set("command", cmd);
      return dispatch(cmd, args);
    }
    args.set("command", cmd);
    return dispatch(cmd, args);
  } catch (const UserError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::runtime_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 2;
  }
}
