// moebal: command-line front end for training, sweeps, load metrics and the
// Expert Choice leakage tools.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <iterator>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "moebal/errors.hpp"
#include "moebal/experiment.hpp"
#include "moebal/leakage.hpp"
#include "moebal/metrics.hpp"
#include "moebal/plot.hpp"

using namespace moebal;
namespace fs = std::filesystem;

namespace {

struct ModelFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string strategy, update_rule, bias_form, gate;

  void attach(CLI::App* app) {
    app->add_option("--config", config, "key = value experiment file");
    app->add_option("--seed", seed, "train this seed only");
    app->add_option("--out", out, "output directory");
    app->add_option("--strategy", strategy, "vanilla|aux|loss-free|ec");
    app->add_option("--update-rule", update_rule, "sign|prop");
    app->add_option("--bias-form", bias_form, "add|mul");
    app->add_option("--gate", gate, "sigmoid|softmax");
  }

  // Flags override file keys; the merged text goes through the same parser
  // so defaults that depend on other keys still apply.
  ExperimentConfig resolve() const {
    KeyValues kvs;
    if (!config.empty()) {
      std::ifstream f(config);
      if (!f) throw IoError(config + ": cannot open config");
      try {
        kvs = parse_key_values(std::string(std::istreambuf_iterator<char>(f), {}));
      } catch (const ConfigError& e) {
        throw ConfigError(config + ": " + e.what());
      }
    }
    auto set = [&](const std::string& key, const std::string& value) {
      for (auto& p : kvs)
        if (p.first == key) {
          p.second = value;
          return;
        }
      kvs.emplace_back(key, value);
    };
    if (seed) {
      std::erase_if(kvs, [](const auto& p) { return p.first == "seeds"; });
      set("seed", std::to_string(*seed));
    }
    if (!out.empty()) set("output_dir", out);
    if (!strategy.empty()) set("strategy", strategy);
    if (!update_rule.empty()) set("update_rule", update_rule);
    if (!bias_form.empty()) set("bias_form", bias_form);
    if (!gate.empty()) set("gate", gate);
    try {
      return ExperimentConfig::from_text(format_key_values(kvs));
    } catch (const ConfigError& e) {
      throw ConfigError((config.empty() ? std::string("<flags>") : config) + ": " + e.what());
    }
  }
};

void print_summary(const RunResult& r) {
  const auto& s = r.summary;
  std::cout << s.run_name << " seed=" << s.seed << " strategy=" << to_string(s.strategy)
            << " steps=" << s.steps << " perplexity=" << kv::from_double(s.perplexity)
            << " maxvio_global=" << kv::from_double(s.maxvio_global)
            << " final_lm_loss=" << kv::from_double(s.final_lm_loss);
  if (!r.dir.empty()) std::cout << " dir=" << r.dir;
  std::cout << '\n';
}

std::vector<double> parse_doubles(const std::string& name, const std::string& text) {
  return kv::to_double_list(name, text);
}

std::vector<bool> parse_bits(const std::string& s) {
  std::vector<bool> out;
  for (char c : s) {
    if (c != '0' && c != '1') throw ConfigError("message must be a string of 0/1 characters");
    out.push_back(c == '1');
  }
  return out;
}

std::string bits_str(const std::vector<bool>& b) {
  std::string s;
  for (bool v : b) s += v ? '1' : '0';
  return s;
}

// token_index,expert_index[,gate_weight] rows -> per-expert counts.
std::vector<std::int64_t> counts_from_assignments(const std::string& path, std::size_t experts) {
  const auto t = read_csv(path);
  const auto ec = t.column("expert_index");
  std::size_t n = experts;
  for (const auto& row : t.rows) {
    const double e = row[ec];
    if (e < 0 || e != static_cast<double>(static_cast<std::int64_t>(e)))
      throw IoError(path + ": bad expert_index " + kv::from_double(e));
    if (experts == 0) n = std::max(n, static_cast<std::size_t>(e) + 1);
    else if (static_cast<std::size_t>(e) >= experts)
      throw ContractError(path + ": expert_index " + kv::from_double(e) + " >= --experts");
  }
  std::vector<std::int64_t> counts(n, 0);
  for (const auto& row : t.rows) ++counts[static_cast<std::size_t>(row[ec])];
  return counts;
}

const char* error_kind(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return "config";
  if (dynamic_cast<const DimensionError*>(&e)) return "dimension";
  if (dynamic_cast<const ContractError*>(&e)) return "contract";
  if (dynamic_cast<const NumericError*>(&e)) return "numeric";
  if (dynamic_cast<const IoError*>(&e)) return "io";
  return "internal";
}

std::string one_line(std::string s) {
  for (char& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mixture-of-Experts load balancing experiments"};
  app.require_subcommand(1);

  ModelFlags train_flags;
  auto* train = app.add_subcommand("train", "train every configured seed");
  train_flags.attach(train);

  ModelFlags eval_flags;
  std::string eval_ckpt;
  auto* eval = app.add_subcommand("eval", "score a checkpoint on the validation split");
  eval_flags.attach(eval);
  eval->add_option("checkpoint", eval_ckpt, "checkpoint.bin")->required();

  ModelFlags su_flags;
  std::string su_values = "1e-4,1e-3,1e-2";
  auto* sweep_u = app.add_subcommand("sweep-u", "loss-free runs over bias update rates");
  su_flags.attach(sweep_u);
  sweep_u->add_option("--values", su_values, "comma-separated update rates");

  ModelFlags sa_flags;
  std::string sa_values = "0,1e-4,1e-3,1e-2";
  auto* sweep_a = app.add_subcommand("sweep-alpha", "auxiliary-loss runs over alpha");
  sa_flags.attach(sweep_a);
  sweep_a->add_option("--values", sa_values, "comma-separated alpha values");

  std::string mv_counts, mv_assign;
  std::size_t mv_experts = 0;
  auto* mv = app.add_subcommand("maxvio", "MaxVio of a load vector or assignment CSV");
  auto* mv_c = mv->add_option("--counts", mv_counts, "comma-separated per-expert loads");
  auto* mv_a = mv->add_option("--assignments", mv_assign, "CSV with an expert_index column");
  mv->add_option("--experts", mv_experts, "expert count (default: inferred)");
  mv_c->excludes(mv_a);

  double lb_k = 2.0;
  std::size_t lb_n = 16, lb_layers = 1, lb_tokens = 0;
  auto* lb = app.add_subcommand("leakage-bound", "bits per token an EC assignment can leak");
  lb->add_option("--k", lb_k, "activated experts per token");
  lb->add_option("--experts", lb_n, "total experts");
  lb->add_option("--layers", lb_layers, "MoE layers");
  lb->add_option("--tokens", lb_tokens, "also report exact bits for this chunk length");

  std::size_t lc_n = 16, lc_k = 2, lc_t = 64, lc_bits = 8, lc_chunk = 0;
  std::uint64_t lc_seed = 1;
  std::string lc_message;
  bool lc_shuffle = false;
  auto* lc = app.add_subcommand("leakage-channel", "send bits from later to earlier tokens");
  lc->add_option("--experts", lc_n);
  lc->add_option("--k", lc_k);
  lc->add_option("--tokens", lc_t);
  lc->add_option("--message", lc_message, "0/1 string (default: random of --bits)");
  lc->add_option("--bits", lc_bits, "random message length");
  lc->add_option("--seed", lc_seed, "seed for the random message and shuffle");
  lc->add_option("--chunk", lc_chunk, "EC chunk size (0: whole sequence)");
  lc->add_flag("--shuffle", lc_shuffle, "shuffle tokens before chunking");

  ModelFlags cp_flags;
  std::string cp_chunks = "0,8";
  auto* cp = app.add_subcommand("leakage-chunk-probe", "EC training across chunk sizes");
  cp_flags.attach(cp);
  cp->add_option("--chunks", cp_chunks, "chunk sizes (0: whole batch); each with and without shuffle");

  CorpusSpec gc;
  std::string gc_kind = "markov2", gc_out;
  auto* gen = app.add_subcommand("gen-corpus", "write a token corpus as bytes");
  gen->add_option("--kind", gc_kind, "markov2|file");
  gen->add_option("--size", gc.size);
  gen->add_option("--seed", gc.seed);
  gen->add_option("--alphabet", gc.alphabet);
  gen->add_option("--branching", gc.branching);
  gen->add_option("--skew", gc.skew);
  gen->add_option("--path", gc.path, "input file for --kind file");
  gen->add_option("--out", gc_out, "output file")->required();

  std::vector<std::string> pl_files;
  std::string pl_x, pl_y, pl_out;
  auto* plot = app.add_subcommand("plot", "SVG line chart from CSV files");
  plot->add_option("csv", pl_files, "input CSV files")->required();
  plot->add_option("--x", pl_x, "x column (default: first)");
  plot->add_option("--y", pl_y, "y column (required for several files)");
  plot->add_option("--out", pl_out, "output SVG")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: usage: " << one_line(e.what()) << '\n';
    return 2;
  }

  try {
    if (*train) {
      for (const auto& r : run_all_seeds(train_flags.resolve())) print_summary(r);
    } else if (*eval) {
      auto cfg = eval_flags.resolve();
      const auto model = load_checkpoint(eval_ckpt);
      cfg.model = model.config();
      const auto split = split_corpus(gen_corpus(cfg.corpus), cfg.validation_fraction);
      auto validation = split.validation;
      const std::size_t window = cfg.model.seq_len + 1;
      if (cfg.max_eval_sequences > 0 && validation.size() > cfg.max_eval_sequences * window)
        validation.resize(cfg.max_eval_sequences * window);
      const auto r = evaluate(model, validation, cfg.eval_batch);
      nlohmann::json j;
      j["perplexity"] = r.perplexity;
      j["mean_nll"] = r.mean_nll;
      j["maxvio_global"] = r.maxvio_global;
      j["layer_maxvio_global"] = r.layer_maxvio_global;
      j["tokens"] = r.tokens;
      std::cout << j.dump() << '\n';
    } else if (*sweep_u || *sweep_a) {
      const bool is_u = sweep_u->parsed();
      const auto cfg = (is_u ? su_flags : sa_flags).resolve();
      const auto values = parse_doubles("--values", is_u ? su_values : sa_values);
      const auto dir = (fs::path(cfg.output_dir) / cfg.run_name).string();
      const auto sr = is_u ? sweep_update_rate(cfg, values, dir) : sweep_alpha(cfg, values, dir);
      for (const auto& per_value : sr.runs)
        for (const auto& r : per_value) print_summary(r);
      std::cout << "wrote " << dir << "/sweep_" << sr.parameter << ".{csv,svg}\n";
    } else if (*mv) {
      std::vector<std::int64_t> counts;
      if (!mv_counts.empty()) {
        for (auto c : kv::to_int_list("--counts", mv_counts)) counts.push_back(c);
        if (mv_experts != 0 && counts.size() != mv_experts)
          throw DimensionError("--counts has " + std::to_string(counts.size()) + " entries, --experts is " +
                               std::to_string(mv_experts));
      } else if (!mv_assign.empty()) {
        counts = counts_from_assignments(mv_assign, mv_experts);
      } else {
        throw ConfigError("maxvio needs --counts or --assignments");
      }
      std::cout << kv::from_double(maxvio(counts)) << '\n';
    } else if (*lb) {
      const double bits = capacity_bound({lb_k, lb_n, lb_layers});
      std::cout << "bound_bits_per_token=" << kv::from_double(bits) << '\n';
      if (lb_tokens > 0) {
        const auto k = static_cast<std::size_t>(lb_k);
        if (static_cast<double>(k) != lb_k) throw ConfigError("--tokens needs an integer --k");
        std::cout << "exact_bits_per_token="
                  << kv::from_double(static_cast<double>(lb_layers) *
                                     exact_assignment_bits_per_token(lb_tokens, lb_n, k))
                  << '\n';
      }
    } else if (*lc) {
      std::vector<bool> msg;
      if (!lc_message.empty()) {
        msg = parse_bits(lc_message);
      } else {
        std::mt19937_64 rng(lc_seed);
        for (std::size_t i = 0; i < lc_bits; ++i) msg.push_back(rng() & 1U);
      }
      const ExpertChoiceConfig ec{lc_chunk, lc_shuffle, lc_seed};
      const auto layout = channel_layout(lc_n, lc_k, lc_t);
      const auto got = channel_transmit(msg, ec, lc_n, lc_k, lc_t);
      std::size_t errors = 0;
      for (std::size_t i = 0; i < msg.size(); ++i) errors += msg[i] != got[i];
      std::cout << "sent=" << bits_str(msg) << " received=" << bits_str(got) << " errors=" << errors
                << " capacity_bits=" << layout.max_message_bits << '\n';
      if (errors != 0) return 1;
    } else if (*cp) {
      const auto cfg = cp_flags.resolve();
      std::vector<ChunkProbeConfig> configs;
      for (auto c : kv::to_int_list("--chunks", cp_chunks)) {
        if (c < 0) throw ConfigError("--chunks must be non-negative");
        configs.push_back({static_cast<std::size_t>(c), false});
        configs.push_back({static_cast<std::size_t>(c), true});
      }
      const auto dir = (fs::path(cfg.output_dir) / cfg.run_name).string();
      const auto res = chunk_probe(cfg, configs, dir);
      for (std::size_t i = 0; i < configs.size(); ++i) {
        double m = 0.0;
        for (double v : res.final_loss[i]) m += v;
        std::cout << "chunk=" << configs[i].chunk_size << " shuffle=" << (configs[i].shuffle ? 1 : 0)
                  << " mean_final_loss=" << kv::from_double(m / static_cast<double>(res.final_loss[i].size()))
                  << '\n';
      }
    } else if (*gen) {
      if (gc_kind == "markov2") gc.kind = CorpusKind::markov2;
      else if (gc_kind == "file") gc.kind = CorpusKind::file;
      else throw ConfigError("unknown corpus kind '" + gc_kind + "' (markov2|file)");
      const auto tokens = gen_corpus(gc);
      write_byte_corpus(tokens, gc_out);
      std::cout << "tokens=" << tokens.size() << " out=" << gc_out << '\n';
    } else if (*plot) {
      plot_csv(pl_files, pl_x, pl_y, pl_out);
      std::cout << "wrote " << pl_out << '\n';
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << error_kind(e) << ": " << one_line(e.what()) << '\n';
    return 2;
  }
  return 0;
}
