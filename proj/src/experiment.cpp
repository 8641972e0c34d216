#include "moebal/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "moebal/errors.hpp"
#include "moebal/metrics.hpp"
#include "moebal/plot.hpp"

namespace fs = std::filesystem;

namespace moebal {

// -- ExperimentConfig --------------------------------------------------------

ExperimentConfig ExperimentConfig::from_text(std::string_view text) {
  ExperimentConfig c;
  const auto rest = c.model.apply(parse_key_values(text));
  bool rule_given = false;
  bool rate_given = false;
  for (const auto& [k, v] : parse_key_values(text)) {
    if (k == "update_rule") rule_given = true;
    if (k == "update_rate") rate_given = true;
  }
  auto size = [](const std::string& k, const std::string& v) {
    const auto n = kv::to_int(k, v);
    if (n < 0) throw ConfigError("key '" + k + "' must be non-negative");
    return static_cast<std::size_t>(n);
  };
  for (const auto& [k, v] : rest) {
    if (k == "run_name") c.run_name = v;
    else if (k == "steps") c.steps = size(k, v);
    else if (k == "batch_size") c.batch_size = size(k, v);
    else if (k == "micro_batch_size") c.micro_batch_size = size(k, v);
    else if (k == "ep_parallel") c.ep_parallel = size(k, v);
    else if (k == "output_dir") c.output_dir = v;
    else if (k == "seeds") {
      c.seeds.clear();
      for (auto s : kv::to_int_list(k, v)) {
        if (s < 0) throw ConfigError("seeds must be non-negative");
        c.seeds.push_back(static_cast<std::uint64_t>(s));
      }
    }
    else if (k == "lr") c.adam.lr = kv::to_double(k, v);
    else if (k == "beta1") c.adam.beta1 = kv::to_double(k, v);
    else if (k == "beta2") c.adam.beta2 = kv::to_double(k, v);
    else if (k == "adam_eps") c.adam.eps = kv::to_double(k, v);
    else if (k == "warmup_steps") c.adam.warmup_steps = size(k, v);
    else if (k == "corpus") {
      if (v == "markov2") c.corpus.kind = CorpusKind::markov2;
      else if (v == "file") c.corpus.kind = CorpusKind::file;
      else throw ConfigError("unknown corpus kind '" + v + "' (markov2|file)");
    }
    else if (k == "corpus_size") c.corpus.size = size(k, v);
    else if (k == "corpus_seed") c.corpus.seed = size(k, v);
    else if (k == "corpus_alphabet") c.corpus.alphabet = size(k, v);
    else if (k == "corpus_branching") c.corpus.branching = size(k, v);
    else if (k == "corpus_skew") c.corpus.skew = kv::to_double(k, v);
    else if (k == "corpus_path") c.corpus.path = v;
    else if (k == "validation_fraction") c.validation_fraction = kv::to_double(k, v);
    else if (k == "eval_batch") c.eval_batch = size(k, v);
    else if (k == "max_eval_sequences") c.max_eval_sequences = size(k, v);
    else if (k == "dump_bias") c.dump_bias = kv::to_bool(k, v);
    else throw ConfigError("unknown config key '" + k + "'");
  }
  // A plain `seed` key selects a single seed.
  for (const auto& [k, v] : parse_key_values(text))
    if (k == "seed") c.seeds = {c.model.seed};
  if (c.model.gate == GateKind::softmax) {
    if (!rule_given) c.model.update_rule = UpdateRule::proportional;
    if (!rate_given) c.model.update_rate = 1e-3;
  }
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError(path + ": cannot open config");
  try {
    return from_text(std::string(std::istreambuf_iterator<char>(f), {}));
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

KeyValues ExperimentConfig::to_key_values() const {
  KeyValues kvs = model.to_key_values();
  kvs.erase(std::remove_if(kvs.begin(), kvs.end(), [](const auto& p) { return p.first == "seed"; }),
            kvs.end());
  std::string seed_list;
  for (std::size_t i = 0; i < seeds.size(); ++i) seed_list += (i ? "," : "") + std::to_string(seeds[i]);
  const KeyValues own = {
      {"run_name", run_name},
      {"steps", std::to_string(steps)},
      {"batch_size", std::to_string(batch_size)},
      {"micro_batch_size", std::to_string(micro_batch_size)},
      {"ep_parallel", std::to_string(ep_parallel)},
      {"output_dir", output_dir},
      {"seeds", seed_list},
      {"lr", kv::from_double(adam.lr)},
      {"beta1", kv::from_double(adam.beta1)},
      {"beta2", kv::from_double(adam.beta2)},
      {"adam_eps", kv::from_double(adam.eps)},
      {"warmup_steps", std::to_string(adam.warmup_steps)},
      {"corpus", corpus.kind == CorpusKind::markov2 ? "markov2" : "file"},
      {"corpus_size", std::to_string(corpus.size)},
      {"corpus_seed", std::to_string(corpus.seed)},
      {"corpus_alphabet", std::to_string(corpus.alphabet)},
      {"corpus_branching", std::to_string(corpus.branching)},
      {"corpus_skew", kv::from_double(corpus.skew)},
      {"corpus_path", corpus.path},
      {"validation_fraction", kv::from_double(validation_fraction)},
      {"eval_batch", std::to_string(eval_batch)},
      {"max_eval_sequences", std::to_string(max_eval_sequences)},
      {"dump_bias", dump_bias ? "true" : "false"},
  };
  kvs.insert(kvs.end(), own.begin(), own.end());
  return kvs;
}

void ExperimentConfig::validate() const {
  model.validate();
  if (seeds.empty()) throw ConfigError("seeds must not be empty");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (micro_batch_size == 0 || ep_parallel == 0)
    throw ConfigError("micro_batch_size and ep_parallel must be positive");
  if (!(validation_fraction > 0.0 && validation_fraction < 1.0))
    throw ConfigError("validation_fraction must be in (0, 1)");
  if (corpus.kind == CorpusKind::file && corpus.path.empty())
    throw ConfigError("corpus = file needs corpus_path");
  if (corpus.kind == CorpusKind::markov2 && corpus.alphabet > model.vocab_size)
    throw ConfigError("corpus_alphabet exceeds vocab_size");
}

// -- batches -----------------------------------------------------------------

BatchSampler::BatchSampler(const std::vector<std::int32_t>& tokens, std::size_t seq_len,
                           std::size_t batch_size, std::uint64_t seed)
    : tokens_(tokens), seq_len_(seq_len), batch_size_(batch_size), rng_(seed) {
  if (tokens_.size() < seq_len_ + 1)
    throw ContractError("training stream shorter than one sequence");
}

Batch BatchSampler::next() {
  Batch b;
  b.batch_size = batch_size_;
  b.seq_len = seq_len_;
  b.tokens.reserve(batch_size_ * (seq_len_ + 1));
  const std::size_t span = tokens_.size() - seq_len_;  // valid start offsets
  for (std::size_t i = 0; i < batch_size_; ++i) {
    const std::size_t off = rng_() % span;
    b.tokens.insert(b.tokens.end(), tokens_.begin() + static_cast<std::ptrdiff_t>(off),
                    tokens_.begin() + static_cast<std::ptrdiff_t>(off + seq_len_ + 1));
  }
  return b;
}

// -- single run --------------------------------------------------------------

std::string format_metrics_csv(const std::vector<TrainRecord>& records, std::size_t moe_layers) {
  std::string out = "# moebal-metrics v1\n";
  out += "step,lm_loss,aux_loss,maxvio_batch,bias_min,bias_max";
  for (std::size_t l = 0; l < moe_layers; ++l) out += ",maxvio_layer" + std::to_string(l + 1);
  out += '\n';
  for (const auto& r : records) {
    out += std::to_string(r.step) + ',' + kv::from_double(r.lm_loss) + ',' +
           kv::from_double(r.aux_loss) + ',' + kv::from_double(r.maxvio_batch) + ',' +
           kv::from_double(r.bias_min) + ',' + kv::from_double(r.bias_max);
    for (double v : r.layer_maxvio) out += ',' + kv::from_double(v);
    out += '\n';
  }
  return out;
}

double window_mean(const std::vector<TrainRecord>& records, double begin_frac, double end_frac,
                   const std::function<double(const TrainRecord&)>& f) {
  if (records.empty()) return 0.0;
  const auto n = static_cast<double>(records.size());
  auto b = static_cast<std::size_t>(std::floor(begin_frac * n));
  auto e = static_cast<std::size_t>(std::ceil(end_frac * n));
  e = std::min(e, records.size());
  if (b >= e) b = e > 0 ? e - 1 : 0;
  if (e == 0) e = 1;
  double s = 0.0;
  for (std::size_t i = b; i < e; ++i) s += f(records[i]);
  return s / static_cast<double>(e - b);
}

std::vector<WindowPoint> computation_batch_curve(const EvalResult& eval) {
  std::vector<WindowPoint> out;
  if (eval.sample_loads.empty() || eval.sample_loads.front().empty()) return out;
  const std::size_t samples = eval.sample_loads.front().size();
  for (std::size_t w = 1; w <= samples; w *= 2) {
    std::vector<double> per_layer;
    for (const auto& layer : eval.sample_loads) {
      const auto r = maxvio_computation_batch(layer, w, 1);
      double s = 0.0;
      for (double v : r.windows) s += v;
      per_layer.push_back(s / static_cast<double>(r.windows.size()));
    }
    out.push_back({w, layer_average(per_layer)});
  }
  return out;
}

namespace {

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError(p.string() + ": cannot open for writing");
  f << text;
  if (!f) throw IoError(p.string() + ": write failed");
}

nlohmann::json summary_json(const RunSummary& s, const ExperimentConfig& cfg) {
  nlohmann::json j;
  j["run_name"] = s.run_name;
  j["seed"] = s.seed;
  j["strategy"] = to_string(s.strategy);
  j["steps"] = s.steps;
  j["perplexity"] = s.perplexity;
  j["mean_nll"] = s.mean_nll;
  j["maxvio_global"] = s.maxvio_global;
  j["layer_maxvio_global"] = s.layer_maxvio_global;
  j["final_lm_loss"] = s.final_lm_loss;
  j["mean_maxvio_batch"] = s.mean_maxvio_batch;
  j["maxvio_computation_batch"] = s.maxvio_computation_batch;
  j["computation_batch_samples"] = cfg.micro_batch_size * cfg.ep_parallel;
  auto& curve = j["computation_batch_curve"] = nlohmann::json::array();
  for (const auto& p : s.computation_batch_curve)
    curve.push_back({{"window", p.window}, {"maxvio", p.maxvio}});
  nlohmann::json conf;
  for (const auto& [k, v] : cfg.to_key_values()) conf[k] = v;
  j["config"] = conf;
  return j;
}

}  // namespace

RunResult run_experiment(const ExperimentConfig& cfg, std::uint64_t seed,
                         const std::string& run_dir) {
  cfg.validate();
  ModelConfig mc = cfg.model;
  mc.seed = seed;
  MoEModel model(mc);
  Adam opt(model.parameters(), cfg.adam);

  const auto corpus = gen_corpus(cfg.corpus);
  const auto split = split_corpus(corpus, cfg.validation_fraction);
  const std::size_t window = mc.seq_len + 1;
  std::vector<std::int32_t> validation = split.validation;
  if (cfg.max_eval_sequences > 0 && validation.size() > cfg.max_eval_sequences * window)
    validation.resize(cfg.max_eval_sequences * window);

  BatchSampler sampler(split.train, mc.seq_len, cfg.batch_size, seed * 0x9E3779B97F4A7C15ULL + 17);
  RunResult res;
  res.dir = run_dir;
  res.records.reserve(cfg.steps);
  std::string bias_rows;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    res.records.push_back(train_step(model, opt, sampler.next(), step));
    if (cfg.dump_bias) {
      const auto biases = model.bias_states();
      for (std::size_t l = 0; l < biases.size(); ++l)
        for (std::size_t i = 0; i < biases[l]->bias.size(); ++i)
          bias_rows += std::to_string(step) + ',' + std::to_string(l + 1) + ',' + std::to_string(i) +
                       ',' + kv::from_double(biases[l]->bias[i]) + '\n';
    }
  }
  const auto eval = evaluate(model, validation, cfg.eval_batch);

  auto& s = res.summary;
  s.run_name = cfg.run_name;
  s.seed = seed;
  s.strategy = mc.strategy;
  s.steps = cfg.steps;
  s.perplexity = eval.perplexity;
  s.mean_nll = eval.mean_nll;
  s.maxvio_global = eval.maxvio_global;
  s.layer_maxvio_global = eval.layer_maxvio_global;
  s.final_lm_loss = window_mean(res.records, 0.9, 1.0, [](const TrainRecord& r) { return r.lm_loss; });
  s.mean_maxvio_batch = window_mean(res.records, 0.0, 1.0, [](const TrainRecord& r) { return r.maxvio_batch; });
  s.computation_batch_curve = computation_batch_curve(eval);
  {
    std::vector<double> per_layer;
    for (const auto& layer : eval.sample_loads) {
      const auto r = maxvio_computation_batch(layer, cfg.micro_batch_size, cfg.ep_parallel);
      if (r.windows.empty()) continue;
      double sum = 0.0;
      for (double v : r.windows) sum += v;
      per_layer.push_back(sum / static_cast<double>(r.windows.size()));
    }
    s.maxvio_computation_batch = per_layer.empty() ? 0.0 : layer_average(per_layer);
  }

  if (!run_dir.empty()) {
    const fs::path dir(run_dir);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError(run_dir + ": cannot create run directory: " + ec.message());
    write_file(dir / "metrics.csv", format_metrics_csv(res.records, mc.moe_layers()));
    std::string timing = "step,wall_ms\n";
    for (const auto& r : res.records)
      timing += std::to_string(r.step) + ',' + kv::from_double(r.wall_ms) + '\n';
    write_file(dir / "timing.csv", timing);
    if (cfg.dump_bias) write_file(dir / "bias.csv", "step,layer,expert,bias\n" + bias_rows);
    save_checkpoint(model, (dir / "checkpoint.bin").string());
    write_file(dir / "summary.json", summary_json(s, cfg).dump(2) + "\n");
  }
  return res;
}

std::vector<RunResult> run_all_seeds(const ExperimentConfig& cfg) {
  std::vector<std::function<RunResult()>> jobs;
  for (auto seed : cfg.seeds) {
    const auto dir = (fs::path(cfg.output_dir) / cfg.run_name / ("seed" + std::to_string(seed))).string();
    jobs.push_back([cfg, seed, dir] { return run_experiment(cfg, seed, dir); });
  }
  return run_jobs(jobs, thread_cap());
}

// -- parallel jobs -----------------------------------------------------------

std::size_t thread_cap() {
  if (const char* env = std::getenv("MOEBAL_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return static_cast<std::size_t>(v);
    throw ConfigError("MOEBAL_THREADS must be a positive integer");
  }
  return 1;
}

std::vector<RunResult> run_jobs(const std::vector<std::function<RunResult()>>& jobs,
                                std::size_t threads) {
  std::vector<RunResult> results(jobs.size());
  std::vector<std::exception_ptr> errors(jobs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < jobs.size();) {
      try {
        results[i] = jobs[i]();
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t n = std::max<std::size_t>(1, std::min(threads, jobs.size()));
  if (n == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return results;
}

// -- sweeps ------------------------------------------------------------------

namespace {

std::string value_label(double v) { return kv::from_double(v); }

SweepResult run_sweep(const ExperimentConfig& base, const std::string& parameter,
                      const std::vector<double>& values, const std::string& out_dir,
                      const std::function<void(ExperimentConfig&, double)>& apply) {
  SweepResult sr;
  sr.parameter = parameter;
  sr.values = values;
  std::vector<std::function<RunResult()>> jobs;
  for (double v : values) {
    ExperimentConfig cfg = base;
    apply(cfg, v);
    cfg.run_name = base.run_name + "_" + parameter + value_label(v);
    for (auto seed : cfg.seeds) {
      const auto dir = out_dir.empty() ? std::string()
                                       : (fs::path(out_dir) / cfg.run_name /
                                          ("seed" + std::to_string(seed))).string();
      jobs.push_back([cfg, seed, dir] { return run_experiment(cfg, seed, dir); });
    }
  }
  auto flat = run_jobs(jobs, thread_cap());
  std::size_t k = 0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    sr.runs.emplace_back();
    for (std::size_t s = 0; s < base.seeds.size(); ++s) sr.runs.back().push_back(std::move(flat[k++]));
  }
  if (out_dir.empty()) return sr;

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError(out_dir + ": cannot create directory: " + ec.message());
  std::string summary = "# moebal-sweep v1\n" + parameter +
                        ",seed,perplexity,maxvio_global,final_lm_loss,early_maxvio_batch,"
                        "late_maxvio_batch\n";
  for (std::size_t i = 0; i < values.size(); ++i)
    for (const auto& r : sr.runs[i]) {
      const auto mv = [](const TrainRecord& t) { return t.maxvio_batch; };
      summary += value_label(values[i]) + ',' + std::to_string(r.summary.seed) + ',' +
                 kv::from_double(r.summary.perplexity) + ',' +
                 kv::from_double(r.summary.maxvio_global) + ',' +
                 kv::from_double(r.summary.final_lm_loss) + ',' +
                 kv::from_double(window_mean(r.records, 0.0, 0.1, mv)) + ',' +
                 kv::from_double(window_mean(r.records, 0.75, 1.0, mv)) + '\n';
    }
  write_file(fs::path(out_dir) / ("sweep_" + parameter + ".csv"), summary);

  // Seed-averaged MaxVio_batch per step, one column per swept value.
  std::string curves = "# moebal-sweep-curves v1\nstep";
  for (double v : values) curves += "," + parameter + "=" + value_label(v);
  curves += '\n';
  for (std::size_t step = 0; step < base.steps; ++step) {
    curves += std::to_string(step);
    for (std::size_t i = 0; i < values.size(); ++i) {
      double m = 0.0;
      for (const auto& r : sr.runs[i]) m += r.records[step].maxvio_batch;
      curves += ',' + kv::from_double(m / static_cast<double>(sr.runs[i].size()));
    }
    curves += '\n';
  }
  const auto curves_path = fs::path(out_dir) / ("sweep_" + parameter + "_curves.csv");
  write_file(curves_path, curves);
  plot_csv({curves_path.string()}, "step", "", (fs::path(out_dir) / ("sweep_" + parameter + ".svg")).string());
  return sr;
}

}  // namespace

SweepResult sweep_update_rate(const ExperimentConfig& base, const std::vector<double>& rates,
                              const std::string& out_dir) {
  return run_sweep(base, "u", rates, out_dir, [](ExperimentConfig& c, double u) {
    c.model.strategy = RoutingStrategy::loss_free;
    c.model.update_rate = u;
  });
}

SweepResult sweep_alpha(const ExperimentConfig& base, const std::vector<double>& alphas,
                        const std::string& out_dir) {
  return run_sweep(base, "alpha", alphas, out_dir, [](ExperimentConfig& c, double a) {
    c.model.strategy = RoutingStrategy::aux_loss;
    c.model.alpha = a;
  });
}

ChunkProbeResult chunk_probe(const ExperimentConfig& base,
                             const std::vector<ChunkProbeConfig>& configs,
                             const std::string& out_dir) {
  ChunkProbeResult res;
  res.configs = configs;
  std::vector<std::function<RunResult()>> jobs;
  for (const auto& pc : configs) {
    ExperimentConfig cfg = base;
    cfg.model.strategy = RoutingStrategy::expert_choice;
    cfg.model.ec_chunk_size = pc.chunk_size;
    cfg.model.ec_shuffle = pc.shuffle;
    for (auto seed : cfg.seeds) jobs.push_back([cfg, seed] { return run_experiment(cfg, seed, ""); });
  }
  auto flat = run_jobs(jobs, thread_cap());
  std::size_t k = 0;
  for (std::size_t i = 0; i < configs.size(); ++i) {
    res.runs.emplace_back();
    res.final_loss.emplace_back();
    for (std::size_t s = 0; s < base.seeds.size(); ++s) {
      res.final_loss.back().push_back(flat[k].summary.final_lm_loss);
      res.runs.back().push_back(std::move(flat[k++]));
    }
  }
  if (!out_dir.empty()) {
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError(out_dir + ": cannot create directory: " + ec.message());
    for (std::size_t i = 0; i < configs.size(); ++i) {
      std::string csv = "# moebal-chunk-probe v1\nseed,step,loss\n";
      for (const auto& r : res.runs[i])
        for (const auto& rec : r.records)
          csv += std::to_string(r.summary.seed) + ',' + std::to_string(rec.step) + ',' +
                 kv::from_double(rec.lm_loss) + '\n';
      const std::string name = "chunk" + std::to_string(configs[i].chunk_size) + "_" +
                               (configs[i].shuffle ? "shuffle" : "noshuffle") + ".csv";
      write_file(fs::path(out_dir) / name, csv);
    }
  }
  return res;
}

Router model_router(const MoEModel& model) {
  return [&model](std::span<const std::int32_t> tokens) {
    const auto layers = model.route(tokens);
    const std::size_t n = model.config().routed_experts;
    std::vector<std::vector<std::size_t>> out(tokens.size());
    for (std::size_t l = 0; l < layers.size(); ++l)
      for (std::size_t t = 0; t < tokens.size(); ++t)
        for (auto e : layers[l][t]) out[t].push_back(l * n + e);
    return out;
  };
}

}  // namespace moebal
