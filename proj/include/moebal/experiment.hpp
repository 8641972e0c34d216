#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "moebal/corpus.hpp"
#include "moebal/model.hpp"

namespace moebal {

/// Flat key = value experiment description. Model keys are those of
/// ModelConfig; anything unrecognised is a ConfigError.
struct ExperimentConfig {
  ModelConfig model;
  std::string run_name = "run";
  std::size_t steps = 300;
  std::size_t batch_size = 8;
  std::size_t micro_batch_size = 1;
  std::size_t ep_parallel = 1;
  std::string output_dir = "runs";
  std::vector<std::uint64_t> seeds{1};
  AdamConfig adam;
  CorpusSpec corpus;
  double validation_fraction = 0.1;
  std::size_t eval_batch = 8;
  std::size_t max_eval_sequences = 256;
  bool dump_bias = false;

  static ExperimentConfig from_text(std::string_view text);
  static ExperimentConfig load(const std::string& path);
  KeyValues to_key_values() const;
  void validate() const;
};

/// Uniformly placed windows of seq_len + 1 tokens from the training stream.
class BatchSampler {
 public:
  BatchSampler(const std::vector<std::int32_t>& tokens, std::size_t seq_len,
               std::size_t batch_size, std::uint64_t seed);
  Batch next();

 private:
  const std::vector<std::int32_t>& tokens_;
  std::size_t seq_len_;
  std::size_t batch_size_;
  std::mt19937_64 rng_;
};

struct WindowPoint {
  std::size_t window = 0;  // samples per computation batch
  double maxvio = 0.0;     // mean over full windows, averaged over layers
};

struct RunSummary {
  std::string run_name;
  std::uint64_t seed = 0;
  RoutingStrategy strategy = RoutingStrategy::vanilla;
  std::size_t steps = 0;
  double perplexity = 0.0;
  double mean_nll = 0.0;
  double maxvio_global = 0.0;
  std::vector<double> layer_maxvio_global;
  double final_lm_loss = 0.0;  // mean training LM loss over the last 10% of steps
  double mean_maxvio_batch = 0.0;
  double maxvio_computation_batch = 0.0;  // at micro_batch_size * ep_parallel
  std::vector<WindowPoint> computation_batch_curve;
};

struct RunResult {
  RunSummary summary;
  std::vector<TrainRecord> records;
  std::string dir;
};

/// Trains one seed. With a non-empty run_dir it writes metrics.csv,
/// timing.csv, checkpoint.bin, summary.json (and bias.csv if dump_bias).
RunResult run_experiment(const ExperimentConfig& cfg, std::uint64_t seed,
                         const std::string& run_dir);

/// All seeds of cfg, as <output_dir>/<run_name>/seed<k>.
std::vector<RunResult> run_all_seeds(const ExperimentConfig& cfg);

std::string format_metrics_csv(const std::vector<TrainRecord>& records, std::size_t moe_layers);

/// Mean of f(record) over records whose index lies in [begin, end) fractions
/// of the run; at least one record is always included.
double window_mean(const std::vector<TrainRecord>& records, double begin_frac, double end_frac,
                   const std::function<double(const TrainRecord&)>& f);

/// Loads for the computation-batch curve: windows 1, 2, 4, ... samples.
std::vector<WindowPoint> computation_batch_curve(const EvalResult& eval);

/// Parallel job cap from MOEBAL_THREADS (default 1).
std::size_t thread_cap();

/// Runs jobs on up to `threads` workers; results keep job order.
std::vector<RunResult> run_jobs(const std::vector<std::function<RunResult()>>& jobs,
                                std::size_t threads);

struct SweepResult {
  std::string parameter;
  std::vector<double> values;
  std::vector<std::vector<RunResult>> runs;  // [value][seed]
};

/// Loss-free runs at each update rate; writes sweep_u.csv,
/// sweep_u_curves.csv and sweep_u.svg into out_dir.
SweepResult sweep_update_rate(const ExperimentConfig& base, const std::vector<double>& rates,
                              const std::string& out_dir);

/// Aux-loss runs at each alpha; writes sweep_alpha.csv,
/// sweep_alpha_curves.csv and sweep_alpha.svg into out_dir.
SweepResult sweep_alpha(const ExperimentConfig& base, const std::vector<double>& alphas,
                        const std::string& out_dir);

struct ChunkProbeConfig {
  std::size_t chunk_size = 0;  // 0: whole batch
  bool shuffle = false;
};

struct ChunkProbeResult {
  std::vector<ChunkProbeConfig> configs;
  std::vector<std::vector<double>> final_loss;  // [config][seed]
  std::vector<std::vector<RunResult>> runs;
};

/// Expert Choice runs that differ only in chunk size and shuffling. Each
/// configuration writes <out_dir>/chunk<c>_<shuffle|noshuffle>.csv with
/// seed,step,loss rows.
ChunkProbeResult chunk_probe(const ExperimentConfig& base,
                             const std::vector<ChunkProbeConfig>& configs,
                             const std::string& out_dir);

/// Router over the model's MoE layers: expert ids of layer l are offset by
/// l * routed_experts so one set covers every layer.
Router model_router(const MoEModel& model);

}  // namespace moebal
