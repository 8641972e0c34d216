#pragma once

// Toy decoder-only MoE language model: token embedding, pre-norm attention
// blocks, a dense FFN in the first block and shared + routed experts in every
// later block, and an untied output head.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "moebal/autodiff.hpp"
#include "moebal/balancer.hpp"
#include "moebal/keyvalue.hpp"
#include "moebal/routing.hpp"

namespace moebal {

enum class RoutingStrategy { vanilla, aux_loss, loss_free, expert_choice };

const char* to_string(RoutingStrategy s);
const char* to_string(GateKind g);
const char* to_string(UpdateRule r);
const char* to_string(BiasForm f);
RoutingStrategy parse_strategy(const std::string& s);
GateKind parse_gate(const std::string& s);
UpdateRule parse_update_rule(const std::string& s);
BiasForm parse_bias_form(const std::string& s);

struct ModelConfig {
  std::size_t vocab_size = 256;
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 1;
  std::size_t seq_len = 128;
  std::size_t d_ff = 128;  // dense FFN width of the first block
  std::size_t routed_experts = 8;
  std::size_t top_k = 2;
  std::size_t shared_experts = 1;
  std::size_t d_expert = 32;
  GateKind gate = GateKind::sigmoid;
  bool normalize_topk = false;

  RoutingStrategy strategy = RoutingStrategy::vanilla;
  double alpha = 1e-3;  // aux_loss only
  UpdateRule update_rule = UpdateRule::sign;
  BiasForm bias_form = BiasForm::additive;
  double update_rate = 1e-3;  // loss_free only
  std::size_t ec_chunk_size = 0;  // 0: one chunk per batch
  bool ec_shuffle = false;

  double init_std = 0.006;
  std::uint64_t seed = 0;

  std::size_t moe_layers() const { return n_layers > 0 ? n_layers - 1 : 0; }
  /// Throws ConfigError on inconsistent settings.
  void validate() const;
  KeyValues to_key_values() const;
  /// Applies recognised keys and returns the ones it did not recognise.
  KeyValues apply(const KeyValues& kv);

  /// Shape of a 1B-scale reference model: 64 routed / 6 active / 2 shared.
  static ModelConfig reference_1b_preset();
};

struct FfnParams {
  ad::Tensor up;    // [d x h]
  ad::Tensor down;  // [h x d]
};

struct AttentionParams {
  ad::Tensor wq, wk, wv, wo;  // [d x d]
};

struct MoELayerParams {
  ad::Tensor centroids;  // [d x N_r]
  std::vector<FfnParams> routed;
  std::vector<FfnParams> shared;
  ExpertBiasState bias;
};

/// How one MoE layer picks experts for the current forward pass.
struct MoERouting {
  RoutingStrategy strategy = RoutingStrategy::vanilla;
  std::size_t top_k = 2;
  GateKind gate = GateKind::sigmoid;
  bool normalize_topk = false;
  ExpertChoiceConfig ec;
  const RoutingAssignment* frozen = nullptr;  // reuse a previous selection
  bool zero_routed_gates = false;
};

struct MoELayerOutput {
  ad::Tensor hidden;
  RoutingScores scores;
  RoutingAssignment assignment;
};

ad::Tensor ffn_forward(ad::Tape& tape, const ad::Tensor& x, const FfnParams& p);

/// h = u + sum_shared FFN_s(n) + sum_selected g * FFN_i(n), n = LayerNorm(u).
/// Router scores are also computed from n.
MoELayerOutput moe_layer_forward(ad::Tape& tape, const ad::Tensor& u, const MoELayerParams& params,
                                 const MoERouting& routing);

struct Block {
  AttentionParams attn;
  std::optional<FfnParams> dense;
  std::optional<MoELayerParams> moe;
};

struct NamedTensor {
  std::string name;
  ad::Tensor tensor;
};

struct ForwardOptions {
  std::uint64_t ec_shuffle_seed = 0;
  const std::vector<RoutingAssignment>* frozen_routing = nullptr;  // one per MoE layer
  bool zero_routed_gates = false;
};

struct ForwardResult {
  ad::Tensor logits;                       // [T x V]
  std::vector<RoutingScores> scores;       // one per MoE layer
  std::vector<RoutingAssignment> routing;  // one per MoE layer
};

class MoEModel {
 public:
  explicit MoEModel(ModelConfig config);

  const ModelConfig& config() const { return config_; }
  std::vector<NamedTensor> parameters() const;
  std::size_t parameter_count() const;

  /// tokens holds whole sequences of config().seq_len tokens.
  ForwardResult forward(ad::Tape& tape, std::span<const std::int32_t> tokens,
                        const ForwardOptions& opts = {}) const;

  /// Selected expert set of every token in every MoE layer, without grads.
  std::vector<std::vector<std::vector<std::size_t>>> route(std::span<const std::int32_t> tokens) const;

  std::vector<Block>& blocks() { return blocks_; }
  const std::vector<Block>& blocks() const { return blocks_; }
  std::vector<ExpertBiasState*> bias_states();
  std::vector<const ExpertBiasState*> bias_states() const;

  ad::Tensor& embedding() { return embed_; }
  ad::Tensor& head() { return head_; }

 private:
  MoERouting routing_for(std::size_t moe_index, const ForwardOptions& opts) const;

  ModelConfig config_;
  ad::Tensor embed_;  // [V x d]
  std::vector<Block> blocks_;
  ad::Tensor head_;  // [d x V]
};

// -- training ----------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  std::size_t warmup_steps = 100;
};

class Adam {
 public:
  Adam(std::vector<NamedTensor> params, AdamConfig cfg);
  /// Applies one update from the parameters' current gradients, then clears them.
  void step();
  double current_lr() const;
  std::size_t steps_taken() const { return t_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  std::vector<NamedTensor> params_;
  std::vector<std::vector<double>> m_, v_;
  AdamConfig cfg_;
  std::size_t t_ = 0;
};

/// Token windows of seq_len + 1: inputs are the first seq_len tokens of each
/// row and targets the next-token shifted copy.
struct Batch {
  std::size_t batch_size = 0;
  std::size_t seq_len = 0;
  std::vector<std::int32_t> tokens;  // batch_size * (seq_len + 1)

  std::vector<std::int32_t> inputs() const;
  std::vector<std::int32_t> targets() const;
};

struct TrainRecord {
  std::size_t step = 0;
  double lm_loss = 0.0;
  double aux_loss = 0.0;
  double maxvio_batch = 0.0;  // layer average
  std::vector<double> layer_maxvio;
  double bias_min = 0.0;
  double bias_max = 0.0;
  double wall_ms = 0.0;
  std::vector<std::vector<std::int64_t>> layer_loads;  // per MoE layer, whole batch
};

/// Forward + backward + Adam update; loss-free biases are updated from the
/// batch loads after the optimizer step so they only affect later steps.
TrainRecord train_step(MoEModel& model, Adam& opt, const Batch& batch, std::size_t step);

struct EvalResult {
  double perplexity = 0.0;
  double mean_nll = 0.0;
  double maxvio_global = 0.0;  // layer average
  std::vector<double> layer_maxvio_global;
  std::size_t tokens = 0;
  // Per MoE layer, expert counts of every validation sequence in order.
  std::vector<std::vector<std::vector<std::int64_t>>> sample_loads;
};

/// Scores the stream in non-overlapping windows of seq_len + 1 tokens,
/// eval_batch sequences per forward pass.
EvalResult evaluate(const MoEModel& model, std::span<const std::int32_t> validation,
                    std::size_t eval_batch = 8);

// -- checkpoints -------------------------------------------------------------

void save_checkpoint(const MoEModel& model, const std::string& path);
MoEModel load_checkpoint(const std::string& path);

}  // namespace moebal
