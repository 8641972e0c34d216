#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <vector>

#include "moebal/autodiff.hpp"

namespace moebal {

enum class GateKind { sigmoid, softmax };
enum class BiasForm { additive, multiplicative };

/// Per-token, per-expert gating scores s[t][i]; the tensor stays on the tape
/// so gate weights can carry gradients back into the router.
struct RoutingScores {
  ad::Tensor values;  // [tokens x experts]
  GateKind gate = GateKind::sigmoid;

  std::size_t tokens() const { return values.dim(0); }
  std::size_t experts() const { return values.dim(1); }
  double at(std::size_t t, std::size_t i) const { return values.data()[t * experts() + i]; }
};

/// Which experts each token uses and with what weight. Both the per-token
/// and per-expert views are filled regardless of the routing strategy.
struct RoutingAssignment {
  std::size_t tokens = 0;
  std::size_t experts = 0;
  bool expert_choice = false;
  std::vector<std::vector<std::size_t>> token_experts;  // ascending expert ids
  std::vector<std::vector<std::size_t>> expert_tokens;  // ascending token ids
  std::vector<double> gate_weights;                     // [tokens x experts], 0 if unselected

  double gate(std::size_t t, std::size_t i) const { return gate_weights[t * experts + i]; }
  bool selected(std::size_t t, std::size_t i) const;
  std::vector<std::int64_t> loads() const;
  /// 1.0 where a pair is selected, 0.0 elsewhere; [tokens x experts].
  std::vector<double> mask() const;
};

struct ExpertChoiceConfig {
  std::size_t chunk_size = 0;  // 0 means a single chunk spanning every token
  bool shuffle = false;
  std::uint64_t shuffle_seed = 0;
};

/// s = G(hidden * centroids). hidden is [T x d], centroids [d x N].
RoutingScores compute_scores(ad::Tape& tape, const ad::Tensor& hidden,
                             const ad::Tensor& centroids, GateKind gate);

/// Token-choice top-K over biased scores. Selection ranks s+b (additive) or
/// s*b (multiplicative); ties go to the lower expert index. The returned
/// gate weights are the unbiased scores.
RoutingAssignment topk_select(const RoutingScores& scores, std::span<const double> bias,
                              std::size_t k, BiasForm form = BiasForm::additive);

/// Each expert takes its floor(chunk_tokens * K / N) highest-scoring tokens
/// inside every chunk. With shuffle set the tokens are permuted before
/// chunking and the result is mapped back to original positions. Ties go to
/// the lower original token index.
RoutingAssignment expert_choice_select(const RoutingScores& scores, const ExpertChoiceConfig& cfg,
                                       std::size_t k);

/// Deterministic permutation of [0, n) used by shuffled Expert Choice.
std::vector<std::size_t> token_permutation(std::size_t n, std::uint64_t seed);

/// Maps a token stream to the selected expert set of every token.
using Router = std::function<std::vector<std::vector<std::size_t>>(std::span<const std::int32_t>)>;

struct CausalityReport {
  std::size_t trials = 0;
  std::size_t violations = 0;
};

/// Resamples every token at or after prefix_len and counts trials in which
/// any prefix token's expert set changed.
CausalityReport causality_probe(const Router& router, std::span<const std::int32_t> stream,
                                std::size_t prefix_len, std::size_t trials, std::int32_t vocab,
                                std::uint64_t seed);

/// token_index,expert_index,gate_weight rows for every selected pair.
void write_assignment_csv(std::ostream& os, const RoutingAssignment& a);

}  // namespace moebal
