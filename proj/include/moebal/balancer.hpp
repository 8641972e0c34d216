#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "moebal/autodiff.hpp"
#include "moebal/routing.hpp"

namespace moebal {

enum class UpdateRule { sign, proportional };

/// Expert-wise routing bias adjusted from observed loads between batches.
struct ExpertBiasState {
  std::vector<double> bias;
  UpdateRule rule = UpdateRule::sign;
  BiasForm form = BiasForm::additive;
  double rate = 1e-3;

  /// Additive biases start at 0, multiplicative ones at 1.
  static ExpertBiasState initial(std::size_t experts, UpdateRule rule, BiasForm form, double rate);
};

/// One bias step from a batch's per-expert token counts:
/// e_i = mean(c) - c_i, then b_i += u * sign(e_i) (sign rule, sign(0) = 0)
/// or b_i += u * e_i (proportional rule).
ExpertBiasState update_bias(const ExpertBiasState& state, std::span<const std::int64_t> loads);

struct AuxLossConfig {
  double alpha = 0.0;
};

/// alpha * sum_i f_i * P_i with f_i = N / (K T) * count_i and P_i the mean
/// score of expert i. f is a constant; gradients reach the scores through P.
/// K is the assignment's mean number of experts per token.
ad::Tensor aux_loss(ad::Tape& tape, const RoutingScores& scores,
                    const RoutingAssignment& assignment, const AuxLossConfig& cfg);

}  // namespace moebal
