#include "moebal/balancer.hpp"

#include <numeric>
#include <string>

#include "moebal/errors.hpp"

namespace moebal {

ExpertBiasState ExpertBiasState::initial(std::size_t experts, UpdateRule rule, BiasForm form,
                                         double rate) {
  if (!(rate >= 0.0)) throw ContractError("bias update rate must be non-negative");
  ExpertBiasState s;
  s.bias.assign(experts, form == BiasForm::additive ? 0.0 : 1.0);
  s.rule = rule;
  s.form = form;
  s.rate = rate;
  return s;
}

ExpertBiasState update_bias(const ExpertBiasState& state, std::span<const std::int64_t> loads) {
  const std::size_t n = state.bias.size();
  if (loads.size() != n)
    throw ContractError("update_bias: " + std::to_string(loads.size()) + " loads for " +
                        std::to_string(n) + " experts");
  std::int64_t total = 0;
  for (auto c : loads) {
    if (c < 0) throw ContractError("update_bias: negative load");
    total += c;
  }
  ExpertBiasState next = state;
  if (n == 0) return next;
  const double mean = static_cast<double>(total) / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double err = mean - static_cast<double>(loads[i]);
    if (state.rule == UpdateRule::sign) {
      const double sgn = err > 0.0 ? 1.0 : (err < 0.0 ? -1.0 : 0.0);
      next.bias[i] += state.rate * sgn;
    } else {
      next.bias[i] += state.rate * err;
    }
  }
  return next;
}

ad::Tensor aux_loss(ad::Tape& tape, const RoutingScores& scores,
                    const RoutingAssignment& assignment, const AuxLossConfig& cfg) {
  const std::size_t T = scores.tokens(), N = scores.experts();
  if (T == 0) throw ContractError("aux_loss over zero tokens");
  if (assignment.tokens != T || assignment.experts != N)
    throw ContractError("aux_loss: assignment does not match the scores");
  const auto loads = assignment.loads();
  const double selections = static_cast<double>(std::accumulate(loads.begin(), loads.end(),
                                                                std::int64_t{0}));
  const double k = selections / static_cast<double>(T);
  std::vector<double> f(N, 0.0);
  if (k > 0.0)
    for (std::size_t i = 0; i < N; ++i)
      f[i] = static_cast<double>(N) / (k * static_cast<double>(T)) * static_cast<double>(loads[i]);
  const auto p = ad::mean_axis(tape, scores.values, 0);
  const auto weighted = ad::mul(tape, p, ad::Tensor::from({N}, std::move(f)));
  return ad::scale(tape, ad::sum(tape, weighted), cfg.alpha);
}

}  // namespace moebal
