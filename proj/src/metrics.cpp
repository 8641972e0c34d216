#include "moebal/metrics.hpp"

#include <algorithm>
#include <numeric>
#include <string>

#include "moebal/errors.hpp"

namespace moebal {

LoadCounter LoadCounter::for_experts(std::size_t experts, LoadGranularity g) {
  LoadCounter c;
  c.counts.assign(experts, 0);
  c.granularity = g;
  return c;
}

void LoadCounter::add(const RoutingAssignment& a) {
  if (a.experts != counts.size())
    throw ContractError("LoadCounter: assignment has " + std::to_string(a.experts) +
                        " experts, counter " + std::to_string(counts.size()));
  for (std::size_t i = 0; i < a.experts; ++i)
    counts[i] += static_cast<std::int64_t>(a.expert_tokens[i].size());
  tokens_seen += static_cast<std::int64_t>(a.tokens);
}

void LoadCounter::merge(const LoadCounter& other) {
  if (other.counts.size() != counts.size()) throw ContractError("LoadCounter: merge size mismatch");
  for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
  tokens_seen += other.tokens_seen;
}

double maxvio(std::span<const std::int64_t> counts) {
  if (counts.empty()) throw ContractError("maxvio of zero experts");
  const auto total = std::accumulate(counts.begin(), counts.end(), std::int64_t{0});
  if (total <= 0) throw ContractError("maxvio with zero assigned tokens");
  const double mean = static_cast<double>(total) / static_cast<double>(counts.size());
  const double mx = static_cast<double>(*std::max_element(counts.begin(), counts.end()));
  return (mx - mean) / mean;
}

double maxvio(const LoadCounter& counter) {
  if (counter.tokens_seen <= 0) throw ContractError("maxvio with zero tokens seen");
  return maxvio(counter.counts);
}

std::vector<double> maxvio_batch(std::span<const RoutingAssignment> per_step) {
  std::vector<double> out;
  out.reserve(per_step.size());
  for (const auto& a : per_step) {
    auto c = LoadCounter::for_experts(a.experts, LoadGranularity::batch);
    c.add(a);
    out.push_back(maxvio(c));
  }
  return out;
}

double maxvio_global(const LoadCounter& accumulated) { return maxvio(accumulated); }

std::vector<std::vector<std::int64_t>> per_sample_loads(const RoutingAssignment& a,
                                                        std::size_t seq_len) {
  if (seq_len == 0 || a.tokens % seq_len != 0)
    throw ContractError("per_sample_loads: " + std::to_string(a.tokens) +
                        " tokens are not whole sequences of " + std::to_string(seq_len));
  std::vector<std::vector<std::int64_t>> out(a.tokens / seq_len,
                                             std::vector<std::int64_t>(a.experts, 0));
  for (std::size_t t = 0; t < a.tokens; ++t)
    for (std::size_t i : a.token_experts[t]) ++out[t / seq_len][i];
  return out;
}

WindowedMaxVio maxvio_computation_batch(std::span<const std::vector<std::int64_t>> sample_loads,
                                        std::size_t micro_batch_size, std::size_t ep_parallel) {
  const std::size_t window = micro_batch_size * ep_parallel;
  if (window == 0) throw ContractError("computation batch of zero samples");
  WindowedMaxVio out;
  std::vector<std::int64_t> acc;
  std::size_t filled = 0;
  for (const auto& s : sample_loads) {
    if (acc.empty()) acc.assign(s.size(), 0);
    if (s.size() != acc.size()) throw ContractError("computation batch: ragged sample loads");
    for (std::size_t i = 0; i < s.size(); ++i) acc[i] += s[i];
    if (++filled == window) {
      out.windows.push_back(maxvio(acc));
      std::fill(acc.begin(), acc.end(), 0);
      filled = 0;
    }
  }
  if (filled > 0) out.tail = maxvio(acc);
  return out;
}

double layer_average(std::span<const double> per_layer) {
  if (per_layer.empty()) throw ContractError("layer_average of zero layers");
  return std::accumulate(per_layer.begin(), per_layer.end(), 0.0) /
         static_cast<double>(per_layer.size());
}

}  // namespace moebal
