#include "moebal/leakage.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "moebal/errors.hpp"

namespace moebal {

double capacity_bound(const LeakageBoundInput& in) {
  if (in.n == 0 || !(in.k > 0.0)) throw ContractError("capacity_bound: need K > 0 and N > 0");
  const double r = in.k / static_cast<double>(in.n);
  if (r >= 1.0) throw ContractError("capacity_bound: sparsity K/N must be below 1");
  return static_cast<double>(in.layers) * in.k * std::log2((1.0 - r) / r);
}

double log2_binomial(std::size_t n, std::size_t k) {
  if (k > n) throw ContractError("log2_binomial: k > n");
  k = std::min(k, n - k);
  if (n <= 62) {
    unsigned __int128 c = 1;
    for (std::size_t i = 0; i < k; ++i) c = c * (n - i) / (i + 1);
    return std::log2(static_cast<double>(c));
  }
  const double ln = std::lgamma(static_cast<double>(n) + 1) - std::lgamma(static_cast<double>(k) + 1) -
                    std::lgamma(static_cast<double>(n - k) + 1);
  return ln / std::log(2.0);
}

double chunk_assignment_bits(std::size_t tokens, std::size_t experts, std::size_t k) {
  if (experts == 0) throw ContractError("chunk_assignment_bits: zero experts");
  const std::size_t cap = tokens * k / experts;
  return static_cast<double>(experts) * log2_binomial(tokens, cap);
}

double exact_assignment_bits_per_token(std::size_t tokens, std::size_t experts, std::size_t k) {
  if (tokens == 0) throw ContractError("exact_assignment_bits_per_token: zero tokens");
  return chunk_assignment_bits(tokens, experts, k) / static_cast<double>(tokens);
}

ChannelLayout channel_layout(std::size_t experts, std::size_t k, std::size_t tokens) {
  if (experts == 0 || k == 0 || k >= experts)
    throw ContractError("channel: need 0 < K < N");
  ChannelLayout l;
  l.tokens = tokens;
  l.experts = experts;
  l.k = k;
  l.capacity = tokens * k / experts;
  if (l.capacity == 0) throw ContractError("channel: chunk too small for any expert capacity");
  l.receivers = std::min(l.capacity, tokens - l.capacity);
  l.bits_per_expert = static_cast<std::size_t>(std::floor(std::log2(static_cast<double>(l.receivers) + 1.0)));
  const auto half = static_cast<std::size_t>(std::floor(0.5 * chunk_assignment_bits(tokens, experts, k)));
  l.max_message_bits = std::min(experts * l.bits_per_expert, half);
  return l;
}

std::vector<double> channel_encode(const std::vector<bool>& message, const ChannelLayout& l) {
  if (message.size() > l.max_message_bits)
    throw ContractError("channel: message of " + std::to_string(message.size()) +
                        " bits exceeds the limit of " + std::to_string(l.max_message_bits));
  constexpr double fixed = 0.5, high = 0.9, low = 0.1;
  std::vector<double> s(l.tokens * l.experts, fixed);
  for (std::size_t j = 0; j < l.experts; ++j) {
    std::size_t digit = 0;
    for (std::size_t b = 0; b < l.bits_per_expert; ++b) {
      const std::size_t idx = j * l.bits_per_expert + b;
      if (idx < message.size() && message[idx]) digit |= std::size_t{1} << b;
    }
    // `digit` receivers must be pushed out: fill capacity - receivers + digit
    // slots with high-scoring senders.
    const std::size_t pushers = l.capacity - l.receivers + digit;
    for (std::size_t t = l.receivers; t < l.tokens; ++t)
      s[t * l.experts + j] = (t - l.receivers) < pushers ? high : low;
  }
  return s;
}

std::vector<bool> channel_decode(const RoutingAssignment& a, std::size_t message_bits,
                                 const ChannelLayout& l) {
  std::vector<bool> out(message_bits, false);
  for (std::size_t j = 0; j < l.experts; ++j) {
    const auto& members = a.expert_tokens[j];
    const auto kept = static_cast<std::size_t>(
        std::count_if(members.begin(), members.end(), [&](std::size_t t) { return t < l.receivers; }));
    const std::size_t digit = l.receivers - std::min(kept, l.receivers);
    for (std::size_t b = 0; b < l.bits_per_expert; ++b) {
      const std::size_t idx = j * l.bits_per_expert + b;
      if (idx < message_bits) out[idx] = (digit >> b) & 1U;
    }
  }
  return out;
}

std::vector<bool> channel_transmit(const std::vector<bool>& message, const ExpertChoiceConfig& ec,
                                   std::size_t experts, std::size_t k, std::size_t tokens) {
  const auto layout = channel_layout(experts, k, tokens);
  RoutingScores scores;
  scores.gate = GateKind::sigmoid;
  scores.values = ad::Tensor::from({tokens, experts}, channel_encode(message, layout));
  const auto assignment = expert_choice_select(scores, ec, k);
  return channel_decode(assignment, message.size(), layout);
}

}  // namespace moebal
