#pragma once

// Future-token leakage of Expert Choice routing: how much information an
// assignment can carry, and a constructive channel that moves bits from
// later tokens to earlier ones through nothing but expert membership.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "moebal/routing.hpp"

namespace moebal {

struct LeakageBoundInput {
  double k = 2.0;         // average activated experts per token
  std::size_t n = 16;     // total experts
  std::size_t layers = 1;
};

/// layers * K * log2((1 - R) / R) with R = K / N, in bits per token.
double capacity_bound(const LeakageBoundInput& in);

/// log2 of the binomial coefficient, exact for n <= 62 and via lgamma above.
double log2_binomial(std::size_t n, std::size_t k);

/// Bits one EC layer's assignment can carry over a chunk of T tokens:
/// N * log2 C(T, floor(K T / N)).
double chunk_assignment_bits(std::size_t tokens, std::size_t experts, std::size_t k);

/// chunk_assignment_bits / T.
double exact_assignment_bits_per_token(std::size_t tokens, std::size_t experts, std::size_t k);

/// Layout of the constructive channel for one chunk. The first `receivers`
/// tokens have fixed, message-independent scores; every later token is a
/// sender whose scores encode the payload. Each expert carries
/// `bits_per_expert` bits as the number of receivers it rejects.
struct ChannelLayout {
  std::size_t tokens = 0;
  std::size_t experts = 0;
  std::size_t k = 0;
  std::size_t capacity = 0;  // tokens per expert, floor(K T / N)
  std::size_t receivers = 0;
  std::size_t bits_per_expert = 0;
  /// min(experts * bits_per_expert, floor(0.5 * chunk_assignment_bits)).
  std::size_t max_message_bits = 0;
};

ChannelLayout channel_layout(std::size_t experts, std::size_t k, std::size_t tokens);

/// Scores [T x N] in which only sender rows depend on the message.
std::vector<double> channel_encode(const std::vector<bool>& message, const ChannelLayout& layout);

/// Reads the message back from receiver membership alone.
std::vector<bool> channel_decode(const RoutingAssignment& assignment, std::size_t message_bits,
                                 const ChannelLayout& layout);

/// Encode, route with Expert Choice under `ec`, decode.
std::vector<bool> channel_transmit(const std::vector<bool>& message, const ExpertChoiceConfig& ec,
                                   std::size_t experts, std::size_t k, std::size_t tokens);

}  // namespace moebal
