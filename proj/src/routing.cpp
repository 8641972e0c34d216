#include "moebal/routing.hpp"

#include <algorithm>
#include <numeric>
#include <ostream>
#include <random>
#include <string>

#include "moebal/errors.hpp"
#include "moebal/keyvalue.hpp"

namespace moebal {

bool RoutingAssignment::selected(std::size_t t, std::size_t i) const {
  const auto& s = token_experts[t];
  return std::binary_search(s.begin(), s.end(), i);
}

std::vector<std::int64_t> RoutingAssignment::loads() const {
  std::vector<std::int64_t> c(experts, 0);
  for (std::size_t i = 0; i < experts; ++i) c[i] = static_cast<std::int64_t>(expert_tokens[i].size());
  return c;
}

std::vector<double> RoutingAssignment::mask() const {
  std::vector<double> m(tokens * experts, 0.0);
  for (std::size_t t = 0; t < tokens; ++t)
    for (std::size_t i : token_experts[t]) m[t * experts + i] = 1.0;
  return m;
}

RoutingScores compute_scores(ad::Tape& tape, const ad::Tensor& hidden,
                             const ad::Tensor& centroids, GateKind gate) {
  auto logits = ad::matmul(tape, hidden, centroids);
  RoutingScores s;
  s.gate = gate;
  s.values = gate == GateKind::sigmoid ? ad::sigmoid(tape, logits) : ad::softmax(tape, logits, 1);
  return s;
}

namespace {

RoutingAssignment empty_assignment(std::size_t tokens, std::size_t experts, bool ec) {
  RoutingAssignment a;
  a.tokens = tokens;
  a.experts = experts;
  a.expert_choice = ec;
  a.token_experts.assign(tokens, {});
  a.expert_tokens.assign(experts, {});
  a.gate_weights.assign(tokens * experts, 0.0);
  return a;
}

}  // namespace

RoutingAssignment topk_select(const RoutingScores& scores, std::span<const double> bias,
                              std::size_t k, BiasForm form) {
  const std::size_t T = scores.tokens(), N = scores.experts();
  if (k > N)
    throw ContractError("topk_select: K=" + std::to_string(k) + " exceeds " + std::to_string(N) +
                        " experts");
  if (bias.size() != N)
    throw DimensionError("topk_select: bias has " + std::to_string(bias.size()) +
                        " entries for " + std::to_string(N) + " experts");
  auto a = empty_assignment(T, N, false);
  std::vector<std::size_t> order(N);
  std::vector<double> key(N);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t i = 0; i < N; ++i) {
      const double s = scores.at(t, i);
      key[i] = form == BiasForm::additive ? s + bias[i] : s * bias[i];
    }
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [&](std::size_t x, std::size_t y) {
                        return key[x] > key[y] || (key[x] == key[y] && x < y);
                      });
    auto& sel = a.token_experts[t];
    sel.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
    std::sort(sel.begin(), sel.end());
    for (std::size_t i : sel) {
      a.gate_weights[t * N + i] = scores.at(t, i);
      a.expert_tokens[i].push_back(t);
    }
  }
  return a;
}

std::vector<std::size_t> token_permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[rng() % i]);
  return p;
}

RoutingAssignment expert_choice_select(const RoutingScores& scores, const ExpertChoiceConfig& cfg,
                                       std::size_t k) {
  const std::size_t T = scores.tokens(), N = scores.experts();
  const std::size_t chunk = cfg.chunk_size == 0 ? T : std::min(cfg.chunk_size, T);
  auto a = empty_assignment(T, N, true);
  if (T == 0) return a;

  // position -> original token
  std::vector<std::size_t> order =
      cfg.shuffle ? token_permutation(T, cfg.shuffle_seed) : std::vector<std::size_t>(T);
  if (!cfg.shuffle) std::iota(order.begin(), order.end(), std::size_t{0});

  std::vector<std::size_t> members;
  for (std::size_t begin = 0; begin < T; begin += chunk) {
    const std::size_t len = std::min(chunk, T - begin);
    const std::size_t cap = len * k / N;
    if (cap == 0)
      throw ContractError("expert_choice_select: capacity is 0 for a chunk of " +
                          std::to_string(len) + " tokens (K=" + std::to_string(k) +
                          ", N=" + std::to_string(N) + ")");
    for (std::size_t i = 0; i < N; ++i) {
      members.assign(order.begin() + static_cast<std::ptrdiff_t>(begin),
                     order.begin() + static_cast<std::ptrdiff_t>(begin + len));
      std::partial_sort(members.begin(), members.begin() + static_cast<std::ptrdiff_t>(cap),
                        members.end(), [&](std::size_t x, std::size_t y) {
                          const double sx = scores.at(x, i), sy = scores.at(y, i);
                          return sx > sy || (sx == sy && x < y);
                        });
      for (std::size_t j = 0; j < cap; ++j) {
        const std::size_t t = members[j];
        a.expert_tokens[i].push_back(t);
        a.token_experts[t].push_back(i);
        a.gate_weights[t * N + i] = scores.at(t, i);
      }
    }
  }
  for (auto& v : a.expert_tokens) std::sort(v.begin(), v.end());
  for (auto& v : a.token_experts) std::sort(v.begin(), v.end());
  return a;
}

CausalityReport causality_probe(const Router& router, std::span<const std::int32_t> stream,
                                std::size_t prefix_len, std::size_t trials, std::int32_t vocab,
                                std::uint64_t seed) {
  if (prefix_len >= stream.size())
    throw ContractError("causality_probe: prefix_len " + std::to_string(prefix_len) +
                        " must be below stream length " + std::to_string(stream.size()));
  const auto reference = router(stream);
  std::vector<std::int32_t> work(stream.begin(), stream.end());
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::int32_t> tok(0, vocab - 1);
  CausalityReport report;
  report.trials = trials;
  for (std::size_t trial = 0; trial < trials; ++trial) {
    for (std::size_t t = prefix_len; t < work.size(); ++t) work[t] = tok(rng);
    const auto routed = router(work);
    for (std::size_t t = 0; t < prefix_len; ++t) {
      if (routed[t] != reference[t]) {
        ++report.violations;
        break;
      }
    }
  }
  return report;
}

void write_assignment_csv(std::ostream& os, const RoutingAssignment& a) {
  os << "token_index,expert_index,gate_weight\n";
  for (std::size_t t = 0; t < a.tokens; ++t)
    for (std::size_t i : a.token_experts[t]) os << t << ',' << i << ',' << kv::from_double(a.gate(t, i)) << '\n';
}

}  // namespace moebal
