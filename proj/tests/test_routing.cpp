#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "moebal/errors.hpp"
#include "moebal/metrics.hpp"
#include "moebal/routing.hpp"

using namespace moebal;

namespace {

RoutingScores make_scores(std::size_t t, std::size_t n, std::vector<double> v,
                          GateKind g = GateKind::sigmoid) {
  return {ad::Tensor::from({t, n}, std::move(v)), g};
}

RoutingScores random_scores(std::mt19937_64& rng, std::size_t t, std::size_t n) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> v(t * n);
  for (double& x : v) x = u(rng);
  return make_scores(t, n, std::move(v));
}

// Full sort of (biased score desc, index asc) pairs; keeps the first K.
std::vector<std::vector<std::size_t>> sort_reference(const RoutingScores& s, std::span<const double> b,
                                                     std::size_t k, BiasForm form) {
  std::vector<std::vector<std::size_t>> out(s.tokens());
  for (std::size_t t = 0; t < s.tokens(); ++t) {
    std::vector<std::pair<double, std::size_t>> keyed;
    for (std::size_t i = 0; i < s.experts(); ++i)
      keyed.push_back({form == BiasForm::additive ? s.at(t, i) + b[i] : s.at(t, i) * b[i], i});
    std::sort(keyed.begin(), keyed.end(), [](const auto& x, const auto& y) {
      return x.first != y.first ? x.first > y.first : x.second < y.second;
    });
    for (std::size_t j = 0; j < k; ++j) out[t].push_back(keyed[j].second);
    std::sort(out[t].begin(), out[t].end());
  }
  return out;
}

}  // namespace

TEST_CASE("compute_scores") {
  ad::Tape tape;
  std::mt19937_64 rng(1);
  auto zeros = ad::Tensor::zeros({3, 5});
  auto c = ad::Tensor::from({5, 4}, std::vector<double>(20, 0.3));
  const auto half = compute_scores(tape, zeros, c, GateKind::sigmoid);
  for (double v : half.values.data()) CHECK(v == 0.5);
  const auto quarter = compute_scores(tape, zeros, c, GateKind::softmax);
  for (double v : quarter.values.data()) CHECK(v == 0.25);

  std::normal_distribution<double> nd;
  std::vector<double> h(6 * 5), cv(5 * 4);
  for (double& x : h) x = nd(rng);
  for (double& x : cv) x = nd(rng);
  auto hs = ad::Tensor::from({6, 5}, h);
  auto cs = ad::Tensor::from({5, 4}, cv);
  const auto sig = compute_scores(tape, hs, cs, GateKind::sigmoid);
  const auto smx = compute_scores(tape, hs, cs, GateKind::softmax);
  for (std::size_t t = 0; t < 6; ++t) {
    std::vector<double> logits(4);
    for (std::size_t i = 0; i < 4; ++i) {
      double z = 0.0;
      for (std::size_t j = 0; j < 5; ++j) z += h[t * 5 + j] * cv[j * 4 + i];
      logits[i] = z;
      CHECK(sig.at(t, i) == doctest::Approx(1.0 / (1.0 + std::exp(-z))).epsilon(1e-15));
      CHECK(sig.at(t, i) > 0.0);
      CHECK(sig.at(t, i) < 1.0);
    }
    const double mx = *std::max_element(logits.begin(), logits.end());
    double den = 0.0;
    for (double z : logits) den += std::exp(z - mx);
    double row = 0.0;
    for (std::size_t i = 0; i < 4; ++i) {
      CHECK(smx.at(t, i) == doctest::Approx(std::exp(logits[i] - mx) / den).epsilon(1e-14));
      row += smx.at(t, i);
    }
    CHECK(std::abs(row - 1.0) < 1e-9);
  }
  CHECK_THROWS_AS(compute_scores(tape, ad::Tensor::zeros({3, 4}), c, GateKind::sigmoid), DimensionError);
}

TEST_CASE("topk_select examples") {
  const auto s = make_scores(1, 3, {0.9, 0.5, 0.1});
  const std::vector<double> bias{0.0, 0.5, 0.0};
  const auto a = topk_select(s, bias, 1);
  CHECK(a.token_experts[0] == std::vector<std::size_t>{1});
  CHECK(a.gate(0, 1) == 0.5);
  CHECK(a.gate(0, 0) == 0.0);

  std::mt19937_64 rng(2);
  const auto r = random_scores(rng, 5, 4);
  const auto all = topk_select(r, std::vector<double>(4, 0.0), 4);
  for (std::size_t t = 0; t < 5; ++t)
    for (std::size_t i = 0; i < 4; ++i) CHECK(all.gate(t, i) == r.at(t, i));

  CHECK_THROWS_AS(topk_select(r, std::vector<double>(4, 0.0), 5), ContractError);
  CHECK_THROWS_AS(topk_select(r, std::vector<double>(3, 0.0), 2), DimensionError);

  SUBCASE("ties go to the lowest index") {
    const auto tie = make_scores(1, 4, {0.5, 0.7, 0.7, 0.7});
    CHECK(topk_select(tie, std::vector<double>(4, 0.0), 2).token_experts[0] ==
          std::vector<std::size_t>{1, 2});
  }
  SUBCASE("multiplicative bias") {
    const auto m = topk_select(s, std::vector<double>{1.0, 2.0, 1.0}, 1, BiasForm::multiplicative);
    CHECK(m.token_experts[0] == std::vector<std::size_t>{1});  // 0.5 * 2 > 0.9
    CHECK(m.gate(0, 1) == 0.5);
    const auto m2 = topk_select(s, std::vector<double>{1.0, 1.5, 1.0}, 1, BiasForm::multiplicative);
    CHECK(m2.token_experts[0] == std::vector<std::size_t>{0});  // 0.9 > 0.75
    CHECK(m2.gate(0, 0) == 0.9);
  }
}

TEST_CASE("topk_select matches a full-sort reference") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  for (int c = 0; c < 1000; ++c) {
    const std::size_t n = 1 + rng() % 9, t = 1 + rng() % 12, k = 1 + rng() % n;
    auto s = random_scores(rng, t, n);
    std::vector<double> b(n);
    for (double& x : b) x = u(rng);
    if (c % 7 == 0) {  // force ties
      auto d = s.values.mutable_data();
      for (double& x : d) x = std::round(x * 4) / 4;
      std::fill(b.begin(), b.end(), 0.0);
    }
    const auto form = c % 2 ? BiasForm::additive : BiasForm::multiplicative;
    if (form == BiasForm::multiplicative)
      for (double& x : b) x += 1.0;
    const auto a = topk_select(s, b, k, form);
    REQUIRE(a.token_experts == sort_reference(s, b, k, form));
    for (std::size_t tt = 0; tt < t; ++tt) {
      CHECK(a.token_experts[tt].size() == k);
      double row = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        CHECK(a.gate(tt, i) == (a.selected(tt, i) ? s.at(tt, i) : 0.0));
        CHECK(a.gate(tt, i) <= 1.0);
        row += a.gate(tt, i);
      }
      CHECK(row <= static_cast<double>(k));
    }
  }
}

TEST_CASE("constant bias shift leaves selection unchanged") {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-0.3, 0.3);
  for (int c = 0; c < 200; ++c) {
    const std::size_t n = 2 + rng() % 7, k = 1 + rng() % n;
    // Scores and biases on a dyadic grid so that adding the shift is exact.
    auto s = random_scores(rng, 10, n);
    for (double& x : s.values.mutable_data()) x = std::round(x * 64) / 64;
    std::vector<double> b(n), shifted(n);
    for (std::size_t i = 0; i < n; ++i) b[i] = std::round(u(rng) * 64) / 64;
    const double shift = std::round(u(rng) * 64) / 64;
    for (std::size_t i = 0; i < n; ++i) shifted[i] = b[i] + shift;
    CHECK(topk_select(s, b, k).token_experts == topk_select(s, shifted, k).token_experts);
  }
}

TEST_CASE("zero bias is plain top-K") {
  std::mt19937_64 rng(5);
  const auto s = random_scores(rng, 30, 8);
  const auto a = topk_select(s, std::vector<double>(8, 0.0), 2);
  for (std::size_t t = 0; t < 30; ++t) {
    std::vector<std::size_t> idx(8);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::partial_sort(idx.begin(), idx.begin() + 2, idx.end(),
                      [&](std::size_t x, std::size_t y) { return s.at(t, x) > s.at(t, y); });
    std::vector<std::size_t> top{idx[0], idx[1]};
    std::sort(top.begin(), top.end());
    CHECK(a.token_experts[t] == top);
  }
}

TEST_CASE("expert_choice_select") {
  SUBCASE("hand enumeration N=2 K=1 T=4") {
    // Expert 0 prefers every token but takes only its top two.
    const auto s = make_scores(4, 2, {0.9, 0.1, 0.6, 0.1, 0.8, 0.2, 0.7, 0.3});
    const auto a = expert_choice_select(s, {}, 1);
    CHECK(a.expert_tokens[0] == std::vector<std::size_t>{0, 2});
    CHECK(a.expert_tokens[1] == std::vector<std::size_t>{2, 3});
    CHECK(a.loads() == std::vector<std::int64_t>{2, 2});
    CHECK(a.gate(2, 0) == 0.8);
    CHECK(a.gate(1, 0) == 0.0);
  }
  SUBCASE("uniform scores fill every expert exactly") {
    const auto s = make_scores(12, 3, std::vector<double>(36, 0.5));
    const auto a = expert_choice_select(s, {4, false, 0}, 2);
    for (std::size_t i = 0; i < 3; ++i) CHECK(a.expert_tokens[i] == std::vector<std::size_t>{0, 1, 4, 5, 8, 9});
    CHECK(a.loads() == std::vector<std::int64_t>{6, 6, 6});
  }
  SUBCASE("capacity zero") {
    const auto s = make_scores(2, 8, std::vector<double>(16, 0.5));
    CHECK_THROWS_AS(expert_choice_select(s, {}, 1), ContractError);
  }
  SUBCASE("per-chunk loads are exact and shuffling keeps them") {
    std::mt19937_64 rng(6);
    for (int c = 0; c < 200; ++c) {
      const std::size_t n = 1 + rng() % 8, k = 1 + rng() % n, chunk = 2 + rng() % 10;
      const std::size_t chunks = 1 + rng() % 4, t = chunk * chunks;
      if (chunk * k / n == 0) continue;
      const auto s = random_scores(rng, t, n);
      const std::size_t cap = chunk * k / n;
      for (bool shuffle : {false, true}) {
        const auto a = expert_choice_select(s, {chunk, shuffle, rng()}, k);
        for (std::size_t i = 0; i < n; ++i) CHECK(a.expert_tokens[i].size() == cap * chunks);
        if (!shuffle) {
          for (std::size_t ch = 0; ch < chunks; ++ch) {
            std::vector<std::int64_t> load(n, 0);
            for (std::size_t i = 0; i < n; ++i)
              for (auto tok : a.expert_tokens[i])
                if (tok / chunk == ch) ++load[i];
            for (auto l : load) CHECK(l == static_cast<std::int64_t>(cap));
            if ((chunk * k) % n == 0) CHECK(maxvio(load) == 0.0);
          }
          // Each expert's picks are its top-cap scores inside the chunk.
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t ch = 0; ch < chunks; ++ch) {
              std::vector<std::size_t> idx(chunk);
              std::iota(idx.begin(), idx.end(), ch * chunk);
              std::stable_sort(idx.begin(), idx.end(),
                               [&](std::size_t x, std::size_t y) { return s.at(x, i) > s.at(y, i); });
              std::vector<std::size_t> want(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(cap));
              std::sort(want.begin(), want.end());
              std::vector<std::size_t> got;
              for (auto tok : a.expert_tokens[i])
                if (tok / chunk == ch) got.push_back(tok);
              CHECK(got == want);
            }
        }
      }
    }
  }
  SUBCASE("shuffle permutes which tokens share a chunk") {
    std::mt19937_64 rng(7);
    const auto s = random_scores(rng, 64, 4);
    const auto plain = expert_choice_select(s, {8, false, 0}, 1);
    const auto shuf = expert_choice_select(s, {8, true, 99}, 1);
    CHECK(plain.loads() == shuf.loads());
    CHECK(plain.expert_tokens != shuf.expert_tokens);
    CHECK(expert_choice_select(s, {8, true, 99}, 1).expert_tokens == shuf.expert_tokens);
  }
  SUBCASE("token_permutation") {
    auto p = token_permutation(50, 3);
    CHECK(p == token_permutation(50, 3));
    CHECK(p != token_permutation(50, 4));
    std::sort(p.begin(), p.end());
    for (std::size_t i = 0; i < 50; ++i) CHECK(p[i] == i);
  }
}

TEST_CASE("causality_probe") {
  std::mt19937_64 init(8);
  std::vector<double> table(16 * 8);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (double& x : table) x = u(init);
  auto scores_of = [&](std::span<const std::int32_t> toks) {
    std::vector<double> v;
    for (auto tk : toks) v.insert(v.end(), table.begin() + tk * 8, table.begin() + tk * 8 + 8);
    return make_scores(toks.size(), 8, v);
  };
  auto sets = [](const RoutingAssignment& a) { return a.token_experts; };
  std::vector<std::int32_t> stream(32);
  for (auto& x : stream) x = static_cast<std::int32_t>(init() % 16);

  const Router vanilla = [&](auto toks) { return sets(topk_select(scores_of(toks), std::vector<double>(8, 0.0), 2)); };
  const std::vector<double> frozen{0.1, -0.2, 0.05, 0.0, 0.3, -0.1, 0.0, 0.02};
  const Router loss_free = [&](auto toks) { return sets(topk_select(scores_of(toks), frozen, 2)); };
  for (const auto* r : {&vanilla, &loss_free})
    for (std::size_t prefix : {1, 8, 31}) {
      const auto rep = causality_probe(*r, stream, prefix, 300, 16, prefix);
      CHECK(rep.trials == 300);
      CHECK(rep.violations == 0);
    }

  // A token that loves expert 0 displaces a prefix token from it.
  const Router ec = [&](auto toks) {
    std::vector<double> v(toks.size() * 2);
    for (std::size_t t = 0; t < toks.size(); ++t) {
      v[2 * t] = toks[t] == 15 ? 0.99 : 0.5 - 0.01 * static_cast<double>(t);
      v[2 * t + 1] = 0.5;
    }
    return sets(expert_choice_select(make_scores(toks.size(), 2, v), {}, 1));
  };
  const auto rep = causality_probe(ec, std::vector<std::int32_t>{0, 0, 0, 0, 0, 0, 0, 0}, 4, 200, 16, 1);
  CHECK(rep.violations > 0);
}

TEST_CASE("assignment csv") {
  const auto s = make_scores(2, 3, {0.1, 0.2, 0.3, 0.6, 0.5, 0.4});
  const auto a = topk_select(s, std::vector<double>(3, 0.0), 1);
  std::ostringstream os;
  write_assignment_csv(os, a);
  CHECK(os.str() == "token_index,expert_index,gate_weight\n0,2,0.3\n1,0,0.6\n");
}
