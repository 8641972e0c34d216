#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

#include "model_gradcheck.hpp"
#include "moebal/errors.hpp"
#include "moebal/model.hpp"

using namespace moebal;

namespace {

ModelConfig tiny(RoutingStrategy s = RoutingStrategy::vanilla) {
  ModelConfig c;
  c.vocab_size = 16;
  c.d_model = 8;
  c.n_layers = 2;
  c.seq_len = 8;
  c.d_ff = 16;
  c.routed_experts = 4;
  c.top_k = 2;
  c.shared_experts = 1;
  c.d_expert = 4;
  c.strategy = s;
  c.seed = 3;
  return c;
}

std::vector<std::int32_t> random_tokens(std::mt19937_64& rng, std::size_t n, std::size_t vocab) {
  std::vector<std::int32_t> v(n);
  for (auto& x : v) x = static_cast<std::int32_t>(rng() % vocab);
  return v;
}

Batch random_batch(std::mt19937_64& rng, const ModelConfig& c, std::size_t b) {
  Batch batch;
  batch.batch_size = b;
  batch.seq_len = c.seq_len;
  batch.tokens = random_tokens(rng, b * (c.seq_len + 1), c.vocab_size);
  return batch;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("moebal_test_" + name)).string();
}

std::string slurp(const std::string& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

}  // namespace

TEST_CASE("config") {
  CHECK_NOTHROW(tiny().validate());
  auto bad = tiny();
  bad.top_k = 5;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  auto c = tiny(RoutingStrategy::loss_free);
  ModelConfig back;
  CHECK(back.apply(c.to_key_values()).empty());
  CHECK(back.to_key_values() == c.to_key_values());
  CHECK(back.apply({{"no_such_key", "1"}}).size() == 1);
  CHECK(parse_strategy("ec") == RoutingStrategy::expert_choice);
  CHECK_THROWS_AS(parse_strategy("greedy"), ConfigError);
  const auto ref = ModelConfig::reference_1b_preset();
  CHECK(ref.routed_experts == 64);
  CHECK(ref.top_k == 6);
  CHECK(ref.shared_experts == 2);
}

TEST_CASE("first block is dense, the rest are MoE") {
  auto c = tiny();
  c.n_layers = 4;
  MoEModel m(c);
  CHECK(m.blocks()[0].dense.has_value());
  CHECK(!m.blocks()[0].moe.has_value());
  for (std::size_t b = 1; b < 4; ++b) {
    CHECK(!m.blocks()[b].dense.has_value());
    CHECK(m.blocks()[b].moe->routed.size() == 4);
    CHECK(m.blocks()[b].moe->shared.size() == 1);
  }
  CHECK(m.bias_states().size() == 3);
}

TEST_CASE("moe layer against a dense oracle") {
  std::mt19937_64 rng(1);
  auto u = testutil::random_tensor(rng, {5, 4}, -1, 1, false);
  auto ffn = [&] { return FfnParams{testutil::random_tensor(rng, {4, 3}), testutil::random_tensor(rng, {3, 4})}; };
  MoELayerParams p;
  p.centroids = testutil::random_tensor(rng, {4, 1});
  p.routed = {ffn()};
  p.shared = {ffn()};
  p.bias = ExpertBiasState::initial(1, UpdateRule::sign, BiasForm::additive, 0.0);

  ad::Tape tape;
  MoERouting r;
  r.top_k = 1;
  const auto out = moe_layer_forward(tape, u, p, r);
  const auto n = ad::layer_norm(tape, u);
  const auto s = out.scores;
  const auto shared = ffn_forward(tape, n, p.shared[0]);
  const auto routed = ffn_forward(tape, n, p.routed[0]);
  for (std::size_t t = 0; t < 5; ++t)
    for (std::size_t j = 0; j < 4; ++j) {
      const double want = u.at(t, j) + shared.at(t, j) + s.at(t, 0) * routed.at(t, j);
      CHECK(out.hidden.at(t, j) == doctest::Approx(want).epsilon(1e-14));
    }

  r.zero_routed_gates = true;
  const auto masked = moe_layer_forward(tape, u, p, r);
  for (std::size_t t = 0; t < 5; ++t)
    for (std::size_t j = 0; j < 4; ++j)
      CHECK(masked.hidden.at(t, j) == doctest::Approx(u.at(t, j) + shared.at(t, j)).epsilon(1e-14));
}

TEST_CASE("end-to-end gradients match finite differences") {
  std::mt19937_64 rng(2);
  double worst = 0.0;
  for (int c = 0; c < 20; ++c) {
    const auto cfg = testutil::gradcheck_config(rng);
    MoEModel m(cfg);
    for (auto* b : m.bias_states())
      for (auto& x : b->bias) x = 0.05 * static_cast<double>(rng() % 7) - 0.15;
    const std::size_t n = 2 * cfg.seq_len;
    const auto tokens = random_tokens(rng, n, cfg.vocab_size);
    const auto targets = random_tokens(rng, n, cfg.vocab_size);
    const auto rep = testutil::model_grad_error(m, tokens, targets);
    CHECK(rep.checked == m.parameter_count());
    worst = std::max(worst, rep.worst);
  }
  INFO("worst relative error " << worst);
  CHECK(worst < 1e-4);
}

TEST_CASE("logits at t ignore tokens after t") {
  for (auto s : {RoutingStrategy::vanilla, RoutingStrategy::aux_loss, RoutingStrategy::loss_free}) {
    auto c = tiny(s);
    c.init_std = 0.3;
    MoEModel m(c);
    for (auto* b : m.bias_states()) b->bias = {0.1, -0.1, 0.02, 0.0};
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 20; ++trial) {
      auto a = random_tokens(rng, 2 * c.seq_len, c.vocab_size);
      const std::size_t cut = rng() % c.seq_len;
      auto b = a;
      for (std::size_t t = cut + 1; t < c.seq_len; ++t) b[t] = static_cast<std::int32_t>(rng() % c.vocab_size);
      ad::Tape tape;
      tape.set_grad_enabled(false);
      const auto la = m.forward(tape, a).logits, lb = m.forward(tape, b).logits;
      for (std::size_t t = 0; t <= cut; ++t)
        for (std::size_t v = 0; v < c.vocab_size; ++v) REQUIRE(la.at(t, v) == lb.at(t, v));
      // The second sequence is untouched entirely.
      for (std::size_t t = c.seq_len; t < 2 * c.seq_len; ++t)
        for (std::size_t v = 0; v < c.vocab_size; ++v) REQUIRE(la.at(t, v) == lb.at(t, v));
    }
  }
}

TEST_CASE("train_step") {
  SUBCASE("vanilla has no aux loss") {
    MoEModel m(tiny());
    Adam opt(m.parameters(), {});
    std::mt19937_64 rng(1);
    CHECK(train_step(m, opt, random_batch(rng, m.config(), 2), 0).aux_loss == 0.0);
  }
  SUBCASE("aux strategy reports the aux loss") {
    auto c = tiny(RoutingStrategy::aux_loss);
    c.alpha = 0.01;
    MoEModel m(c);
    Adam opt(m.parameters(), {});
    std::mt19937_64 rng(1);
    CHECK(train_step(m, opt, random_batch(rng, c, 2), 0).aux_loss > 0.0);
  }
  SUBCASE("loss-free first step routes like vanilla") {
    MoEModel a(tiny()), b(tiny(RoutingStrategy::loss_free));
    std::mt19937_64 rng(4);
    const auto toks = random_tokens(rng, 2 * 8, 16);
    CHECK(a.route(toks) == b.route(toks));
  }
  SUBCASE("bias update follows the batch loads by hand") {
    auto c = tiny(RoutingStrategy::loss_free);
    c.init_std = 0.3;
    c.update_rate = 0.05;
    MoEModel m(c);
    AdamConfig frozen;
    frozen.lr = 0.0;
    Adam opt(m.parameters(), frozen);
    std::mt19937_64 rng(6);
    const auto batch = random_batch(rng, c, 4);
    const auto before = m.route(batch.inputs());
    std::vector<std::int64_t> load(4, 0);
    for (const auto& set : before[0])
      for (auto e : set) ++load[e];
    const auto expected = update_bias(*m.bias_states()[0], load);
    const auto rec = train_step(m, opt, batch, 0);
    CHECK(rec.layer_loads[0] == load);
    CHECK(m.bias_states()[0]->bias == expected.bias);

    // Second step: routing is exactly top-K under the hand-updated bias.
    ad::Tape tape;
    tape.set_grad_enabled(false);
    const auto fr = m.forward(tape, batch.inputs());
    const auto want = topk_select(fr.scores[0], expected.bias, c.top_k);
    CHECK(m.route(batch.inputs())[0] == want.token_experts);
  }
  SUBCASE("u = 0 loss-free is vanilla") {
    auto lf = tiny(RoutingStrategy::loss_free);
    lf.update_rate = 0.0;
    MoEModel a(tiny()), b(lf);
    Adam oa(a.parameters(), {}), ob(b.parameters(), {});
    std::mt19937_64 ra(9), rb(9);
    for (std::size_t s = 0; s < 10; ++s) {
      const auto x = train_step(a, oa, random_batch(ra, a.config(), 2), s);
      const auto y = train_step(b, ob, random_batch(rb, b.config(), 2), s);
      CHECK(x.lm_loss == y.lm_loss);
      CHECK(x.layer_loads == y.layer_loads);
    }
    const auto pa = a.parameters(), pb = b.parameters();
    for (std::size_t i = 0; i < pa.size(); ++i)
      CHECK(std::vector<double>(pa[i].tensor.data().begin(), pa[i].tensor.data().end()) ==
            std::vector<double>(pb[i].tensor.data().begin(), pb[i].tensor.data().end()));
  }
  SUBCASE("non-finite values abort") {
    MoEModel m(tiny());
    Adam opt(m.parameters(), {});
    m.head().mutable_data()[0] = NAN;
    std::mt19937_64 rng(1);
    CHECK_THROWS_AS(train_step(m, opt, random_batch(rng, m.config(), 2), 0), NumericError);
  }
}

TEST_CASE("evaluate") {
  SUBCASE("untrained model on uniform tokens is near maximum entropy") {
    auto c = tiny();
    c.vocab_size = 64;
    MoEModel m(c);
    std::mt19937_64 rng(1);
    const auto r = evaluate(m, random_tokens(rng, 9 * 64, 64), 8);
    CHECK(r.tokens == 64 * 8);
    CHECK(std::abs(r.perplexity - 64.0) / 64.0 < 0.05);
  }
  SUBCASE("independent NLL loop") {
    auto c = tiny();
    c.init_std = 0.3;
    MoEModel m(c);
    std::mt19937_64 rng(2);
    const auto stream = random_tokens(rng, 5 * 9 + 4, 16);
    const auto r = evaluate(m, stream, 2);
    double nll = 0.0;
    std::size_t count = 0;
    for (std::size_t w = 0; w + 9 <= stream.size(); w += 9) {
      std::vector<std::int32_t> in(stream.begin() + static_cast<std::ptrdiff_t>(w),
                                   stream.begin() + static_cast<std::ptrdiff_t>(w + 8));
      ad::Tape tape;
      tape.set_grad_enabled(false);
      const auto logits = m.forward(tape, in).logits;
      for (std::size_t t = 0; t < 8; ++t) {
        double mx = -INFINITY;
        for (std::size_t v = 0; v < 16; ++v) mx = std::max(mx, logits.at(t, v));
        double z = 0.0;
        for (std::size_t v = 0; v < 16; ++v) z += std::exp(logits.at(t, v) - mx);
        nll += -(logits.at(t, static_cast<std::size_t>(stream[w + t + 1])) - mx - std::log(z));
        ++count;
      }
    }
    CHECK(r.tokens == count);
    CHECK(r.mean_nll == doctest::Approx(nll / static_cast<double>(count)).epsilon(1e-12));
    CHECK(r.perplexity == doctest::Approx(std::exp(nll / static_cast<double>(count))).epsilon(1e-12));
    REQUIRE(r.sample_loads.size() == 1);
    CHECK(r.sample_loads[0].size() == 5);
  }
  SUBCASE("single-token corpus is learned") {
    auto c = tiny();
    MoEModel m(c);
    AdamConfig ac;
    ac.lr = 1e-2;
    ac.warmup_steps = 10;
    Adam opt(m.parameters(), ac);
    Batch b;
    b.batch_size = 2;
    b.seq_len = c.seq_len;
    b.tokens.assign(2 * (c.seq_len + 1), 7);
    for (std::size_t s = 0; s < 150; ++s) train_step(m, opt, b, s);
    const auto r = evaluate(m, std::vector<std::int32_t>(4 * 9, 7), 2);
    CHECK(r.perplexity < 1.01);
  }
}

TEST_CASE("checkpoint round trip") {
  auto c = tiny(RoutingStrategy::loss_free);
  c.n_heads = 2;
  MoEModel m(c);
  Adam opt(m.parameters(), {});
  std::mt19937_64 rng(3);
  for (std::size_t s = 0; s < 5; ++s) train_step(m, opt, random_batch(rng, c, 2), s);
  const auto p1 = temp_path("a.bin"), p2 = temp_path("b.bin");
  save_checkpoint(m, p1);
  const auto loaded = load_checkpoint(p1);
  CHECK(loaded.config().to_key_values() == c.to_key_values());
  CHECK(loaded.bias_states()[0]->bias == m.bias_states()[0]->bias);
  const auto stream = random_tokens(rng, 4 * 9, 16);
  const auto ra = evaluate(m, stream, 2), rb = evaluate(loaded, stream, 2);
  CHECK(ra.perplexity == rb.perplexity);
  CHECK(ra.maxvio_global == rb.maxvio_global);
  save_checkpoint(loaded, p2);
  CHECK(slurp(p1) == slurp(p2));

  SUBCASE("corrupt files") {
    auto bytes = slurp(p1);
    std::ofstream(p2, std::ios::binary) << bytes.substr(0, bytes.size() - 3);
    CHECK_THROWS_AS(load_checkpoint(p2), IoError);
    std::ofstream(p2, std::ios::binary) << "NOTMOEBAL";
    CHECK_THROWS_AS(load_checkpoint(p2), IoError);
    CHECK_THROWS_AS(load_checkpoint(temp_path("missing.bin")), IoError);
  }
  std::remove(p1.c_str());
  std::remove(p2.c_str());
}
