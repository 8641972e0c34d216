#include "moebal/model.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <random>

#include "moebal/errors.hpp"
#include "moebal/metrics.hpp"

namespace moebal {

const char* to_string(RoutingStrategy s) {
  switch (s) {
    case RoutingStrategy::vanilla: return "vanilla";
    case RoutingStrategy::aux_loss: return "aux";
    case RoutingStrategy::loss_free: return "loss-free";
    case RoutingStrategy::expert_choice: return "ec";
  }
  return "?";
}
const char* to_string(GateKind g) { return g == GateKind::sigmoid ? "sigmoid" : "softmax"; }
const char* to_string(UpdateRule r) { return r == UpdateRule::sign ? "sign" : "prop"; }
const char* to_string(BiasForm f) { return f == BiasForm::additive ? "add" : "mul"; }

RoutingStrategy parse_strategy(const std::string& s) {
  if (s == "vanilla") return RoutingStrategy::vanilla;
  if (s == "aux") return RoutingStrategy::aux_loss;
  if (s == "loss-free") return RoutingStrategy::loss_free;
  if (s == "ec") return RoutingStrategy::expert_choice;
  throw ConfigError("unknown strategy '" + s + "' (vanilla|aux|loss-free|ec)");
}
GateKind parse_gate(const std::string& s) {
  if (s == "sigmoid") return GateKind::sigmoid;
  if (s == "softmax") return GateKind::softmax;
  throw ConfigError("unknown gate '" + s + "' (sigmoid|softmax)");
}
UpdateRule parse_update_rule(const std::string& s) {
  if (s == "sign") return UpdateRule::sign;
  if (s == "prop") return UpdateRule::proportional;
  throw ConfigError("unknown update rule '" + s + "' (sign|prop)");
}
BiasForm parse_bias_form(const std::string& s) {
  if (s == "add") return BiasForm::additive;
  if (s == "mul") return BiasForm::multiplicative;
  throw ConfigError("unknown bias form '" + s + "' (add|mul)");
}

// -- ModelConfig -------------------------------------------------------------

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("model config: " + m); };
  if (vocab_size < 2) fail("vocab_size must be >= 2");
  if (d_model == 0) fail("d_model must be positive");
  if (n_layers == 0) fail("n_layers must be positive");
  if (n_heads == 0 || d_model % n_heads != 0) fail("n_heads must divide d_model");
  if (seq_len == 0) fail("seq_len must be positive");
  if (d_ff == 0) fail("d_ff must be positive");
  if (moe_layers() > 0) {
    if (routed_experts == 0) fail("routed_experts must be positive");
    if (top_k == 0 || top_k > routed_experts) fail("top_k must be in [1, routed_experts]");
    if (d_expert == 0) fail("d_expert must be positive");
  }
  if (!(alpha >= 0.0)) fail("alpha must be >= 0");
  if (!(update_rate >= 0.0)) fail("update_rate must be >= 0");
  if (!(init_std > 0.0)) fail("init_std must be > 0");
}

KeyValues ModelConfig::to_key_values() const {
  return {
      {"vocab_size", std::to_string(vocab_size)},
      {"d_model", std::to_string(d_model)},
      {"n_layers", std::to_string(n_layers)},
      {"n_heads", std::to_string(n_heads)},
      {"seq_len", std::to_string(seq_len)},
      {"d_ff", std::to_string(d_ff)},
      {"routed_experts", std::to_string(routed_experts)},
      {"top_k", std::to_string(top_k)},
      {"shared_experts", std::to_string(shared_experts)},
      {"d_expert", std::to_string(d_expert)},
      {"gate", to_string(gate)},
      {"normalize_topk", normalize_topk ? "true" : "false"},
      {"strategy", to_string(strategy)},
      {"alpha", kv::from_double(alpha)},
      {"update_rule", to_string(update_rule)},
      {"bias_form", to_string(bias_form)},
      {"update_rate", kv::from_double(update_rate)},
      {"ec_chunk_size", std::to_string(ec_chunk_size)},
      {"ec_shuffle", ec_shuffle ? "true" : "false"},
      {"init_std", kv::from_double(init_std)},
      {"seed", std::to_string(seed)},
  };
}

KeyValues ModelConfig::apply(const KeyValues& kvs) {
  KeyValues rest;
  auto size = [](const std::string& k, const std::string& v) {
    const auto n = kv::to_int(k, v);
    if (n < 0) throw ConfigError("key '" + k + "' must be non-negative");
    return static_cast<std::size_t>(n);
  };
  for (const auto& [k, v] : kvs) {
    if (k == "vocab_size") vocab_size = size(k, v);
    else if (k == "d_model") d_model = size(k, v);
    else if (k == "n_layers") n_layers = size(k, v);
    else if (k == "n_heads") n_heads = size(k, v);
    else if (k == "seq_len") seq_len = size(k, v);
    else if (k == "d_ff") d_ff = size(k, v);
    else if (k == "routed_experts") routed_experts = size(k, v);
    else if (k == "top_k") top_k = size(k, v);
    else if (k == "shared_experts") shared_experts = size(k, v);
    else if (k == "d_expert") d_expert = size(k, v);
    else if (k == "gate") gate = parse_gate(v);
    else if (k == "normalize_topk") normalize_topk = kv::to_bool(k, v);
    else if (k == "strategy") strategy = parse_strategy(v);
    else if (k == "alpha") alpha = kv::to_double(k, v);
    else if (k == "update_rule") update_rule = parse_update_rule(v);
    else if (k == "bias_form") bias_form = parse_bias_form(v);
    else if (k == "update_rate") update_rate = kv::to_double(k, v);
    else if (k == "ec_chunk_size") ec_chunk_size = size(k, v);
    else if (k == "ec_shuffle") ec_shuffle = kv::to_bool(k, v);
    else if (k == "init_std") init_std = kv::to_double(k, v);
    else if (k == "seed") seed = static_cast<std::uint64_t>(size(k, v));
    else rest.emplace_back(k, v);
  }
  return rest;
}

ModelConfig ModelConfig::reference_1b_preset() {
  ModelConfig c;
  c.vocab_size = 32064;
  c.d_model = 1024;
  c.n_heads = 8;
  c.n_layers = 10;  // dense first block + 9 MoE blocks
  c.seq_len = 2048;
  c.d_ff = 4096;
  c.d_expert = 768;  // granularity 16/3
  c.routed_experts = 64;
  c.top_k = 6;
  c.shared_experts = 2;
  return c;
}

// -- layers ------------------------------------------------------------------

ad::Tensor ffn_forward(ad::Tape& tape, const ad::Tensor& x, const FfnParams& p) {
  return ad::matmul(tape, ad::silu(tape, ad::matmul(tape, x, p.up)), p.down);
}

MoELayerOutput moe_layer_forward(ad::Tape& tape, const ad::Tensor& u, const MoELayerParams& params,
                                 const MoERouting& routing) {
  MoELayerOutput out;
  const auto n = ad::layer_norm(tape, u);
  out.scores = compute_scores(tape, n, params.centroids, routing.gate);
  const std::size_t experts = params.routed.size();

  if (routing.frozen) {
    out.assignment = *routing.frozen;
  } else if (routing.strategy == RoutingStrategy::expert_choice) {
    out.assignment = expert_choice_select(out.scores, routing.ec, routing.top_k);
  } else if (routing.strategy == RoutingStrategy::loss_free) {
    out.assignment = topk_select(out.scores, params.bias.bias, routing.top_k, params.bias.form);
  } else {
    const std::vector<double> zero(experts, 0.0);
    out.assignment = topk_select(out.scores, zero, routing.top_k);
  }

  auto h = u;
  for (const auto& shared : params.shared) h = ad::add(tape, h, ffn_forward(tape, n, shared));

  if (!routing.zero_routed_gates) {
    const auto& a = out.assignment;
    auto gates = ad::mul(tape, out.scores.values,
                         ad::Tensor::from({a.tokens, a.experts}, a.mask()));
    if (routing.normalize_topk) gates = ad::row_normalize(tape, gates);
    for (std::size_t i = 0; i < experts; ++i) {
      const auto& rows = a.expert_tokens[i];
      if (rows.empty()) continue;
      const auto y = ffn_forward(tape, ad::gather_rows(tape, n, rows), params.routed[i]);
      const auto g = ad::pick_column(tape, gates, rows, i);
      h = ad::index_add(tape, h, rows, ad::mul_rows(tape, y, g));
    }
  }
  out.hidden = h;
  return out;
}

// -- MoEModel ----------------------------------------------------------------

namespace {

struct Init {
  std::mt19937_64 rng;
  std::normal_distribution<double> dist;
  Init(std::uint64_t seed, double std) : rng(seed), dist(0.0, std) {}
  ad::Tensor operator()(std::size_t r, std::size_t c) {
    std::vector<double> v(r * c);
    for (double& x : v) x = dist(rng);
    return ad::Tensor::from({r, c}, std::move(v), true);
  }
};

FfnParams make_ffn(Init& init, std::size_t d, std::size_t h) { return {init(d, h), init(h, d)}; }

}  // namespace

MoEModel::MoEModel(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  const auto& c = config_;
  Init init(c.seed, c.init_std);
  embed_ = init(c.vocab_size, c.d_model);
  blocks_.resize(c.n_layers);
  for (std::size_t b = 0; b < c.n_layers; ++b) {
    auto& blk = blocks_[b];
    blk.attn = {init(c.d_model, c.d_model), init(c.d_model, c.d_model),
                init(c.d_model, c.d_model), init(c.d_model, c.d_model)};
    if (b == 0) {
      blk.dense = make_ffn(init, c.d_model, c.d_ff);
    } else {
      MoELayerParams moe;
      moe.centroids = init(c.d_model, c.routed_experts);
      for (std::size_t i = 0; i < c.routed_experts; ++i)
        moe.routed.push_back(make_ffn(init, c.d_model, c.d_expert));
      for (std::size_t i = 0; i < c.shared_experts; ++i)
        moe.shared.push_back(make_ffn(init, c.d_model, c.d_expert));
      moe.bias = ExpertBiasState::initial(c.routed_experts, c.update_rule, c.bias_form,
                                          c.update_rate);
      blk.moe = std::move(moe);
    }
  }
  head_ = init(c.d_model, c.vocab_size);
}

std::vector<NamedTensor> MoEModel::parameters() const {
  std::vector<NamedTensor> out;
  out.push_back({"embed", embed_});
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    const auto& blk = blocks_[b];
    const std::string p = "block" + std::to_string(b) + ".";
    out.push_back({p + "attn.wq", blk.attn.wq});
    out.push_back({p + "attn.wk", blk.attn.wk});
    out.push_back({p + "attn.wv", blk.attn.wv});
    out.push_back({p + "attn.wo", blk.attn.wo});
    if (blk.dense) {
      out.push_back({p + "ffn.up", blk.dense->up});
      out.push_back({p + "ffn.down", blk.dense->down});
    }
    if (blk.moe) {
      out.push_back({p + "moe.centroids", blk.moe->centroids});
      for (std::size_t i = 0; i < blk.moe->routed.size(); ++i) {
        const std::string e = p + "moe.routed" + std::to_string(i) + ".";
        out.push_back({e + "up", blk.moe->routed[i].up});
        out.push_back({e + "down", blk.moe->routed[i].down});
      }
      for (std::size_t i = 0; i < blk.moe->shared.size(); ++i) {
        const std::string e = p + "moe.shared" + std::to_string(i) + ".";
        out.push_back({e + "up", blk.moe->shared[i].up});
        out.push_back({e + "down", blk.moe->shared[i].down});
      }
    }
  }
  out.push_back({"head", head_});
  return out;
}

std::size_t MoEModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

std::vector<ExpertBiasState*> MoEModel::bias_states() {
  std::vector<ExpertBiasState*> out;
  for (auto& b : blocks_)
    if (b.moe) out.push_back(&b.moe->bias);
  return out;
}

std::vector<const ExpertBiasState*> MoEModel::bias_states() const {
  std::vector<const ExpertBiasState*> out;
  for (const auto& b : blocks_)
    if (b.moe) out.push_back(&b.moe->bias);
  return out;
}

MoERouting MoEModel::routing_for(std::size_t moe_index, const ForwardOptions& opts) const {
  MoERouting r;
  r.strategy = config_.strategy;
  r.top_k = config_.top_k;
  r.gate = config_.gate;
  r.normalize_topk = config_.normalize_topk;
  r.ec.chunk_size = config_.ec_chunk_size;
  r.ec.shuffle = config_.ec_shuffle;
  r.ec.shuffle_seed = opts.ec_shuffle_seed + 0x9E3779B97F4A7C15ULL * (moe_index + 1);
  if (opts.frozen_routing) {
    if (opts.frozen_routing->size() != config_.moe_layers())
      throw ContractError("frozen routing must hold one assignment per MoE layer");
    r.frozen = &(*opts.frozen_routing)[moe_index];
  }
  r.zero_routed_gates = opts.zero_routed_gates;
  return r;
}

ForwardResult MoEModel::forward(ad::Tape& tape, std::span<const std::int32_t> tokens,
                                const ForwardOptions& opts) const {
  const auto& c = config_;
  if (tokens.empty() || tokens.size() % c.seq_len != 0)
    throw DimensionError("forward: " + std::to_string(tokens.size()) +
                         " tokens are not whole sequences of " + std::to_string(c.seq_len));
  ForwardResult out;
  auto x = ad::embedding_lookup(tape, embed_, tokens);
  std::size_t moe_index = 0;
  for (const auto& blk : blocks_) {
    const auto n = ad::layer_norm(tape, x);
    const auto q = ad::matmul(tape, n, blk.attn.wq);
    const auto k = ad::matmul(tape, n, blk.attn.wk);
    const auto v = ad::matmul(tape, n, blk.attn.wv);
    const auto att = ad::causal_attention(tape, q, k, v, c.seq_len, c.n_heads);
    x = ad::add(tape, x, ad::matmul(tape, att, blk.attn.wo));
    if (blk.dense) {
      x = ad::add(tape, x, ffn_forward(tape, ad::layer_norm(tape, x), *blk.dense));
    } else {
      auto moe = moe_layer_forward(tape, x, *blk.moe, routing_for(moe_index++, opts));
      x = moe.hidden;
      out.scores.push_back(std::move(moe.scores));
      out.routing.push_back(std::move(moe.assignment));
    }
  }
  out.logits = ad::matmul(tape, ad::layer_norm(tape, x), head_);
  return out;
}

std::vector<std::vector<std::vector<std::size_t>>> MoEModel::route(
    std::span<const std::int32_t> tokens) const {
  ad::Tape tape(false);
  tape.set_grad_enabled(false);
  auto fwd = forward(tape, tokens);
  std::vector<std::vector<std::vector<std::size_t>>> out;
  for (auto& a : fwd.routing) out.push_back(std::move(a.token_experts));
  return out;
}

// -- Adam --------------------------------------------------------------------

Adam::Adam(std::vector<NamedTensor> params, AdamConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
  for (const auto& p : params_) {
    m_.emplace_back(p.tensor.numel(), 0.0);
    v_.emplace_back(p.tensor.numel(), 0.0);
  }
}

double Adam::current_lr() const {
  if (cfg_.warmup_steps == 0) return cfg_.lr;
  const double frac = static_cast<double>(t_ + 1) / static_cast<double>(cfg_.warmup_steps);
  return cfg_.lr * std::min(1.0, frac);
}

void Adam::step() {
  const double lr = current_lr();
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t p = 0; p < params_.size(); ++p) {
    auto& t = params_[p].tensor;
    auto w = t.mutable_data();
    const auto g = t.grad();
    auto& m = m_[p];
    auto& v = v_[p];
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g.empty() ? 0.0 : g[i];
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
      w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.eps);
    }
    t.zero_grad();
  }
}

// -- training ----------------------------------------------------------------

std::vector<std::int32_t> Batch::inputs() const {
  std::vector<std::int32_t> out;
  out.reserve(batch_size * seq_len);
  for (std::size_t b = 0; b < batch_size; ++b) {
    const auto* row = tokens.data() + b * (seq_len + 1);
    out.insert(out.end(), row, row + seq_len);
  }
  return out;
}

std::vector<std::int32_t> Batch::targets() const {
  std::vector<std::int32_t> out;
  out.reserve(batch_size * seq_len);
  for (std::size_t b = 0; b < batch_size; ++b) {
    const auto* row = tokens.data() + b * (seq_len + 1) + 1;
    out.insert(out.end(), row, row + seq_len);
  }
  return out;
}

TrainRecord train_step(MoEModel& model, Adam& opt, const Batch& batch, std::size_t step) {
  const auto start = std::chrono::steady_clock::now();
  const auto& c = model.config();
  if (batch.seq_len != c.seq_len || batch.tokens.size() != batch.batch_size * (c.seq_len + 1))
    throw DimensionError("train_step: batch does not match the model's seq_len");

  ad::Tape tape(false);
  const auto inputs = batch.inputs();
  const auto targets = batch.targets();
  ForwardOptions opts;
  opts.ec_shuffle_seed = c.seed * 0x100000001B3ULL + step;
  auto fwd = model.forward(tape, inputs, opts);
  auto lm = ad::cross_entropy(tape, fwd.logits, targets);
  auto loss = lm;

  TrainRecord rec;
  rec.step = step;
  rec.lm_loss = lm.item();
  if (c.strategy == RoutingStrategy::aux_loss) {
    for (std::size_t l = 0; l < fwd.routing.size(); ++l) {
      auto aux = aux_loss(tape, fwd.scores[l], fwd.routing[l], {c.alpha});
      rec.aux_loss += aux.item();
      loss = ad::add(tape, loss, aux);
    }
  }
  if (!std::isfinite(loss.item()))
    throw NumericError("train_step " + std::to_string(step) + ": non-finite loss (lm=" +
                       std::to_string(rec.lm_loss) + ")");
  tape.backward(loss);
  opt.step();

  auto biases = model.bias_states();
  for (std::size_t l = 0; l < fwd.routing.size(); ++l) {
    auto loads = fwd.routing[l].loads();
    rec.layer_maxvio.push_back(maxvio(loads));
    if (c.strategy == RoutingStrategy::loss_free) *biases[l] = update_bias(*biases[l], loads);
    rec.layer_loads.push_back(std::move(loads));
  }
  rec.maxvio_batch = rec.layer_maxvio.empty() ? 0.0 : layer_average(rec.layer_maxvio);
  bool first = true;
  for (const auto* b : biases)
    for (double v : b->bias) {
      rec.bias_min = first ? v : std::min(rec.bias_min, v);
      rec.bias_max = first ? v : std::max(rec.bias_max, v);
      first = false;
    }
  rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start)
                    .count();
  return rec;
}

EvalResult evaluate(const MoEModel& model, std::span<const std::int32_t> validation,
                    std::size_t eval_batch) {
  const auto& c = model.config();
  const std::size_t window = c.seq_len + 1;
  const std::size_t n_seq = validation.size() / window;
  if (n_seq == 0)
    throw ContractError("evaluate: validation set shorter than one window of " +
                        std::to_string(window) + " tokens");
  if (eval_batch == 0) eval_batch = 1;

  EvalResult res;
  const std::size_t layers = c.moe_layers();
  std::vector<LoadCounter> counters(layers,
                                    LoadCounter::for_experts(c.routed_experts,
                                                             LoadGranularity::global));
  res.sample_loads.resize(layers);
  double nll_total = 0.0;
  for (std::size_t first = 0, batch_index = 0; first < n_seq; first += eval_batch, ++batch_index) {
    Batch batch;
    batch.seq_len = c.seq_len;
    batch.batch_size = std::min(eval_batch, n_seq - first);
    batch.tokens.assign(validation.begin() + static_cast<std::ptrdiff_t>(first * window),
                        validation.begin() +
                            static_cast<std::ptrdiff_t>((first + batch.batch_size) * window));
    ad::Tape tape(false);
    tape.set_grad_enabled(false);
    ForwardOptions opts;
    opts.ec_shuffle_seed = 0xE7A1ULL + batch_index;
    auto fwd = model.forward(tape, batch.inputs(), opts);
    const auto targets = batch.targets();
    nll_total += ad::cross_entropy(tape, fwd.logits, targets).item() *
                 static_cast<double>(targets.size());
    res.tokens += targets.size();
    for (std::size_t l = 0; l < layers; ++l) {
      counters[l].add(fwd.routing[l]);
      for (auto& s : per_sample_loads(fwd.routing[l], c.seq_len))
        res.sample_loads[l].push_back(std::move(s));
    }
  }
  res.mean_nll = nll_total / static_cast<double>(res.tokens);
  res.perplexity = std::exp(res.mean_nll);
  for (const auto& counter : counters) res.layer_maxvio_global.push_back(maxvio_global(counter));
  res.maxvio_global = layers ? layer_average(res.layer_maxvio_global) : 0.0;
  return res;
}

}  // namespace moebal
