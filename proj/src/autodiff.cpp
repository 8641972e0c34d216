#include "moebal/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "moebal/errors.hpp"

namespace moebal::ad {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

std::span<double> Node::ensure_grad() {
  if (grad.empty()) grad.assign(value.size(), 0.0);
  return grad;
}

// -- Tensor ------------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const auto n = shape_numel(shape);
  return from(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != values.size())
    throw DimensionError("tensor shape " + shape_str(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double v, bool requires_grad) { return from({}, {v}, requires_grad); }

const Shape& Tensor::shape() const { return node_->shape; }

std::size_t Tensor::dim(std::size_t i) const {
  if (i >= node_->shape.size())
    throw DimensionError("axis " + std::to_string(i) + " out of range for " +
                         shape_str(node_->shape));
  return node_->shape[i];
}

std::size_t Tensor::numel() const { return node_->value.size(); }
std::span<const double> Tensor::data() const { return node_->value; }
std::span<double> Tensor::mutable_data() { return node_->value; }
bool Tensor::requires_grad() const { return node_->requires_grad; }
bool Tensor::has_grad() const { return !node_->grad.empty(); }
std::span<const double> Tensor::grad() const { return node_->grad; }
void Tensor::zero_grad() { node_->grad.clear(); }

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

double Tensor::at(std::size_t r, std::size_t c) const {
  if (rank() != 2 || r >= dim(0) || c >= dim(1))
    throw DimensionError("at(" + std::to_string(r) + "," + std::to_string(c) + ") on " +
                         shape_str(shape()));
  return node_->value[r * dim(1) + c];
}

// -- Tape --------------------------------------------------------------------

Tensor Tape::emit(Shape shape, std::vector<double> value, std::vector<Tensor> inputs,
                  std::function<void(Node&)> backward, const char* op_name) {
  if (check_finite_) {
    for (double v : value)
      if (!std::isfinite(v)) throw NumericError(std::string("non-finite output from ") + op_name);
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  const bool needs = grad_enabled_ && std::any_of(inputs.begin(), inputs.end(),
                                 [](const Tensor& t) { return t.requires_grad(); });
  if (needs) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (auto& t : inputs) node->inputs.push_back(t.node());
    node->backward = std::move(backward);
    nodes_.push_back(node);
  }
  return Tensor(std::move(node));
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1 || !loss.shape().empty())
    throw ContractError("backward() requires a scalar loss");
  const auto it = std::find(nodes_.rbegin(), nodes_.rend(), loss.node());
  if (it == nodes_.rend()) throw ContractError("backward() loss is not recorded on this tape");
  loss.node()->ensure_grad()[0] += 1.0;
  for (auto cur = it; cur != nodes_.rend(); ++cur) {
    Node& n = **cur;
    if (!n.grad.empty() && n.backward) n.backward(n);
  }
}

// -- helpers -----------------------------------------------------------------

namespace {

void require_rank(const Tensor& t, std::size_t r, const char* op) {
  if (t.rank() != r)
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                         shape_str(t.shape()));
}

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

// Gradient buffer of input i when it wants one, else an empty span.
std::span<double> in_grad(Node& out, std::size_t i) {
  Node& in = *out.inputs[i];
  if (!in.requires_grad) return {};
  return in.ensure_grad();
}

const std::vector<double>& in_value(Node& out, std::size_t i) { return out.inputs[i]->value; }

}  // namespace

// -- dense ops ---------------------------------------------------------------

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw DimensionError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  std::vector<double> c(m * n, 0.0);
  const double* A = a.data().data();
  const double* B = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      if (av == 0.0) continue;
      const double* brow = B + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return tape.emit({m, n}, std::move(c), {a, b}, [m, k, n](Node& out) {
    const double* G = out.grad.data();
    const auto& Av = in_value(out, 0);
    const auto& Bv = in_value(out, 1);
    if (auto ga = in_grad(out, 0); !ga.empty()) {
      // dA = dC * B^T, accumulated row-wise against a transposed copy of B
      std::vector<double> bt(n * k);
      for (std::size_t p = 0; p < k; ++p)
        for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = Bv[p * n + j];
      for (std::size_t i = 0; i < m; ++i) {
        double* garow = ga.data() + i * k;
        for (std::size_t j = 0; j < n; ++j) {
          const double g = G[i * n + j];
          if (g == 0.0) continue;
          const double* btrow = bt.data() + j * k;
          for (std::size_t p = 0; p < k; ++p) garow[p] += g * btrow[p];
        }
      }
    }
    if (auto gb = in_grad(out, 1); !gb.empty()) {
      // dB = A^T * dC
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double av = Av[i * k + p];
          if (av == 0.0) continue;
          const double* grow = G + i * n;
          double* gbrow = gb.data() + p * n;
          for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
        }
    }
  }, "matmul");
}

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same(a, b, "add");
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] + b.data()[i];
  return tape.emit(a.shape(), std::move(v), {a, b}, [](Node& out) {
    for (std::size_t s = 0; s < 2; ++s)
      if (auto g = in_grad(out, s); !g.empty())
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i];
  }, "add");
}

Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same(a, b, "sub");
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] - b.data()[i];
  return tape.emit(a.shape(), std::move(v), {a, b}, [](Node& out) {
    if (auto g = in_grad(out, 0); !g.empty())
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i];
    if (auto g = in_grad(out, 1); !g.empty())
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= out.grad[i];
  }, "sub");
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same(a, b, "mul");
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] * b.data()[i];
  return tape.emit(a.shape(), std::move(v), {a, b}, [](Node& out) {
    const auto& av = in_value(out, 0);
    const auto& bv = in_value(out, 1);
    if (auto g = in_grad(out, 0); !g.empty())
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i] * bv[i];
    if (auto g = in_grad(out, 1); !g.empty())
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i] * av[i];
  }, "mul");
}

Tensor scale(Tape& tape, const Tensor& a, double c) {
  std::vector<double> v(a.data().begin(), a.data().end());
  for (double& x : v) x *= c;
  return tape.emit(a.shape(), std::move(v), {a}, [c](Node& out) {
    auto g = in_grad(out, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += c * out.grad[i];
  }, "scale");
}

Tensor sum(Tape& tape, const Tensor& a) {
  double s = 0.0;
  for (double x : a.data()) s += x;
  return tape.emit({}, {s}, {a}, [](Node& out) {
    auto g = in_grad(out, 0);
    for (double& x : g) x += out.grad[0];
  }, "sum");
}

Tensor mean(Tape& tape, const Tensor& a) {
  if (a.numel() == 0) throw DimensionError("mean of empty tensor");
  const double n = static_cast<double>(a.numel());
  double s = 0.0;
  for (double x : a.data()) s += x;
  return tape.emit({}, {s / n}, {a}, [n](Node& out) {
    auto g = in_grad(out, 0);
    for (double& x : g) x += out.grad[0] / n;
  }, "mean");
}

Tensor sum_axis(Tape& tape, const Tensor& a, std::size_t axis) {
  require_rank(a, 2, "sum_axis");
  if (axis > 1) throw DimensionError("sum_axis: invalid axis " + std::to_string(axis));
  const std::size_t r = a.dim(0), c = a.dim(1);
  const std::size_t n = axis == 0 ? c : r;
  std::vector<double> v(n, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) v[axis == 0 ? j : i] += a.data()[i * c + j];
  return tape.emit({n}, std::move(v), {a}, [r, c, axis](Node& out) {
    auto g = in_grad(out, 0);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += out.grad[axis == 0 ? j : i];
  }, "sum_axis");
}

Tensor mean_axis(Tape& tape, const Tensor& a, std::size_t axis) {
  const std::size_t count = a.dim(axis);
  if (count == 0) throw DimensionError("mean_axis over empty axis");
  return scale(tape, sum_axis(tape, a, axis), 1.0 / static_cast<double>(count));
}

Tensor sigmoid(Tape& tape, const Tensor& x) {
  std::vector<double> v(x.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = 1.0 / (1.0 + std::exp(-x.data()[i]));
  return tape.emit(x.shape(), std::move(v), {x}, [](Node& out) {
    auto g = in_grad(out, 0);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double y = out.value[i];
      g[i] += out.grad[i] * y * (1.0 - y);
    }
  }, "sigmoid");
}

Tensor silu(Tape& tape, const Tensor& x) {
  std::vector<double> v(x.numel());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double z = x.data()[i];
    v[i] = z / (1.0 + std::exp(-z));
  }
  return tape.emit(x.shape(), std::move(v), {x}, [](Node& out) {
    auto g = in_grad(out, 0);
    const auto& xv = in_value(out, 0);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double s = 1.0 / (1.0 + std::exp(-xv[i]));
      g[i] += out.grad[i] * s * (1.0 + xv[i] * (1.0 - s));
    }
  }, "silu");
}

Tensor softmax(Tape& tape, const Tensor& x, std::size_t axis) {
  const auto& sh = x.shape();
  if (axis >= sh.size())
    throw DimensionError("softmax: invalid axis " + std::to_string(axis) + " for " +
                         shape_str(sh));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= sh[i];
  for (std::size_t i = axis + 1; i < sh.size(); ++i) inner *= sh[i];
  const std::size_t n = sh[axis];
  std::vector<double> v(x.numel());
  const double* in = x.data().data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t q = 0; q < inner; ++q) {
      const std::size_t base = o * n * inner + q;
      double mx = -INFINITY;
      for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, in[base + j * inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double e = std::exp(in[base + j * inner] - mx);
        v[base + j * inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < n; ++j) v[base + j * inner] /= z;
    }
  return tape.emit(sh, std::move(v), {x}, [outer, inner, n](Node& out) {
    auto g = in_grad(out, 0);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t q = 0; q < inner; ++q) {
        const std::size_t base = o * n * inner + q;
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j)
          dot += out.grad[base + j * inner] * out.value[base + j * inner];
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t idx = base + j * inner;
          g[idx] += out.value[idx] * (out.grad[idx] - dot);
        }
      }
  }, "softmax");
}

Tensor layer_norm(Tape& tape, const Tensor& x, double eps) {
  if (x.rank() == 0) throw DimensionError("layer_norm of a scalar");
  const std::size_t d = x.shape().back();
  if (d == 0) throw DimensionError("layer_norm over empty axis");
  const std::size_t rows = x.numel() / d;
  std::vector<double> v(x.numel());
  std::vector<double> inv_std(rows);
  const double* in = x.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = in + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) v[r * d + j] = (row[j] - mu) * is;
  }
  return tape.emit(x.shape(), std::move(v), {x},
                   [rows, d, inv_std = std::move(inv_std)](Node& out) {
    auto g = in_grad(out, 0);
    const double dn = static_cast<double>(d);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = out.value.data() + r * d;
      const double* gy = out.grad.data() + r * d;
      double sg = 0.0, sgy = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        sg += gy[j];
        sgy += gy[j] * y[j];
      }
      for (std::size_t j = 0; j < d; ++j)
        g[r * d + j] += inv_std[r] * (gy[j] - sg / dn - y[j] * sgy / dn);
    }
  }, "layer_norm");
}

Tensor row_normalize(Tape& tape, const Tensor& x) {
  require_rank(x, 2, "row_normalize");
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<double> v(x.numel(), 0.0);
  std::vector<double> sums(r, 0.0);
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) sums[i] += x.data()[i * c + j];
    if (sums[i] != 0.0)
      for (std::size_t j = 0; j < c; ++j) v[i * c + j] = x.data()[i * c + j] / sums[i];
  }
  return tape.emit(x.shape(), std::move(v), {x}, [r, c, sums = std::move(sums)](Node& out) {
    auto g = in_grad(out, 0);
    for (std::size_t i = 0; i < r; ++i) {
      if (sums[i] == 0.0) continue;
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += out.grad[i * c + j] * out.value[i * c + j];
      for (std::size_t j = 0; j < c; ++j)
        g[i * c + j] += (out.grad[i * c + j] - dot) / sums[i];
    }
  }, "row_normalize");
}

Tensor embedding_lookup(Tape& tape, const Tensor& table, std::span<const std::int32_t> ids) {
  require_rank(table, 2, "embedding_lookup");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  std::vector<double> v(ids.size() * d);
  for (std::size_t t = 0; t < ids.size(); ++t) {
    if (ids[t] < 0 || static_cast<std::size_t>(ids[t]) >= vocab)
      throw DimensionError("embedding_lookup: id " + std::to_string(ids[t]) +
                           " outside vocabulary of " + std::to_string(vocab));
    std::copy_n(table.data().data() + static_cast<std::size_t>(ids[t]) * d, d, v.data() + t * d);
  }
  std::vector<std::int32_t> idv(ids.begin(), ids.end());
  return tape.emit({ids.size(), d}, std::move(v), {table}, [d, idv = std::move(idv)](Node& out) {
    auto g = in_grad(out, 0);
    for (std::size_t t = 0; t < idv.size(); ++t) {
      double* dst = g.data() + static_cast<std::size_t>(idv[t]) * d;
      const double* src = out.grad.data() + t * d;
      for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
    }
  }, "embedding_lookup");
}

Tensor cross_entropy(Tape& tape, const Tensor& logits, std::span<const std::int32_t> targets) {
  require_rank(logits, 2, "cross_entropy");
  const std::size_t rows = logits.dim(0), vocab = logits.dim(1);
  if (targets.size() != rows)
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(rows) + " rows");
  if (rows == 0) throw DimensionError("cross_entropy over zero rows");
  std::vector<double> probs(logits.numel());
  double total = 0.0;
  const double* in = logits.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const std::int32_t tgt = targets[r];
    if (tgt < 0 || static_cast<std::size_t>(tgt) >= vocab)
      throw DimensionError("cross_entropy: target " + std::to_string(tgt) +
                           " outside vocabulary of " + std::to_string(vocab));
    const double* row = in + r * vocab;
    const double mx = *std::max_element(row, row + vocab);
    double z = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) {
      probs[r * vocab + j] = std::exp(row[j] - mx);
      z += probs[r * vocab + j];
    }
    for (std::size_t j = 0; j < vocab; ++j) probs[r * vocab + j] /= z;
    total += -(row[tgt] - mx - std::log(z));
  }
  std::vector<std::int32_t> tv(targets.begin(), targets.end());
  return tape.emit({}, {total / static_cast<double>(rows)}, {logits},
                   [rows, vocab, probs = std::move(probs), tv = std::move(tv)](Node& out) {
    auto g = in_grad(out, 0);
    const double s = out.grad[0] / static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < vocab; ++j) g[r * vocab + j] += s * probs[r * vocab + j];
      g[r * vocab + static_cast<std::size_t>(tv[r])] -= s;
    }
  }, "cross_entropy");
}

Tensor causal_attention(Tape& tape, const Tensor& q, const Tensor& k, const Tensor& v,
                        std::size_t seq_len, std::size_t heads) {
  require_rank(q, 2, "causal_attention");
  require_same(q, k, "causal_attention");
  require_same(q, v, "causal_attention");
  const std::size_t T = q.dim(0), d = q.dim(1);
  if (seq_len == 0 || T % seq_len != 0)
    throw DimensionError("causal_attention: " + std::to_string(T) +
                         " rows not divisible by seq_len " + std::to_string(seq_len));
  if (heads == 0 || d % heads != 0)
    throw DimensionError("causal_attention: width " + std::to_string(d) +
                         " not divisible into " + std::to_string(heads) + " heads");
  const std::size_t L = seq_len, B = T / L, H = heads, hd = d / heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(hd));
  // probs[(b, h, i)] holds the weights of positions 0..i.
  std::vector<double> probs(B * H * L * L, 0.0);
  std::vector<double> o(T * d, 0.0);
  const double* Q = q.data().data();
  const double* K = k.data().data();
  const double* V = v.data().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t i = 0; i < L; ++i) {
        const double* qrow = Q + (b * L + i) * d + h * hd;
        double* p = probs.data() + ((b * H + h) * L + i) * L;
        double mx = -INFINITY;
        for (std::size_t j = 0; j <= i; ++j) {
          const double* krow = K + (b * L + j) * d + h * hd;
          double s = 0.0;
          for (std::size_t c = 0; c < hd; ++c) s += qrow[c] * krow[c];
          p[j] = s * inv;
          mx = std::max(mx, p[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          p[j] = std::exp(p[j] - mx);
          z += p[j];
        }
        double* orow = o.data() + (b * L + i) * d + h * hd;
        for (std::size_t j = 0; j <= i; ++j) {
          p[j] /= z;
          const double* vrow = V + (b * L + j) * d + h * hd;
          for (std::size_t c = 0; c < hd; ++c) orow[c] += p[j] * vrow[c];
        }
      }
  return tape.emit({T, d}, std::move(o), {q, k, v},
                   [B, H, L, d, hd, inv, probs = std::move(probs)](Node& out) {
    const auto& Qv = in_value(out, 0);
    const auto& Kv = in_value(out, 1);
    const auto& Vv = in_value(out, 2);
    auto gq = in_grad(out, 0);
    auto gk = in_grad(out, 1);
    auto gv = in_grad(out, 2);
    std::vector<double> dp(L);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t i = 0; i < L; ++i) {
          const std::size_t qi = (b * L + i) * d + h * hd;
          const double* p = probs.data() + ((b * H + h) * L + i) * L;
          const double* go = out.grad.data() + qi;
          double dot = 0.0;
          for (std::size_t j = 0; j <= i; ++j) {
            const std::size_t kj = (b * L + j) * d + h * hd;
            double s = 0.0;
            for (std::size_t c = 0; c < hd; ++c) s += go[c] * Vv[kj + c];
            dp[j] = s;
            dot += p[j] * s;
            if (!gv.empty())
              for (std::size_t c = 0; c < hd; ++c) gv[kj + c] += p[j] * go[c];
          }
          for (std::size_t j = 0; j <= i; ++j) {
            const std::size_t kj = (b * L + j) * d + h * hd;
            const double ds = p[j] * (dp[j] - dot) * inv;
            if (ds == 0.0) continue;
            if (!gq.empty())
              for (std::size_t c = 0; c < hd; ++c) gq[qi + c] += ds * Kv[kj + c];
            if (!gk.empty())
              for (std::size_t c = 0; c < hd; ++c) gk[kj + c] += ds * Qv[qi + c];
          }
        }
  }, "causal_attention");
}

// -- sparse routing helpers --------------------------------------------------

Tensor gather_rows(Tape& tape, const Tensor& x, std::span<const std::size_t> rows) {
  require_rank(x, 2, "gather_rows");
  const std::size_t n = x.dim(0), d = x.dim(1);
  std::vector<double> v(rows.size() * d);
  for (std::size_t j = 0; j < rows.size(); ++j) {
    if (rows[j] >= n) throw DimensionError("gather_rows: row " + std::to_string(rows[j]) +
                                           " out of range " + std::to_string(n));
    std::copy_n(x.data().data() + rows[j] * d, d, v.data() + j * d);
  }
  std::vector<std::size_t> rv(rows.begin(), rows.end());
  return tape.emit({rows.size(), d}, std::move(v), {x}, [d, rv = std::move(rv)](Node& out) {
    auto g = in_grad(out, 0);
    for (std::size_t j = 0; j < rv.size(); ++j)
      for (std::size_t c = 0; c < d; ++c) g[rv[j] * d + c] += out.grad[j * d + c];
  }, "gather_rows");
}

Tensor index_add(Tape& tape, const Tensor& base, std::span<const std::size_t> rows,
                 const Tensor& src) {
  require_rank(base, 2, "index_add");
  require_rank(src, 2, "index_add");
  const std::size_t n = base.dim(0), d = base.dim(1);
  if (src.dim(1) != d || src.dim(0) != rows.size())
    throw DimensionError("index_add: src " + shape_str(src.shape()) + " incompatible with " +
                         std::to_string(rows.size()) + " rows of width " + std::to_string(d));
  std::vector<double> v(base.data().begin(), base.data().end());
  for (std::size_t j = 0; j < rows.size(); ++j) {
    if (rows[j] >= n) throw DimensionError("index_add: row " + std::to_string(rows[j]) +
                                           " out of range " + std::to_string(n));
    for (std::size_t c = 0; c < d; ++c) v[rows[j] * d + c] += src.data()[j * d + c];
  }
  std::vector<std::size_t> rv(rows.begin(), rows.end());
  return tape.emit(base.shape(), std::move(v), {base, src},
                   [d, rv = std::move(rv)](Node& out) {
    if (auto g = in_grad(out, 0); !g.empty())
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i];
    if (auto g = in_grad(out, 1); !g.empty())
      for (std::size_t j = 0; j < rv.size(); ++j)
        for (std::size_t c = 0; c < d; ++c) g[j * d + c] += out.grad[rv[j] * d + c];
  }, "index_add");
}

Tensor pick_column(Tape& tape, const Tensor& x, std::span<const std::size_t> rows,
                   std::size_t col) {
  require_rank(x, 2, "pick_column");
  const std::size_t n = x.dim(0), c = x.dim(1);
  if (col >= c) throw DimensionError("pick_column: column " + std::to_string(col) +
                                     " out of range " + std::to_string(c));
  std::vector<double> v(rows.size());
  for (std::size_t j = 0; j < rows.size(); ++j) {
    if (rows[j] >= n) throw DimensionError("pick_column: row " + std::to_string(rows[j]) +
                                           " out of range " + std::to_string(n));
    v[j] = x.data()[rows[j] * c + col];
  }
  std::vector<std::size_t> rv(rows.begin(), rows.end());
  return tape.emit({rows.size(), 1}, std::move(v), {x}, [c, col, rv = std::move(rv)](Node& out) {
    auto g = in_grad(out, 0);
    for (std::size_t j = 0; j < rv.size(); ++j) g[rv[j] * c + col] += out.grad[j];
  }, "pick_column");
}

Tensor mul_rows(Tape& tape, const Tensor& x, const Tensor& w) {
  require_rank(x, 2, "mul_rows");
  const std::size_t m = x.dim(0), d = x.dim(1);
  if (w.numel() != m)
    throw DimensionError("mul_rows: " + std::to_string(w.numel()) + " weights for " +
                         std::to_string(m) + " rows");
  std::vector<double> v(x.numel());
  for (std::size_t j = 0; j < m; ++j)
    for (std::size_t c = 0; c < d; ++c) v[j * d + c] = x.data()[j * d + c] * w.data()[j];
  return tape.emit(x.shape(), std::move(v), {x, w}, [m, d](Node& out) {
    const auto& xv = in_value(out, 0);
    const auto& wv = in_value(out, 1);
    if (auto g = in_grad(out, 0); !g.empty())
      for (std::size_t j = 0; j < m; ++j)
        for (std::size_t c = 0; c < d; ++c) g[j * d + c] += out.grad[j * d + c] * wv[j];
    if (auto g = in_grad(out, 1); !g.empty())
      for (std::size_t j = 0; j < m; ++j) {
        double acc = 0.0;
        for (std::size_t c = 0; c < d; ++c) acc += out.grad[j * d + c] * xv[j * d + c];
        g[j] += acc;
      }
  }, "mul_rows");
}

}  // namespace moebal::ad
