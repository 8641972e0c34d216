#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major f64
// arrays. Operations append nodes to an explicit Tape; Tape::backward walks
// them once in reverse creation order.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace moebal::ad {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until something flows into it
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;  // pushes this->grad into inputs

  std::span<double> ensure_grad();
};

/// Shared handle to a node. Copies alias the same buffers.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t i) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  // Only meaningful for leaves (parameters, inputs); used by optimizers and
  // finite-difference checks.
  std::span<double> mutable_data();

  bool requires_grad() const;
  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  double item() const;
  double at(std::size_t r, std::size_t c) const;

  const std::shared_ptr<Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<Node> node_;
};

class Tape {
 public:
  explicit Tape(bool check_finite = true) : check_finite_(check_finite) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Creates the output node for an op. The node is recorded only when some
  /// input requires a gradient.
  Tensor emit(Shape shape, std::vector<double> value, std::vector<Tensor> inputs,
              std::function<void(Node&)> backward, const char* op_name);

  /// Seeds d(loss)/d(loss) = 1 and propagates through every recorded node.
  void backward(const Tensor& loss);

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }
  bool check_finite() const { return check_finite_; }
  void set_check_finite(bool on) { check_finite_ = on; }
  // With gradients disabled nothing is recorded (evaluation passes).
  bool grad_enabled() const { return grad_enabled_; }
  void set_grad_enabled(bool on) { grad_enabled_ = on; }

 private:
  std::vector<std::shared_ptr<Node>> nodes_;
  bool check_finite_;
  bool grad_enabled_ = true;
};

// -- dense ops ---------------------------------------------------------------

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& a, double c);
Tensor sum(Tape& tape, const Tensor& a);
Tensor mean(Tape& tape, const Tensor& a);
/// Reduction over one axis of a rank-2 tensor; result drops that axis.
Tensor sum_axis(Tape& tape, const Tensor& a, std::size_t axis);
Tensor mean_axis(Tape& tape, const Tensor& a, std::size_t axis);

Tensor sigmoid(Tape& tape, const Tensor& x);
Tensor silu(Tape& tape, const Tensor& x);
Tensor softmax(Tape& tape, const Tensor& x, std::size_t axis);
/// Normalizes the last axis to zero mean and unit variance (no affine terms).
Tensor layer_norm(Tape& tape, const Tensor& x, double eps = 1e-5);
/// Divides each row of a rank-2 tensor by its sum; all-zero rows stay zero.
Tensor row_normalize(Tape& tape, const Tensor& x);

Tensor embedding_lookup(Tape& tape, const Tensor& table, std::span<const std::int32_t> ids);
/// Mean negative log-likelihood of targets under row-wise softmax(logits).
Tensor cross_entropy(Tape& tape, const Tensor& logits, std::span<const std::int32_t> targets);

/// Causal scaled dot-product attention over rows grouped into sequences of
/// seq_len consecutive rows. q, k, v are [T x d] with T % seq_len == 0; the
/// d columns are split evenly into `heads` heads.
Tensor causal_attention(Tape& tape, const Tensor& q, const Tensor& k, const Tensor& v,
                        std::size_t seq_len, std::size_t heads = 1);

// -- sparse routing helpers --------------------------------------------------

Tensor gather_rows(Tape& tape, const Tensor& x, std::span<const std::size_t> rows);
/// out = base with src[j] added onto row rows[j].
Tensor index_add(Tape& tape, const Tensor& base, std::span<const std::size_t> rows,
                 const Tensor& src);
/// out[j] = x[rows[j], col]; shape [m x 1].
Tensor pick_column(Tape& tape, const Tensor& x, std::span<const std::size_t> rows,
                   std::size_t col);
/// Scales row j of x [m x d] by w[j]; w has m elements.
Tensor mul_rows(Tape& tape, const Tensor& x, const Tensor& w);

}  // namespace moebal::ad
