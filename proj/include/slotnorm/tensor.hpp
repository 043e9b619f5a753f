#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace slotnorm {

using Shape = std::vector<std::int64_t>;
using Array = Eigen::ArrayXd;
using MatrixRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<const MatrixRM>;
using MutMatMap = Eigen::Map<MatrixRM>;

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

class Tape;

// Dense n-dimensional array of doubles, row-major, immutable after
// construction. A tensor may additionally be bound to a node on a Tape, in
// which case every operation consuming it records a backward rule. Copies
// share storage.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor from_array(Shape shape, Array data);
  static Tensor from_values(Shape shape, std::initializer_list<double> values);
  static Tensor scalar(double value);

  bool defined() const { return static_cast<bool>(data_); }
  const Shape& shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  std::int64_t dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  std::int64_t size() const { return data_ ? static_cast<std::int64_t>(data_->size()) : 0; }

  const Array& array() const { return *data_; }
  const double* data() const { return data_->data(); }
  double at(std::int64_t flat_index) const { return (*data_)[flat_index]; }
  // Scalar convenience: the value of a 1-element tensor.
  double value() const {
    require(size() == 1, "value() requires a 1-element tensor");
    return (*data_)[0];
  }

  // 2-D Eigen view; the no-argument form requires ndim()==2.
  MatMap mat() const {
    require(ndim() == 2, "mat() requires a 2-D tensor");
    return MatMap(data(), dim(0), dim(1));
  }
  MatMap mat(std::int64_t rows, std::int64_t cols) const {
    require(rows * cols == size(), "mat(rows, cols) must cover the whole tensor");
    return MatMap(data(), rows, cols);
  }
  Eigen::Map<const Array> flat() const { return Eigen::Map<const Array>(data(), size()); }

  Tape* tape() const { return tape_; }
  std::int64_t node() const { return node_; }

  // Same storage and tape node under a new shape (gradients are flat, so a
  // reshape needs no backward rule).
  Tensor reshaped(Shape new_shape) const;

 private:
  friend class Tape;
  std::shared_ptr<const Array> data_;
  Shape shape_;
  Tape* tape_ = nullptr;
  std::int64_t node_ = -1;
};

std::int64_t shape_size(const Shape& shape);

// Reverse-mode tape: an append-only list of nodes in topological order, each
// with a flat gradient accumulator (allocated lazily) and a backward closure.
// One tape per forward pass, single-threaded, discarded after use.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Registers `value` as a differentiable input and returns it bound to this
  // tape. Gradients are read back with grad() after backward().
  Tensor leaf(const Tensor& value);

  // Reverse sweep from a scalar loss produced on this tape. Seeds d(loss)/
  // d(loss) = 1 and visits nodes in reverse creation order; repeated runs on
  // identical inputs are bitwise identical (fixed accumulation order).
  void backward(const Tensor& loss);

  // Gradient of the last backward() w.r.t. a tensor bound to this tape;
  // zeros if no gradient reached it.
  Array grad(const Tensor& t) const;

  // --- plumbing for operation implementations ---
  std::int64_t new_node(std::int64_t size);
  void set_backward(std::int64_t node, std::function<void()> fn);
  // Accumulator for a node, allocated (zero-filled) on first touch.
  Array& grad_accum(std::int64_t node);
  bool has_grad(std::int64_t node) const { return nodes_[static_cast<std::size_t>(node)].grad != nullptr; }
  const Array& grad_at(std::int64_t node) const { return *nodes_[static_cast<std::size_t>(node)].grad; }
  std::int64_t num_nodes() const { return static_cast<std::int64_t>(nodes_.size()); }
  // Binds a freshly computed tensor to a node of this tape.
  Tensor adopt(Tensor t, std::int64_t node) const;

 private:
  struct Node {
    std::int64_t size = 0;
    std::function<void()> backward;
    std::unique_ptr<Array> grad;
  };
  std::vector<Node> nodes_;
};

// Gain/bias/epsilon for layer normalization. alpha and beta may be tape
// leaves when they are learnable.
struct LayerNormParams {
  Tensor alpha;
  Tensor beta;
  double eps = 1e-5;
};

// --- elementwise ---
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
// a*t + b with plain double coefficients.
Tensor scale_add(const Tensor& t, double a, double b);
Tensor relu(const Tensor& t);
Tensor sigmoid(const Tensor& t);
Tensor tanh(const Tensor& t);
Tensor exp(const Tensor& t);
// Elementwise t^p; with non-integer p the input must stay positive.
Tensor pow_scalar(const Tensor& t, double p);

// --- broadcasts ---
// M[r,:] + v for every row r.
Tensor add_rowvec(const Tensor& m, const Tensor& v);
// Vertical tiling: [P; P; ...] `times` copies.
Tensor tile_rows(const Tensor& p, std::int64_t times);
// Each row repeated `n` times contiguously (row r -> rows r*n .. r*n+n-1).
Tensor broadcast_rows(const Tensor& s, std::int64_t n);
// Row r divided by the scalar s[r]; s has one entry per row.
Tensor div_rows(const Tensor& u, const Tensor& s);
// Broadcast a 1-element tensor across all entries.
Tensor add_scalar_t(const Tensor& t, const Tensor& s);
Tensor sub_scalar_t(const Tensor& t, const Tensor& s);
Tensor mul_scalar_t(const Tensor& t, const Tensor& s);

// --- reductions ---
Tensor sum_all(const Tensor& t);
Tensor mean_all(const Tensor& t);
// Sum over the middle axis of [A, N, K] -> [A, K].
Tensor sum_mid(const Tensor& t);

// --- linear algebra ---
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
// Batched matmul on [B,m,k] x [B,k,n] -> [B,m,n]; ta/tb transpose the
// per-item matrices.
Tensor bmm(const Tensor& a, const Tensor& b, bool ta = false, bool tb = false);

// --- normalizations ---
// softmax(row / temperature) per row, max-subtracted for stability.
Tensor softmax_rows(const Tensor& m, double temperature);
// Per-row layer norm with population variance (divisor D):
// alpha .* (x - mean) / sqrt(var + eps) + beta.
Tensor layer_norm_rows(const Tensor& x, const LayerNormParams& p);
// 1-D convenience form.
Tensor layer_norm(const Tensor& x, const LayerNormParams& p);

// --- convolutions (NHWC activations) ---
// x: [B,H,W,Cin], w: [kh,kw,Cin,Cout], b: [Cout]; zero padding.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::int64_t stride,
              std::int64_t pad);
// x: [B,H,W,Cin], w: [kh,kw,Cout,Cin], b: [Cout];
// output extent (H-1)*stride - 2*pad + kh + out_pad.
Tensor conv_transpose2d(const Tensor& x, const Tensor& w, const Tensor& b, std::int64_t stride,
                        std::int64_t pad, std::int64_t out_pad);

// --- slicing and stacking ---
// Keep `len` trailing-axis channels starting at `begin`.
Tensor slice_last(const Tensor& t, std::int64_t begin, std::int64_t len);
// Keep `len` leading-axis entries starting at `begin`.
Tensor slice_first(const Tensor& t, std::int64_t begin, std::int64_t len);
// Stack same-shape tensors along a new leading axis.
Tensor stack_first(const std::vector<Tensor>& parts);

// --- mixing ---
// Per-cell softmax over the leading axis and the resulting convex blend:
// logits [K,M], values [K,M,C] -> (blend [M,C], weights [K,M]) where
// weights[:,m] = softmax(logits[:,m]) and blend[m,:] is the weighted sum of
// values[:,m,:], accumulated in ascending k.
std::pair<Tensor, Tensor> softmax_mix(const Tensor& logits, const Tensor& values);

// Max over coordinates of |analytic - central difference| / max(1, |analytic|)
// for a scalar-valued function built from the ops above. The analytic side
// runs once on a fresh tape; the finite-difference side re-evaluates f
// without a tape at x +- h per coordinate.
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h);
// As above, but finite-differences at most `max_coords` evenly spaced
// coordinates; keeps the check affordable on large inputs.
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h,
                  std::int64_t max_coords);

}  // namespace slotnorm
