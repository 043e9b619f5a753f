#include "slotnorm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

#include "slotnorm/threads.hpp"

namespace slotnorm {

std::int64_t shape_size(const Shape& shape) {
  std::int64_t n = 1;
  for (std::int64_t d : shape) {
    require(d >= 0, "negative extent in shape");
    n *= d;
  }
  return n;
}

Tensor Tensor::zeros(Shape shape) {
  const std::int64_t n = shape_size(shape);
  return from_array(std::move(shape), Array::Zero(n));
}

Tensor Tensor::full(Shape shape, double value) {
  const std::int64_t n = shape_size(shape);
  return from_array(std::move(shape), Array::Constant(n, value));
}

Tensor Tensor::from_array(Shape shape, Array data) {
  require(shape_size(shape) == static_cast<std::int64_t>(data.size()),
          "shape does not match data length");
  Tensor t;
  t.data_ = std::make_shared<const Array>(std::move(data));
  t.shape_ = std::move(shape);
  return t;
}

Tensor Tensor::from_values(Shape shape, std::initializer_list<double> values) {
  Array a(static_cast<std::int64_t>(values.size()));
  std::int64_t i = 0;
  for (double v : values) a[i++] = v;
  return from_array(std::move(shape), std::move(a));
}

Tensor Tensor::scalar(double value) { return from_values({1}, {value}); }

Tensor Tensor::reshaped(Shape new_shape) const {
  require(shape_size(new_shape) == size(), "reshape must preserve element count");
  Tensor t = *this;
  t.shape_ = std::move(new_shape);
  return t;
}

Tensor Tape::leaf(const Tensor& value) {
  require(value.defined(), "leaf requires a defined tensor");
  require(value.tape() == nullptr, "tensor is already bound to a tape");
  return adopt(value, new_node(value.size()));
}

std::int64_t Tape::new_node(std::int64_t size) {
  nodes_.push_back(Node{size, nullptr, nullptr});
  return static_cast<std::int64_t>(nodes_.size()) - 1;
}

void Tape::set_backward(std::int64_t node, std::function<void()> fn) {
  nodes_[static_cast<std::size_t>(node)].backward = std::move(fn);
}

Array& Tape::grad_accum(std::int64_t node) {
  Node& n = nodes_[static_cast<std::size_t>(node)];
  if (!n.grad) n.grad = std::make_unique<Array>(Array::Zero(n.size));
  return *n.grad;
}

Tensor Tape::adopt(Tensor t, std::int64_t node) const {
  t.tape_ = const_cast<Tape*>(this);
  t.node_ = node;
  return t;
}

void Tape::backward(const Tensor& loss) {
  require(loss.tape() == this, "loss was not produced on this tape");
  require(loss.size() == 1, "backward requires a scalar loss");
  for (Node& n : nodes_) n.grad.reset();
  grad_accum(loss.node())[0] = 1.0;
  for (std::int64_t id = loss.node(); id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad && n.backward) n.backward();
  }
}

Array Tape::grad(const Tensor& t) const {
  require(t.tape() == this && t.node() >= 0, "tensor is not bound to this tape");
  const Node& n = nodes_[static_cast<std::size_t>(t.node())];
  if (!n.grad) return Array::Zero(n.size);
  return *n.grad;
}

namespace {

Tape* common_tape(std::initializer_list<const Tensor*> ts) {
  Tape* tape = nullptr;
  for (const Tensor* t : ts) {
    if (t->tape() == nullptr) continue;
    require(tape == nullptr || tape == t->tape(), "operands are bound to different tapes");
    tape = t->tape();
  }
  return tape;
}

// Records `result` on `tape` (when non-null) with the given backward closure
// and returns it bound; closures receive the output gradient via grad_at.
Tensor record(Tape* tape, Tensor result, const std::function<std::function<void()>(std::int64_t)>& make_backward) {
  if (tape == nullptr) return result;
  const std::int64_t id = tape->new_node(result.size());
  tape->set_backward(id, make_backward(id));
  return tape->adopt(std::move(result), id);
}

MutMatMap grad_mat(Tape* tape, std::int64_t node, std::int64_t rows, std::int64_t cols) {
  Array& g = tape->grad_accum(node);
  return MutMatMap(g.data(), rows, cols);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "add: shape mismatch");
  Tensor out = Tensor::from_array(a.shape(), a.array() + b.array());
  Tape* tape = common_tape({&a, &b});
  const std::int64_t an = a.node(), bn = b.node();
  return record(tape, std::move(out), [=](std::int64_t id) {
    return [=] {
      const Array& g = tape->grad_at(id);
      if (an >= 0) tape->grad_accum(an) += g;
      if (bn >= 0) tape->grad_accum(bn) += g;
    };
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "sub: shape mismatch");
  Tensor out = Tensor::from_array(a.shape(), a.array() - b.array());
  Tape* tape = common_tape({&a, &b});
  const std::int64_t an = a.node(), bn = b.node();
  return record(tape, std::move(out), [=](std::int64_t id) {
    return [=] {
      const Array& g = tape->grad_at(id);
      if (an >= 0) tape->grad_accum(an) += g;
      if (bn >= 0) tape->grad_accum(bn) -= g;
    };
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "mul: shape mismatch");
  Tensor out = Tensor::from_array(a.shape(), a.array() * b.array());
  Tape* tape = common_tape({&a, &b});
  const std::int64_t an = a.node(), bn = b.node();
  return record(tape, std::move(out), [=, av = a, bv = b](std::int64_t id) {
    return [=] {
      const Array& g = tape->grad_at(id);
      if (an >= 0) tape->grad_accum(an) += g * bv.array();
      if (bn >= 0) tape->grad_accum(bn) += g * av.array();
    };
  });
}

Tensor scale_add(const Tensor& t, double a, double b) {
  Tensor out = Tensor::from_array(t.shape(), a * t.array() + b);
  Tape* tape = t.tape();
  const std::int64_t tn = t.node();
  return record(tape, std::move(out), [=](std::int64_t id) {
    return [=] { tape->grad_accum(tn) += a * tape->grad_at(id); };
  });
}

Tensor relu(const Tensor& t) {
  Tensor out = Tensor::from_array(t.shape(), t.array().max(0.0));
  Tape* tape = t.tape();
  const std::int64_t tn = t.node();
  return record(tape, std::move(out), [=, tv = t](std::int64_t id) {
    return [=] {
      tape->grad_accum(tn) += tape->grad_at(id) * (tv.array() > 0.0).cast<double>();
    };
  });
}

Tensor sigmoid(const Tensor& t) {
  Tensor out = Tensor::from_array(t.shape(), 1.0 / (1.0 + (-t.array()).exp()));
  Tape* tape = t.tape();
  const std::int64_t tn = t.node();
  const Tensor y = out;  // shares storage; kept alive for the backward rule
  return record(tape, std::move(out), [=](std::int64_t id) {
    return [=] {
      tape->grad_accum(tn) += tape->grad_at(id) * y.array() * (1.0 - y.array());
    };
  });
}

Tensor tanh(const Tensor& t) {
  Tensor out = Tensor::from_array(t.shape(), t.array().tanh());
  Tape* tape = t.tape();
  const std::int64_t tn = t.node();
  const Tensor y = out;
  return record(tape, std::move(out), [=](std::int64_t id) {
    return [=] {
      tape->grad_accum(tn) += tape->grad_at(id) * (1.0 - y.array().square());
    };
  });
}

Tensor exp(const Tensor& t) {
  Tensor out = Tensor::from_array(t.shape(), t.array().exp());
  Tape* tape = t.tape();
  const std::int64_t tn = t.node();
  const Tensor y = out;
  return record(tape, std::move(out), [=](std::int64_t id) {
    return [=] { tape->grad_accum(tn) += tape->grad_at(id) * y.array(); };
  });
}

Tensor pow_scalar(const Tensor& t, double p) {
  Tensor out = Tensor::from_array(t.shape(), t.array().pow(p));
  Tape* tape = t.tape();
  const std::int64_t tn = t.node();
  return record(tape, std::move(out), [=, tv = t](std::int64_t id) {
    return [=] {
      tape->grad_accum(tn) += tape->grad_at(id) * p * tv.array().pow(p - 1.0);
    };
  });
}

Tensor add_rowvec(const Tensor& m, const Tensor& v) {
  require(m.ndim() == 2, "add_rowvec: matrix must be 2-D");
  require(v.size() == m.dim(1), "add_rowvec: vector length must match columns");
  const std::int64_t rows = m.dim(0), cols = m.dim(1);
  Array out(m.size());
  MutMatMap(out.data(), rows, cols) =
      m.mat().rowwise() + Eigen::Map<const Eigen::RowVectorXd>(v.data(), cols);
  Tensor r = Tensor::from_array(m.shape(), std::move(out));
  Tape* tape = common_tape({&m, &v});
  const std::int64_t mn = m.node(), vn = v.node();
  return record(tape, std::move(r), [=](std::int64_t id) {
    return [=] {
      const Array& g = tape->grad_at(id);
      if (mn >= 0) tape->grad_accum(mn) += g;
      if (vn >= 0) {
        MatMap gm(g.data(), rows, cols);
        Array& gv = tape->grad_accum(vn);
        Eigen::Map<Eigen::RowVectorXd>(gv.data(), cols) += gm.colwise().sum();
      }
    };
  });
}

Tensor tile_rows(const Tensor& p, std::int64_t times) {
  require(p.ndim() == 2, "tile_rows: input must be 2-D");
  require(times >= 1, "tile_rows: times must be positive");
  const std::int64_t rows = p.dim(0), cols = p.dim(1);
  Array out(times * p.size());
  for (std::int64_t i = 0; i < times; ++i)
    std::copy(p.data(), p.data() + p.size(), out.data() + i * p.size());
  Tensor r = Tensor::from_array({times * rows, cols}, std::move(out));
  Tape* tape = p.tape();
  const std::int64_t pn = p.node(), block = p.size();
  return record(tape, std::move(r), [=](std::int64_t id) {
    return [=] {
      const Array& g = tape->grad_at(id);
      Array& gp = tape->grad_accum(pn);
      for (std::int64_t i = 0; i < times; ++i)
        gp += Eigen::Map<const Array>(g.data() + i * block, block);
    };
  });
}

Tensor broadcast_rows(const Tensor& s, std::int64_t n) {
  require(s.ndim() == 2, "broadcast_rows: input must be 2-D");
  require(n >= 1, "broadcast_rows: repeat count must be positive");
  const std::int64_t rows = s.dim(0), cols = s.dim(1);
  Array out(rows * n * cols);
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t j = 0; j < n; ++j)
      std::copy(s.data() + r * cols, s.data() + (r + 1) * cols, out.data() + (r * n + j) * cols);
  Tensor t = Tensor::from_array({rows * n, cols}, std::move(out));
  Tape* tape = s.tape();
  const std::int64_t sn = s.node();
  return record(tape, std::move(t), [=](std::int64_t id) {
    return [=] {
      const Array& g = tape->grad_at(id);
      MatMap gm(g.data(), rows * n, cols);
      MutMatMap gs = grad_mat(tape, sn, rows, cols);
      for (std::int64_t r = 0; r < rows; ++r)
        gs.row(r) += gm.middleRows(r * n, n).colwise().sum();
    };
  });
}

Tensor div_rows(const Tensor& u, const Tensor& s) {
  require(u.ndim() == 2, "div_rows: input must be 2-D");
  require(s.size() == u.dim(0), "div_rows: one divisor per row required");
  const std::int64_t rows = u.dim(0), cols = u.dim(1);
  for (std::int64_t r = 0; r < rows; ++r)
    require(s.at(r) != 0.0, "div_rows: division by zero");
  Array out(u.size());
  {
    MutMatMap om(out.data(), rows, cols);
    om = u.mat();
    for (std::int64_t r = 0; r < rows; ++r) om.row(r) /= s.at(r);
  }
  Tensor t = Tensor::from_array(u.shape(), std::move(out));
  Tape* tape = common_tape({&u, &s});
  const std::int64_t un = u.node(), sn = s.node();
  return record(tape, std::move(t), [=, uv = u, sv = s](std::int64_t id) {
    return [=] {
      const Array& g = tape->grad_at(id);
      MatMap gm(g.data(), rows, cols);
      if (un >= 0) {
        MutMatMap gu = grad_mat(tape, un, rows, cols);
        for (std::int64_t r = 0; r < rows; ++r) gu.row(r) += gm.row(r) / sv.at(r);
      }
      if (sn >= 0) {
        Array& gs = tape->grad_accum(sn);
        MatMap um = uv.mat();
        for (std::int64_t r = 0; r < rows; ++r)
          gs[r] -= gm.row(r).dot(um.row(r)) / (sv.at(r) * sv.at(r));
      }
    };
  });
}

Tensor add_scalar_t(const Tensor& t, const Tensor& s) {
  require(s.size() == 1, "add_scalar_t: second operand must have one element");
  Tensor out = Tensor::from_array(t.shape(), t.array() + s.value());
  Tape* tape = common_tape({&t, &s});
  const std::int64_t tn = t.node(), sn = s.node();
  return record(tape, std::move(out), [=](std::int64_t id) {
    return [=] {
      const Array& g = tape->grad_at(id);
      if (tn >= 0) tape->grad_accum(tn) += g;
      if (sn >= 0) tape->grad_accum(sn)[0] += g.sum();
    };
  });
}

Tensor sub_scalar_t(const Tensor& t, const Tensor& s) {
  require(s.size() == 1, "sub_scalar_t: second operand must have one element");
  Tensor out = Tensor::from_array(t.shape(), t.array() - s.value());
  Tape* tape = common_tape({&t, &s});
  const std::int64_t tn = t.node(), sn = s.node();
  return record(tape, std::move(out), [=](std::int64_t id) {
    return [=] {
      const Array& g = tape->grad_at(id);
      if (tn >= 0) tape->grad_accum(tn) += g;
      if (sn >= 0) tape->grad_accum(sn)[0] -= g.sum();
    };
  });
}

Tensor mul_scalar_t(const Tensor& t, const Tensor& s) {
  require(s.size() == 1, "mul_scalar_t: second operand must have one element");
  Tensor out = Tensor::from_array(t.shape(), t.array() * s.value());
  Tape* tape = common_tape({&t, &s});
  const std::int64_t tn = t.node(), sn = s.node();
  return record(tape, std::move(out), [=, tv = t, sv = s](std::int64_t id) {
    return [=] {
      const Array& g = tape->grad_at(id);
      if (tn >= 0) tape->grad_accum(tn) += g * sv.value();
      if (sn >= 0) tape->grad_accum(sn)[0] += (g * tv.array()).sum();
    };
  });
}

Tensor sum_all(const Tensor& t) {
  Tensor out = Tensor::scalar(t.array().sum());
  Tape* tape = t.tape();
  const std::int64_t tn = t.node();
  return record(tape, std::move(out), [=](std::int64_t id) {
    return [=] { tape->grad_accum(tn) += tape->grad_at(id)[0]; };
  });
}

Tensor mean_all(const Tensor& t) {
  require(t.size() >= 1, "mean_all: empty tensor");
  const double n = static_cast<double>(t.size());
  Tensor out = Tensor::scalar(t.array().sum() / n);
  Tape* tape = t.tape();
  const std::int64_t tn = t.node();
  return record(tape, std::move(out), [=](std::int64_t id) {
    return [=] { tape->grad_accum(tn) += tape->grad_at(id)[0] / n; };
  });
}

Tensor sum_mid(const Tensor& t) {
  require(t.ndim() == 3, "sum_mid: input must be 3-D");
  const std::int64_t A = t.dim(0), N = t.dim(1), K = t.dim(2);
  Array out = Array::Zero(A * K);
  for (std::int64_t a = 0; a < A; ++a) {
    MutMatMap acc(out.data() + a * K, 1, K);
    MatMap block(t.data() + a * N * K, N, K);
    acc += block.colwise().sum();
  }
  Tensor r = Tensor::from_array({A, K}, std::move(out));
  Tape* tape = t.tape();
  const std::int64_t tn = t.node();
  return record(tape, std::move(r), [=](std::int64_t id) {
    return [=] {
      const Array& g = tape->grad_at(id);
      Array& gt = tape->grad_accum(tn);
      for (std::int64_t a = 0; a < A; ++a) {
        MutMatMap block(gt.data() + a * N * K, N, K);
        block.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(g.data() + a * K, K);
      }
    };
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.ndim() == 2 && b.ndim() == 2, "matmul: operands must be 2-D");
  require(a.dim(1) == b.dim(0), "matmul: inner extents must match");
  const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Array out(m * n);
  MutMatMap(out.data(), m, n).noalias() = a.mat() * b.mat();
  Tensor r = Tensor::from_array({m, n}, std::move(out));
  Tape* tape = common_tape({&a, &b});
  const std::int64_t an = a.node(), bn = b.node();
  return record(tape, std::move(r), [=, av = a, bv = b](std::int64_t id) {
    return [=] {
      const Array& g = tape->grad_at(id);
      MatMap gm(g.data(), m, n);
      if (an >= 0) grad_mat(tape, an, m, k).noalias() += gm * bv.mat().transpose();
      if (bn >= 0) grad_mat(tape, bn, k, n).noalias() += av.mat().transpose() * gm;
    };
  });
}

Tensor transpose(const Tensor& a) {
  require(a.ndim() == 2, "transpose: input must be 2-D");
  const std::int64_t m = a.dim(0), n = a.dim(1);
  Array out(a.size());
  MutMatMap(out.data(), n, m) = a.mat().transpose();
  Tensor r = Tensor::from_array({n, m}, std::move(out));
  Tape* tape = a.tape();
  const std::int64_t an = a.node();
  return record(tape, std::move(r), [=](std::int64_t id) {
    return [=] {
      const Array& g = tape->grad_at(id);
      grad_mat(tape, an, m, n) += MatMap(g.data(), n, m).transpose();
    };
  });
}

Tensor bmm(const Tensor& a, const Tensor& b, bool ta, bool tb) {
  require(a.ndim() == 3 && b.ndim() == 3, "bmm: operands must be 3-D");
  require(a.dim(0) == b.dim(0), "bmm: batch extents must match");
  const std::int64_t B = a.dim(0);
  const std::int64_t m = ta ? a.dim(2) : a.dim(1);
  const std::int64_t ka = ta ? a.dim(1) : a.dim(2);
  const std::int64_t kb = tb ? b.dim(2) : b.dim(1);
  const std::int64_t n = tb ? b.dim(1) : b.dim(2);
  require(ka == kb, "bmm: inner extents must match");
  const std::int64_t k = ka;
  const std::int64_t as = a.dim(1) * a.dim(2), bs = b.dim(1) * b.dim(2), os = m * n;
  Array out(B * os);
  for (std::int64_t i = 0; i < B; ++i) {
    MatMap ai(a.data() + i * as, a.dim(1), a.dim(2));
    MatMap bi(b.data() + i * bs, b.dim(1), b.dim(2));
    MutMatMap oi(out.data() + i * os, m, n);
    if (!ta && !tb)
      oi.noalias() = ai * bi;
    else if (ta && !tb)
      oi.noalias() = ai.transpose() * bi;
    else if (!ta && tb)
      oi.noalias() = ai * bi.transpose();
    else
      oi.noalias() = ai.transpose() * bi.transpose();
  }
  Tensor r = Tensor::from_array({B, m, n}, std::move(out));
  Tape* tape = common_tape({&a, &b});
  const std::int64_t an = a.node(), bn = b.node();
  return record(tape, std::move(r), [=, av = a, bv = b](std::int64_t id) {
    return [=] {
      const Array& g = tape->grad_at(id);
      for (std::int64_t i = 0; i < B; ++i) {
        MatMap gi(g.data() + i * os, m, n);
        MatMap ai(av.data() + i * as, av.dim(1), av.dim(2));
        MatMap bi(bv.data() + i * bs, bv.dim(1), bv.dim(2));
        if (an >= 0) {
          MutMatMap ga(tape->grad_accum(an).data() + i * as, av.dim(1), av.dim(2));
          if (!ta)
            ga.noalias() += tb ? (gi * bi).eval() : (gi * bi.transpose()).eval();
          else
            ga.noalias() += tb ? (bi.transpose() * gi.transpose()).eval() : (bi * gi.transpose()).eval();
        }
        if (bn >= 0) {
          MutMatMap gb(tape->grad_accum(bn).data() + i * bs, bv.dim(1), bv.dim(2));
          if (!tb)
            gb.noalias() += ta ? (ai * gi).eval() : (ai.transpose() * gi).eval();
          else
            gb.noalias() += ta ? (gi.transpose() * ai.transpose()).eval() : (gi.transpose() * ai).eval();
        }
      }
    };
  });
}

Tensor softmax_rows(const Tensor& m, double temperature) {
  require(m.ndim() == 2, "softmax_rows: input must be 2-D");
  require(temperature > 0.0, "softmax_rows: temperature must be positive");
  const std::int64_t rows = m.dim(0), cols = m.dim(1);
  Array out(m.size());
  {
    MutMatMap om(out.data(), rows, cols);
    om = m.mat() / temperature;
    for (std::int64_t r = 0; r < rows; ++r) {
      auto row = om.row(r).array();
      row -= row.maxCoeff();
      row = row.exp();
      row /= row.sum();
    }
  }
  Tensor r = Tensor::from_array(m.shape(), std::move(out));
  Tape* tape = m.tape();
  const std::int64_t mn = m.node();
  const Tensor y = r;
  return record(tape, std::move(r), [=](std::int64_t id) {
    return [=] {
      const Array& g = tape->grad_at(id);
      MatMap gm(g.data(), rows, cols);
      MatMap ym = y.mat();
      MutMatMap gx = grad_mat(tape, mn, rows, cols);
      for (std::int64_t r2 = 0; r2 < rows; ++r2) {
        const double s = gm.row(r2).dot(ym.row(r2));
        gx.row(r2).array() +=
            ym.row(r2).array() * (gm.row(r2).array() - s) / temperature;
      }
    };
  });
}

Tensor layer_norm_rows(const Tensor& x, const LayerNormParams& p) {
  require(x.ndim() == 2, "layer_norm_rows: input must be 2-D");
  const std::int64_t rows = x.dim(0), D = x.dim(1);
  require(p.alpha.size() == D && p.beta.size() == D,
          "layer_norm_rows: gain/bias length must match row width");
  require(p.eps > 0.0, "layer_norm_rows: eps must be positive");
  auto xhat = std::make_shared<Array>(x.size());
  auto inv = std::make_shared<Array>(rows);
  Array out(x.size());
  {
    MatMap xm = x.mat();
    const auto alpha = Eigen::Map<const Array>(p.alpha.data(), D);
    const auto beta = Eigen::Map<const Array>(p.beta.data(), D);
    for (std::int64_t r = 0; r < rows; ++r) {
      const auto row = xm.row(r).array();
      const double mu = row.mean();
      const double var = (row - mu).square().sum() / static_cast<double>(D);
      const double iv = 1.0 / std::sqrt(var + p.eps);
      (*inv)[r] = iv;
      Eigen::Map<Array> xh(xhat->data() + r * D, D);
      xh = (row - mu).transpose() * iv;
      Eigen::Map<Array>(out.data() + r * D, D) = alpha * xh + beta;
    }
  }
  Tensor r = Tensor::from_array(x.shape(), std::move(out));
  Tape* tape = common_tape({&x, &p.alpha, &p.beta});
  const std::int64_t xn = x.node(), an = p.alpha.node(), bn = p.beta.node();
  const Tensor alpha_t = p.alpha;
  return record(tape, std::move(r), [=](std::int64_t id) {
    return [=] {
      const Array& g = tape->grad_at(id);
      const auto alpha = Eigen::Map<const Array>(alpha_t.data(), D);
      for (std::int64_t r2 = 0; r2 < rows; ++r2) {
        const auto gr = Eigen::Map<const Array>(g.data() + r2 * D, D);
        const auto xh = Eigen::Map<const Array>(xhat->data() + r2 * D, D);
        if (bn >= 0) tape->grad_accum(bn) += gr;
        if (an >= 0) tape->grad_accum(an) += gr * xh;
        if (xn >= 0) {
          const Array h = alpha * gr;
          const double mh = h.mean();
          const double mhx = (h * xh).mean();
          Eigen::Map<Array>(tape->grad_accum(xn).data() + r2 * D, D) +=
              (*inv)[r2] * (h - mh - xh * mhx);
        }
      }
    };
  });
}

Tensor layer_norm(const Tensor& x, const LayerNormParams& p) {
  require(x.ndim() == 1, "layer_norm: input must be 1-D");
  return layer_norm_rows(x.reshaped({1, x.size()}), p).reshaped({x.size()});
}

namespace {

// Patch extraction for convolution: image [B,H,W,C] -> rows of length
// kh*kw*C, one per (batch, patch-y, patch-x), zero-filled out of bounds.
void im2col(const double* img, std::int64_t B, std::int64_t H, std::int64_t W, std::int64_t C,
            std::int64_t kh, std::int64_t kw, std::int64_t stride, std::int64_t pad,
            std::int64_t PH, std::int64_t PW, double* out) {
  const std::int64_t patch = kh * kw * C;
  for (std::int64_t b = 0; b < B; ++b) {
    const double* im = img + b * H * W * C;
    for (std::int64_t py = 0; py < PH; ++py)
      for (std::int64_t px = 0; px < PW; ++px) {
        double* row = out + ((b * PH + py) * PW + px) * patch;
        for (std::int64_t ky = 0; ky < kh; ++ky) {
          const std::int64_t iy = py * stride - pad + ky;
          for (std::int64_t kx = 0; kx < kw; ++kx) {
            const std::int64_t ix = px * stride - pad + kx;
            double* dst = row + (ky * kw + kx) * C;
            if (iy < 0 || iy >= H || ix < 0 || ix >= W)
              std::fill(dst, dst + C, 0.0);
            else {
              const double* src = im + (iy * W + ix) * C;
              std::copy(src, src + C, dst);
            }
          }
        }
      }
  }
}

// Adjoint of im2col: scatter-add patch rows back into the image.
void col2im(const double* cols, std::int64_t B, std::int64_t H, std::int64_t W, std::int64_t C,
            std::int64_t kh, std::int64_t kw, std::int64_t stride, std::int64_t pad,
            std::int64_t PH, std::int64_t PW, double* img) {
  const std::int64_t patch = kh * kw * C;
  for (std::int64_t b = 0; b < B; ++b) {
    double* im = img + b * H * W * C;
    for (std::int64_t py = 0; py < PH; ++py)
      for (std::int64_t px = 0; px < PW; ++px) {
        const double* row = cols + ((b * PH + py) * PW + px) * patch;
        for (std::int64_t ky = 0; ky < kh; ++ky) {
          const std::int64_t iy = py * stride - pad + ky;
          if (iy < 0 || iy >= H) continue;
          for (std::int64_t kx = 0; kx < kw; ++kx) {
            const std::int64_t ix = px * stride - pad + kx;
            if (ix < 0 || ix >= W) continue;
            const double* src = row + (ky * kw + kx) * C;
            double* dst = im + (iy * W + ix) * C;
            for (std::int64_t c = 0; c < C; ++c) dst[c] += src[c];
          }
        }
      }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::int64_t stride,
              std::int64_t pad) {
  require(x.ndim() == 4, "conv2d: input must be [B,H,W,C]");
  require(w.ndim() == 4, "conv2d: weight must be [kh,kw,Cin,Cout]");
  require(stride >= 1 && pad >= 0, "conv2d: bad stride/padding");
  const std::int64_t B = x.dim(0), H = x.dim(1), W = x.dim(2), Cin = x.dim(3);
  const std::int64_t kh = w.dim(0), kw = w.dim(1), Cout = w.dim(3);
  require(w.dim(2) == Cin, "conv2d: channel mismatch");
  require(b.size() == Cout, "conv2d: bias length must equal output channels");
  require(H + 2 * pad >= kh && W + 2 * pad >= kw, "conv2d: kernel larger than padded input");
  const std::int64_t PH = (H + 2 * pad - kh) / stride + 1;
  const std::int64_t PW = (W + 2 * pad - kw) / stride + 1;
  const std::int64_t rows = B * PH * PW, patch = kh * kw * Cin;
  Array cols(rows * patch);
  im2col(x.data(), B, H, W, Cin, kh, kw, stride, pad, PH, PW, cols.data());
  Array out(rows * Cout);
  {
    MutMatMap om(out.data(), rows, Cout);
    om.noalias() = MatMap(cols.data(), rows, patch) * w.mat(patch, Cout);
    om.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.data(), Cout);
  }
  Tensor r = Tensor::from_array({B, PH, PW, Cout}, std::move(out));
  Tape* tape = common_tape({&x, &w, &b});
  const std::int64_t xn = x.node(), wn = w.node(), bn = b.node();
  return record(tape, std::move(r), [=, xv = x, wv = w](std::int64_t id) {
    return [=] {
      const Array& g = tape->grad_at(id);
      MatMap gm(g.data(), rows, Cout);
      if (bn >= 0) {
        Array& gb = tape->grad_accum(bn);
        Eigen::Map<Eigen::RowVectorXd>(gb.data(), Cout) += gm.colwise().sum();
      }
      if (wn >= 0 || xn >= 0) {
        // Patches are recomputed rather than saved: the GEMMs dominate and
        // this keeps the tape's memory footprint flat across deep stacks.
        Array cols2(rows * patch);
        im2col(xv.data(), B, H, W, Cin, kh, kw, stride, pad, PH, PW, cols2.data());
        if (wn >= 0)
          grad_mat(tape, wn, patch, Cout).noalias() +=
              MatMap(cols2.data(), rows, patch).transpose() * gm;
        if (xn >= 0) {
          Array dcols(rows * patch);
          MutMatMap(dcols.data(), rows, patch).noalias() = gm * wv.mat(patch, Cout).transpose();
          col2im(dcols.data(), B, H, W, Cin, kh, kw, stride, pad, PH, PW,
                 tape->grad_accum(xn).data());
        }
      }
    };
  });
}

Tensor conv_transpose2d(const Tensor& x, const Tensor& w, const Tensor& b, std::int64_t stride,
                        std::int64_t pad, std::int64_t out_pad) {
  require(x.ndim() == 4, "conv_transpose2d: input must be [B,H,W,C]");
  require(w.ndim() == 4, "conv_transpose2d: weight must be [kh,kw,Cout,Cin]");
  require(stride >= 1 && pad >= 0, "conv_transpose2d: bad stride/padding");
  require(out_pad >= 0 && out_pad < stride,
          "conv_transpose2d: output padding must lie in [0, stride)");
  const std::int64_t B = x.dim(0), H = x.dim(1), W = x.dim(2), Cin = x.dim(3);
  const std::int64_t kh = w.dim(0), kw = w.dim(1), Cout = w.dim(2);
  require(w.dim(3) == Cin, "conv_transpose2d: channel mismatch");
  require(b.size() == Cout, "conv_transpose2d: bias length must equal output channels");
  const std::int64_t HO = (H - 1) * stride - 2 * pad + kh + out_pad;
  const std::int64_t WO = (W - 1) * stride - 2 * pad + kw + out_pad;
  require(HO >= 1 && WO >= 1, "conv_transpose2d: empty output");
  const std::int64_t rows = B * H * W, patch = kh * kw * Cout;
  Array cols(rows * patch);
  MutMatMap(cols.data(), rows, patch).noalias() =
      x.mat(rows, Cin) * w.mat(patch, Cin).transpose();
  Array out = Array::Zero(B * HO * WO * Cout);
  col2im(cols.data(), B, HO, WO, Cout, kh, kw, stride, pad, H, W, out.data());
  MutMatMap(out.data(), B * HO * WO, Cout).rowwise() +=
      Eigen::Map<const Eigen::RowVectorXd>(b.data(), Cout);
  Tensor r = Tensor::from_array({B, HO, WO, Cout}, std::move(out));
  Tape* tape = common_tape({&x, &w, &b});
  const std::int64_t xn = x.node(), wn = w.node(), bn = b.node();
  return record(tape, std::move(r), [=, xv = x, wv = w](std::int64_t id) {
    return [=] {
      const Array& g = tape->grad_at(id);
      if (bn >= 0) {
        Array& gb = tape->grad_accum(bn);
        Eigen::Map<Eigen::RowVectorXd>(gb.data(), Cout) +=
            MatMap(g.data(), B * HO * WO, Cout).colwise().sum();
      }
      if (xn >= 0 || wn >= 0) {
        Array gcols(rows * patch);
        im2col(g.data(), B, HO, WO, Cout, kh, kw, stride, pad, H, W, gcols.data());
        MatMap gc(gcols.data(), rows, patch);
        if (xn >= 0)
          grad_mat(tape, xn, rows, Cin).noalias() += gc * wv.mat(patch, Cin);
        if (wn >= 0)
          grad_mat(tape, wn, patch, Cin).noalias() += gc.transpose() * xv.mat(rows, Cin);
      }
    };
  });
}

Tensor slice_last(const Tensor& t, std::int64_t begin, std::int64_t len) {
  require(t.ndim() >= 1, "slice_last: input must have at least one axis");
  const std::int64_t C = t.dim(t.ndim() - 1);
  require(begin >= 0 && len >= 1 && begin + len <= C, "slice_last: slice out of range");
  const std::int64_t outer = t.size() / C;
  Array out(outer * len);
  MutMatMap(out.data(), outer, len) = t.mat(outer, C).middleCols(begin, len);
  Shape shape = t.shape();
  shape.back() = len;
  Tensor r = Tensor::from_array(std::move(shape), std::move(out));
  Tape* tape = t.tape();
  const std::int64_t tn = t.node();
  return record(tape, std::move(r), [=](std::int64_t id) {
    return [=] {
      const Array& g = tape->grad_at(id);
      grad_mat(tape, tn, outer, C).middleCols(begin, len) += MatMap(g.data(), outer, len);
    };
  });
}

Tensor slice_first(const Tensor& t, std::int64_t begin, std::int64_t len) {
  require(t.ndim() >= 1, "slice_first: input must have at least one axis");
  const std::int64_t B = t.dim(0);
  require(begin >= 0 && len >= 1 && begin + len <= B, "slice_first: slice out of range");
  const std::int64_t inner = t.size() / std::max<std::int64_t>(B, 1);
  Array out(len * inner);
  Eigen::Map<Array>(out.data(), out.size()) =
      Eigen::Map<const Array>(t.data() + begin * inner, len * inner);
  Shape shape = t.shape();
  shape.front() = len;
  Tensor r = Tensor::from_array(std::move(shape), std::move(out));
  Tape* tape = t.tape();
  const std::int64_t tn = t.node();
  return record(tape, std::move(r), [=](std::int64_t id) {
    return [=] {
      const Array& g = tape->grad_at(id);
      tape->grad_accum(tn).segment(begin * inner, len * inner) += g;
    };
  });
}

Tensor stack_first(const std::vector<Tensor>& parts) {
  require(!parts.empty(), "stack_first: needs at least one tensor");
  const Shape& inner_shape = parts.front().shape();
  const std::int64_t inner = parts.front().size();
  for (const Tensor& p : parts)
    require(p.shape() == inner_shape, "stack_first: all tensors must share one shape");
  const std::int64_t B = static_cast<std::int64_t>(parts.size());
  Array out(B * inner);
  for (std::int64_t b = 0; b < B; ++b)
    out.segment(b * inner, inner) = parts[static_cast<std::size_t>(b)].flat();
  Shape shape;
  shape.reserve(inner_shape.size() + 1);
  shape.push_back(B);
  shape.insert(shape.end(), inner_shape.begin(), inner_shape.end());
  Tensor r = Tensor::from_array(std::move(shape), std::move(out));
  Tape* tape = nullptr;
  for (const Tensor& p : parts) {
    if (p.tape() == nullptr) continue;
    require(tape == nullptr || tape == p.tape(), "operands are bound to different tapes");
    tape = p.tape();
  }
  std::vector<std::int64_t> nodes(static_cast<std::size_t>(B));
  for (std::int64_t b = 0; b < B; ++b)
    nodes[static_cast<std::size_t>(b)] = parts[static_cast<std::size_t>(b)].node();
  return record(tape, std::move(r), [=](std::int64_t id) {
    return [=] {
      const Array& g = tape->grad_at(id);
      for (std::int64_t b = 0; b < B; ++b) {
        const std::int64_t pn = nodes[static_cast<std::size_t>(b)];
        if (pn >= 0) tape->grad_accum(pn) += g.segment(b * inner, inner);
      }
    };
  });
}

std::pair<Tensor, Tensor> softmax_mix(const Tensor& logits, const Tensor& values) {
  require(logits.ndim() == 2, "softmax_mix: logits must be 2-D");
  require(values.ndim() == 3, "softmax_mix: values must be 3-D");
  const std::int64_t K = logits.dim(0), M = logits.dim(1), C = values.dim(2);
  require(values.dim(0) == K && values.dim(1) == M,
          "softmax_mix: logits and values disagree on the leading axes");
  Array w(K * M);
  {
    MatMap lm = logits.mat();
    MutMatMap wm(w.data(), K, M);
    for (std::int64_t m = 0; m < M; ++m) {
      auto col = wm.col(m).array();
      col = (lm.col(m).array() - lm.col(m).maxCoeff()).exp();
      col /= col.sum();
    }
  }
  Array mix = Array::Zero(M * C);
  {
    MutMatMap mm(mix.data(), M, C);
    MatMap wm(w.data(), K, M);
    for (std::int64_t k = 0; k < K; ++k)
      mm.array() += MatMap(values.data() + k * M * C, M, C).array().colwise() *
                    wm.row(k).transpose().array();
  }
  Tensor weights = Tensor::from_array({K, M}, std::move(w));
  Tensor blend = Tensor::from_array({M, C}, std::move(mix));
  Tape* tape = common_tape({&logits, &values});
  if (tape == nullptr) return {std::move(blend), std::move(weights)};
  const std::int64_t ln = logits.node(), vn = values.node();
  const Tensor wv = weights;
  const Tensor vv = values;
  // Softmax backward into the logits, shared by both output closures: given
  // a gradient dW on the weights, dL[k,m] = w[k,m] * (dW[k,m] - sum_j dW[j,m] w[j,m]).
  auto logits_accum = [=](const Eigen::Ref<const MatrixRM>& dw) {
    MatMap wm = wv.mat();
    MutMatMap gl = grad_mat(tape, ln, K, M);
    for (std::int64_t m = 0; m < M; ++m) {
      const double s = dw.col(m).dot(wm.col(m));
      gl.col(m).array() += wm.col(m).array() * (dw.col(m).array() - s);
    }
  };
  const std::int64_t wid = tape->new_node(weights.size());
  tape->set_backward(wid, [=] {
    if (ln < 0) return;
    logits_accum(MatMap(tape->grad_at(wid).data(), K, M));
  });
  weights = tape->adopt(std::move(weights), wid);
  const std::int64_t bid = tape->new_node(blend.size());
  tape->set_backward(bid, [=] {
    const Array& g = tape->grad_at(bid);
    MatMap gm(g.data(), M, C);
    MatMap wm = wv.mat();
    MatrixRM dw(K, M);
    for (std::int64_t k = 0; k < K; ++k) {
      MatMap vk(vv.data() + k * M * C, M, C);
      if (vn >= 0)
        grad_mat(tape, vn, K * M, C).middleRows(k * M, M).array() +=
            gm.array().colwise() * wm.row(k).transpose().array();
      dw.row(k) = (gm.array() * vk.array()).rowwise().sum().transpose();
    }
    if (ln >= 0) logits_accum(dw);
  });
  blend = tape->adopt(std::move(blend), bid);
  return {std::move(blend), std::move(weights)};
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h) {
  return grad_check(f, x, h, x.size());
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h,
                  std::int64_t max_coords) {
  require(h > 0.0, "grad_check: step must be positive");
  require(max_coords >= 1, "grad_check: coordinate budget must be at least one");
  Array analytic;
  {
    Tape tape;
    Tensor xl = tape.leaf(x);
    Tensor loss = f(xl);
    require(loss.size() == 1, "grad_check: f must return a scalar");
    require(loss.tape() == &tape || loss.tape() == nullptr,
            "grad_check: f produced its output on a foreign tape");
    if (loss.tape() == &tape) {
      tape.backward(loss);
      analytic = tape.grad(xl);
    } else {
      // Output does not depend on x at all; the analytic gradient is zero.
      analytic = Array::Zero(x.size());
    }
  }
  const std::int64_t n = x.size();
  const std::int64_t m = std::min(n, max_coords);
  std::vector<double> err(static_cast<std::size_t>(m));
  parallel_for(m, 4, [&](std::int64_t begin, std::int64_t end) {
    for (std::int64_t j = begin; j < end; ++j) {
      const std::int64_t i = j * n / m;
      Array xp = x.array();
      xp[i] += h;
      const double fp = f(Tensor::from_array(x.shape(), std::move(xp))).value();
      Array xm = x.array();
      xm[i] -= h;
      const double fm = f(Tensor::from_array(x.shape(), std::move(xm))).value();
      const double fd = (fp - fm) / (2.0 * h);
      err[static_cast<std::size_t>(j)] =
          std::abs(analytic[i] - fd) / std::max(1.0, std::abs(analytic[i]));
    }
  });
  double worst = 0.0;
  for (double e : err) worst = std::max(worst, e);
  return worst;
}

}  // namespace slotnorm
