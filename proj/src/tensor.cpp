#include "comet/tensor.hpp"

#include <cmath>
#include <cstring>
#include <numbers>
#include <stdexcept>

#include "comet/threading.hpp"

namespace comet {

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

std::int64_t shape_numel(const std::vector<int>& shape) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

std::string shape_to_string(const std::vector<int>& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  s += ")";
  return s;
}

Tensor::Tensor(std::vector<int> shape_in) : shape(std::move(shape_in)) {
  for (int d : shape)
    if (d <= 0)
      throw std::invalid_argument("Tensor: non-positive extent in shape " +
                                  shape_to_string(shape));
  data.assign(static_cast<std::size_t>(shape_numel(shape)), 0.0);
}

Tensor::Tensor(std::vector<int> shape_in, std::vector<double> data_in)
    : shape(std::move(shape_in)), data(std::move(data_in)) {
  for (int d : shape)
    if (d <= 0)
      throw std::invalid_argument("Tensor: non-positive extent in shape " +
                                  shape_to_string(shape));
  if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
    throw std::invalid_argument("Tensor: shape " + shape_to_string(shape) +
                                " does not match data length " +
                                std::to_string(data.size()));
}

Tensor Tensor::scalar(double v) { return Tensor({1}, {v}); }
Tensor Tensor::zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
Tensor Tensor::full(std::vector<int> shape, double v) {
  Tensor t(std::move(shape));
  for (auto& x : t.data) x = v;
  return t;
}

std::int64_t Tensor::numel() const { return static_cast<std::int64_t>(data.size()); }

bool Tensor::all_finite() const {
  for (double v : data)
    if (!std::isfinite(v)) return false;
  return true;
}

std::string Tensor::shape_str() const { return shape_to_string(shape); }

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

const Tensor& Var::value() const {
  if (!defined()) throw std::logic_error("Var::value: undefined variable");
  return tape_->val(id_);
}

const Tensor& Var::grad() const {
  if (!defined()) throw std::logic_error("Var::grad: undefined variable");
  return tape_->grad_of(id_);
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  Node nd;
  nd.value = std::move(value);
  nd.requires_grad = requires_grad;
  nodes_.push_back(std::move(nd));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::emit(Tensor value, std::initializer_list<Var> parents, BackwardFn fn) {
  Node nd;
  nd.value = std::move(value);
  for (const Var& p : parents) {
    if (p.tape() != this)
      throw std::logic_error("Tape::emit: operand recorded on a different tape");
    nd.requires_grad = nd.requires_grad || requires_grad(p.id());
  }
  if (nd.requires_grad) nd.backward_fn = std::move(fn);
  nodes_.push_back(std::move(nd));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Tensor& Tape::grad_buffer(int id) {
  Node& nd = nodes_[static_cast<std::size_t>(id)];
  if (nd.grad.data.empty()) nd.grad = Tensor::zeros(nd.value.shape);
  return nd.grad;
}

const Tensor& Tape::grad_of(int id) { return grad_buffer(id); }

void Tape::backward(const Var& output) {
  const Tensor& v = val(output.id());
  backward(output, Tensor::full(v.shape, 1.0));
}

void Tape::backward(const Var& output, const Tensor& seed) {
  if (output.tape() != this)
    throw std::logic_error("Tape::backward: output from a different tape");
  if (!seed.same_shape(val(output.id())))
    throw std::invalid_argument("backward: seed shape " + seed.shape_str() +
                                " does not match output shape " +
                                val(output.id()).shape_str());
  for (auto& nd : nodes_) nd.grad = Tensor{};
  nodes_[static_cast<std::size_t>(output.id())].grad = seed;
  // Reverse creation order is a reverse topological order; each reached
  // node's rule runs exactly once.
  for (int i = output.id(); i >= 0; --i) {
    Node& nd = nodes_[static_cast<std::size_t>(i)];
    if (nd.grad.data.empty() || !nd.requires_grad || !nd.backward_fn) continue;
    nd.backward_fn(*this, i);
  }
}

double scalar_value(const Var& v) {
  const Tensor& t = v.value();
  if (t.numel() != 1)
    throw std::invalid_argument("scalar_value: tensor has shape " + t.shape_str());
  return t.data[0];
}

// ---------------------------------------------------------------------------
// Dense kernels (row-partitioned; bit-deterministic for any thread count)
// ---------------------------------------------------------------------------

namespace {

constexpr std::int64_t kParallelWork = 1 << 15;

// C(m,n) += A(m,k) * B(k,n)
void mm_nn_acc(const double* A, const double* B, double* C, std::int64_t m,
               std::int64_t k, std::int64_t n) {
  auto body = [=](std::int64_t i0, std::int64_t i1) {
    for (std::int64_t i = i0; i < i1; ++i) {
      const double* a = A + i * k;
      double* c = C + i * n;
      for (std::int64_t kk = 0; kk < k; ++kk) {
        const double av = a[kk];
        const double* b = B + kk * n;
        for (std::int64_t j = 0; j < n; ++j) c[j] += av * b[j];
      }
    }
  };
  if (m * k * n >= kParallelWork) parallel_for(m, body);
  else body(0, m);
}

// C(m,n) += A(m,k) * B(n,k)^T
void mm_nt_acc(const double* A, const double* B, double* C, std::int64_t m,
               std::int64_t k, std::int64_t n) {
  auto body = [=](std::int64_t i0, std::int64_t i1) {
    for (std::int64_t i = i0; i < i1; ++i) {
      const double* a = A + i * k;
      double* c = C + i * n;
      for (std::int64_t j = 0; j < n; ++j) {
        const double* b = B + j * k;
        double s = 0.0;
        for (std::int64_t kk = 0; kk < k; ++kk) s += a[kk] * b[kk];
        c[j] += s;
      }
    }
  };
  if (m * k * n >= kParallelWork) parallel_for(m, body);
  else body(0, m);
}

// C(m,n) += A(k,m)^T * B(k,n)
void mm_tn_acc(const double* A, const double* B, double* C, std::int64_t m,
               std::int64_t k, std::int64_t n) {
  auto body = [=](std::int64_t i0, std::int64_t i1) {
    for (std::int64_t i = i0; i < i1; ++i) {
      double* c = C + i * n;
      for (std::int64_t kk = 0; kk < k; ++kk) {
        const double av = A[kk * m + i];
        const double* b = B + kk * n;
        for (std::int64_t j = 0; j < n; ++j) c[j] += av * b[j];
      }
    }
  };
  if (m * k * n >= kParallelWork) parallel_for(m, body);
  else body(0, m);
}

Tape* same_tape(const Var& a, const Var& b, const char* op) {
  if (!a.defined() || !b.defined() || a.tape() != b.tape())
    throw std::logic_error(std::string(op) + ": operands on different tapes");
  return a.tape();
}

// Validates the suffix-broadcast contract and returns the number of leading
// repetitions of b inside a (1 when shapes are equal).
std::int64_t broadcast_outer(const Tensor& a, const Tensor& b, const char* op) {
  bool ok = b.shape.size() <= a.shape.size();
  if (ok) {
    const std::size_t off = a.shape.size() - b.shape.size();
    for (std::size_t i = 0; i < b.shape.size(); ++i)
      ok = ok && a.shape[off + i] == b.shape[i];
  }
  if (!ok)
    throw std::invalid_argument(std::string(op) + ": shapes " + a.shape_str() +
                                " and " + b.shape_str() + " are incompatible");
  return a.numel() / b.numel();
}

std::vector<int> reduce_last_shape(const Tensor& t) {
  if (t.ndim() <= 1) return {1};
  return std::vector<int>(t.shape.begin(), t.shape.end() - 1);
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise and reduction ops
// ---------------------------------------------------------------------------

Var add(const Var& a, const Var& b) {
  Tape* t = same_tape(a, b, "add");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const std::int64_t outer = broadcast_outer(av, bv, "add");
  const std::int64_t inner = bv.numel();
  Tensor out = av;
  for (std::int64_t r = 0; r < outer; ++r)
    for (std::int64_t i = 0; i < inner; ++i) out[r * inner + i] += bv[i];
  const int ai = a.id(), bi = b.id();
  return t->emit(std::move(out), {a, b}, [ai, bi, outer, inner](Tape& tp, int self) {
    const Tensor& g = tp.grad_of(self);
    if (tp.requires_grad(ai)) {
      Tensor& ga = tp.grad_buffer(ai);
      for (std::int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
    }
    if (tp.requires_grad(bi)) {
      Tensor& gb = tp.grad_buffer(bi);
      for (std::int64_t r = 0; r < outer; ++r)
        for (std::int64_t i = 0; i < inner; ++i) gb[i] += g[r * inner + i];
    }
  });
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var sub(const Var& a, const Var& b) { return add(a, neg(b)); }

Var mul(const Var& a, const Var& b) {
  Tape* t = same_tape(a, b, "mul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const std::int64_t outer = broadcast_outer(av, bv, "mul");
  const std::int64_t inner = bv.numel();
  Tensor out = av;
  for (std::int64_t r = 0; r < outer; ++r)
    for (std::int64_t i = 0; i < inner; ++i) out[r * inner + i] *= bv[i];
  const int ai = a.id(), bi = b.id();
  return t->emit(std::move(out), {a, b}, [ai, bi, outer, inner](Tape& tp, int self) {
    const Tensor& g = tp.grad_of(self);
    const Tensor& av2 = tp.val(ai);
    const Tensor& bv2 = tp.val(bi);
    if (tp.requires_grad(ai)) {
      Tensor& ga = tp.grad_buffer(ai);
      for (std::int64_t r = 0; r < outer; ++r)
        for (std::int64_t i = 0; i < inner; ++i)
          ga[r * inner + i] += g[r * inner + i] * bv2[i];
    }
    if (tp.requires_grad(bi)) {
      Tensor& gb = tp.grad_buffer(bi);
      for (std::int64_t r = 0; r < outer; ++r)
        for (std::int64_t i = 0; i < inner; ++i)
          gb[i] += g[r * inner + i] * av2[r * inner + i];
    }
  });
}

Var div(const Var& a, const Var& b) {
  Tape* t = same_tape(a, b, "div");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const std::int64_t outer = broadcast_outer(av, bv, "div");
  const std::int64_t inner = bv.numel();
  Tensor out = av;
  for (std::int64_t r = 0; r < outer; ++r)
    for (std::int64_t i = 0; i < inner; ++i) out[r * inner + i] /= bv[i];
  const int ai = a.id(), bi = b.id();
  return t->emit(std::move(out), {a, b}, [ai, bi, outer, inner](Tape& tp, int self) {
    const Tensor& g = tp.grad_of(self);
    const Tensor& y = tp.val(self);
    const Tensor& bv2 = tp.val(bi);
    if (tp.requires_grad(ai)) {
      Tensor& ga = tp.grad_buffer(ai);
      for (std::int64_t r = 0; r < outer; ++r)
        for (std::int64_t i = 0; i < inner; ++i)
          ga[r * inner + i] += g[r * inner + i] / bv2[i];
    }
    if (tp.requires_grad(bi)) {
      Tensor& gb = tp.grad_buffer(bi);
      for (std::int64_t r = 0; r < outer; ++r)
        for (std::int64_t i = 0; i < inner; ++i)
          gb[i] -= g[r * inner + i] * y[r * inner + i] / bv2[i];
    }
  });
}

Var scale(const Var& a, double c) {
  Tape* t = a.tape();
  Tensor out = a.value();
  for (auto& x : out.data) x *= c;
  const int ai = a.id();
  return t->emit(std::move(out), {a}, [ai, c](Tape& tp, int self) {
    const Tensor& g = tp.grad_of(self);
    if (tp.requires_grad(ai)) {
      Tensor& ga = tp.grad_buffer(ai);
      for (std::int64_t i = 0; i < g.numel(); ++i) ga[i] += c * g[i];
    }
  });
}

Var square(const Var& x) {
  Tape* t = x.tape();
  Tensor out = x.value();
  for (auto& v : out.data) v *= v;
  const int xi = x.id();
  return t->emit(std::move(out), {x}, [xi](Tape& tp, int self) {
    const Tensor& g = tp.grad_of(self);
    const Tensor& xv = tp.val(xi);
    if (tp.requires_grad(xi)) {
      Tensor& gx = tp.grad_buffer(xi);
      for (std::int64_t i = 0; i < g.numel(); ++i) gx[i] += 2.0 * xv[i] * g[i];
    }
  });
}

Var sqrt(const Var& x) {
  Tape* t = x.tape();
  Tensor out = x.value();
  for (auto& v : out.data) v = std::sqrt(v);
  const int xi = x.id();
  return t->emit(std::move(out), {x}, [xi](Tape& tp, int self) {
    const Tensor& g = tp.grad_of(self);
    const Tensor& y = tp.val(self);
    if (tp.requires_grad(xi)) {
      Tensor& gx = tp.grad_buffer(xi);
      for (std::int64_t i = 0; i < g.numel(); ++i) gx[i] += 0.5 * g[i] / y[i];
    }
  });
}

Var exp(const Var& x) {
  Tape* t = x.tape();
  Tensor out = x.value();
  for (auto& v : out.data) v = std::exp(v);
  const int xi = x.id();
  return t->emit(std::move(out), {x}, [xi](Tape& tp, int self) {
    const Tensor& g = tp.grad_of(self);
    const Tensor& y = tp.val(self);
    if (tp.requires_grad(xi)) {
      Tensor& gx = tp.grad_buffer(xi);
      for (std::int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i] * y[i];
    }
  });
}

Var log(const Var& x) {
  Tape* t = x.tape();
  Tensor out = x.value();
  for (auto& v : out.data) v = std::log(v);
  const int xi = x.id();
  return t->emit(std::move(out), {x}, [xi](Tape& tp, int self) {
    const Tensor& g = tp.grad_of(self);
    const Tensor& xv = tp.val(xi);
    if (tp.requires_grad(xi)) {
      Tensor& gx = tp.grad_buffer(xi);
      for (std::int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i] / xv[i];
    }
  });
}

Var gelu(const Var& x) {
  Tape* t = x.tape();
  Tensor out = x.value();
  for (auto& v : out.data) {
    const double phi = 0.5 * (1.0 + std::erf(v / std::numbers::sqrt2));
    v = v * phi;
  }
  const int xi = x.id();
  return t->emit(std::move(out), {x}, [xi](Tape& tp, int self) {
    const Tensor& g = tp.grad_of(self);
    const Tensor& xv = tp.val(xi);
    if (!tp.requires_grad(xi)) return;
    Tensor& gx = tp.grad_buffer(xi);
    constexpr double inv_sqrt_2pi = 0.3989422804014327;
    for (std::int64_t i = 0; i < g.numel(); ++i) {
      const double v = xv[i];
      const double cdf = 0.5 * (1.0 + std::erf(v / std::numbers::sqrt2));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
      gx[i] += g[i] * (cdf + v * pdf);
    }
  });
}

Var sum(const Var& x) {
  Tape* t = x.tape();
  double s = 0.0;
  for (double v : x.value().data) s += v;
  const int xi = x.id();
  return t->emit(Tensor::scalar(s), {x}, [xi](Tape& tp, int self) {
    const double g = tp.grad_of(self)[0];
    if (tp.requires_grad(xi)) {
      Tensor& gx = tp.grad_buffer(xi);
      for (auto& v : gx.data) v += g;
    }
  });
}

Var mean(const Var& x) {
  const std::int64_t n = x.value().numel();
  return scale(sum(x), 1.0 / static_cast<double>(n));
}

Var sum_last(const Var& x) {
  Tape* t = x.tape();
  const Tensor& xv = x.value();
  if (xv.ndim() < 1) throw std::invalid_argument("sum_last: tensor has no axes");
  const std::int64_t n = xv.shape.back();
  const std::int64_t rows = xv.numel() / n;
  Tensor out(reduce_last_shape(xv));
  for (std::int64_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::int64_t i = 0; i < n; ++i) s += xv[r * n + i];
    out[r] = s;
  }
  const int xi = x.id();
  return t->emit(std::move(out), {x}, [xi, rows, n](Tape& tp, int self) {
    const Tensor& g = tp.grad_of(self);
    if (tp.requires_grad(xi)) {
      Tensor& gx = tp.grad_buffer(xi);
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t i = 0; i < n; ++i) gx[r * n + i] += g[r];
    }
  });
}

Var logsumexp_last(const Var& x) {
  Tape* t = x.tape();
  const Tensor& xv = x.value();
  if (xv.ndim() < 1)
    throw std::invalid_argument("logsumexp_last: tensor has no axes");
  const std::int64_t n = xv.shape.back();
  const std::int64_t rows = xv.numel() / n;
  Tensor out(reduce_last_shape(xv));
  for (std::int64_t r = 0; r < rows; ++r) {
    double m = xv[r * n];
    for (std::int64_t i = 1; i < n; ++i) m = std::max(m, xv[r * n + i]);
    double s = 0.0;
    for (std::int64_t i = 0; i < n; ++i) s += std::exp(xv[r * n + i] - m);
    out[r] = m + std::log(s);
  }
  const int xi = x.id();
  return t->emit(std::move(out), {x}, [xi, rows, n](Tape& tp, int self) {
    const Tensor& g = tp.grad_of(self);
    const Tensor& y = tp.val(self);
    const Tensor& xv2 = tp.val(xi);
    if (tp.requires_grad(xi)) {
      Tensor& gx = tp.grad_buffer(xi);
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t i = 0; i < n; ++i)
          gx[r * n + i] += g[r] * std::exp(xv2[r * n + i] - y[r]);
    }
  });
}

// ---------------------------------------------------------------------------
// Structure ops
// ---------------------------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
  Tape* t = same_tape(a, b, "matmul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const bool batched = av.ndim() == 3 && bv.ndim() == 3;
  if (!batched && !(av.ndim() == 2 && bv.ndim() == 2))
    throw std::invalid_argument("matmul: expected two 2-D or two 3-D tensors, got " +
                                av.shape_str() + " and " + bv.shape_str());
  const std::int64_t nb = batched ? av.dim(0) : 1;
  const std::int64_t m = av.dim(batched ? 1 : 0);
  const std::int64_t k = av.dim(batched ? 2 : 1);
  const std::int64_t k2 = bv.dim(batched ? 1 : 0);
  const std::int64_t n = bv.dim(batched ? 2 : 1);
  if (k != k2 || (batched && bv.dim(0) != nb))
    throw std::invalid_argument("matmul: incompatible shapes " + av.shape_str() +
                                " and " + bv.shape_str());
  Tensor out(batched ? std::vector<int>{static_cast<int>(nb), static_cast<int>(m),
                                        static_cast<int>(n)}
                     : std::vector<int>{static_cast<int>(m), static_cast<int>(n)});
  for (std::int64_t bidx = 0; bidx < nb; ++bidx)
    mm_nn_acc(av.data.data() + bidx * m * k, bv.data.data() + bidx * k * n,
              out.data.data() + bidx * m * n, m, k, n);
  const int ai = a.id(), bi = b.id();
  return t->emit(std::move(out), {a, b}, [ai, bi, nb, m, k, n](Tape& tp, int self) {
    const Tensor& g = tp.grad_of(self);
    const Tensor& av2 = tp.val(ai);
    const Tensor& bv2 = tp.val(bi);
    if (tp.requires_grad(ai)) {
      Tensor& ga = tp.grad_buffer(ai);
      for (std::int64_t bb = 0; bb < nb; ++bb)
        mm_nt_acc(g.data.data() + bb * m * n, bv2.data.data() + bb * k * n,
                  ga.data.data() + bb * m * k, m, n, k);
    }
    if (tp.requires_grad(bi)) {
      Tensor& gb = tp.grad_buffer(bi);
      for (std::int64_t bb = 0; bb < nb; ++bb)
        mm_tn_acc(av2.data.data() + bb * m * k, g.data.data() + bb * m * n,
                  gb.data.data() + bb * k * n, k, m, n);
    }
  });
}

Var conv1d(const Var& x, const Var& w, const Var& bias, int stride) {
  Tape* t = same_tape(x, w, "conv1d");
  same_tape(x, bias, "conv1d");
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const Tensor& bv = bias.value();
  if (xv.ndim() != 2 || wv.ndim() != 2 || bv.ndim() != 1)
    throw std::invalid_argument("conv1d: expected x (C,T), w (d,k), bias (d); got " +
                                xv.shape_str() + ", " + wv.shape_str() + ", " +
                                bv.shape_str());
  const std::int64_t C = xv.dim(0), T = xv.dim(1);
  const std::int64_t d = wv.dim(0), k = wv.dim(1);
  if (bv.dim(0) != d)
    throw std::invalid_argument("conv1d: bias shape " + bv.shape_str() +
                                " does not match filter count " + std::to_string(d));
  if (stride < 1) throw std::invalid_argument("conv1d: stride must be >= 1");
  if (k > T)
    throw std::invalid_argument("conv1d: kernel length " + std::to_string(k) +
                                " exceeds signal length " + std::to_string(T));
  const std::int64_t N = (T - k) / stride + 1;
  Tensor out({static_cast<int>(C), static_cast<int>(N), static_cast<int>(d)});
  auto body = [&](std::int64_t c0, std::int64_t c1) {
    for (std::int64_t c = c0; c < c1; ++c)
      for (std::int64_t j = 0; j < N; ++j) {
        const double* win = xv.data.data() + c * T + j * stride;
        double* o = out.data.data() + (c * N + j) * d;
        for (std::int64_t f = 0; f < d; ++f) {
          const double* wr = wv.data.data() + f * k;
          double s = bv[f];
          for (std::int64_t tt = 0; tt < k; ++tt) s += win[tt] * wr[tt];
          o[f] = s;
        }
      }
  };
  if (C * N * d * k >= kParallelWork) parallel_for(C, body);
  else body(0, C);
  const int xi = x.id(), wi = w.id(), bi = bias.id();
  return t->emit(std::move(out), {x, w, bias},
                 [xi, wi, bi, C, T, d, k, N, stride](Tape& tp, int self) {
    const Tensor& g = tp.grad_of(self);
    const Tensor& xv2 = tp.val(xi);
    const Tensor& wv2 = tp.val(wi);
    if (tp.requires_grad(xi)) {
      Tensor& gx = tp.grad_buffer(xi);
      auto body = [&](std::int64_t c0, std::int64_t c1) {
        for (std::int64_t c = c0; c < c1; ++c)
          for (std::int64_t j = 0; j < N; ++j) {
            const double* go = g.data.data() + (c * N + j) * d;
            double* gwin = gx.data.data() + c * T + j * stride;
            for (std::int64_t f = 0; f < d; ++f) {
              const double gv = go[f];
              const double* wr = wv2.data.data() + f * k;
              for (std::int64_t tt = 0; tt < k; ++tt) gwin[tt] += gv * wr[tt];
            }
          }
      };
      if (C * N * d * k >= kParallelWork) parallel_for(C, body);
      else body(0, C);
    }
    if (tp.requires_grad(wi)) {
      Tensor& gw = tp.grad_buffer(wi);
      for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t j = 0; j < N; ++j) {
          const double* go = g.data.data() + (c * N + j) * d;
          const double* win = xv2.data.data() + c * T + j * stride;
          for (std::int64_t f = 0; f < d; ++f) {
            const double gv = go[f];
            double* gwr = gw.data.data() + f * k;
            for (std::int64_t tt = 0; tt < k; ++tt) gwr[tt] += gv * win[tt];
          }
        }
    }
    if (tp.requires_grad(bi)) {
      Tensor& gb = tp.grad_buffer(bi);
      for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t j = 0; j < N; ++j) {
          const double* go = g.data.data() + (c * N + j) * d;
          for (std::int64_t f = 0; f < d; ++f) gb[f] += go[f];
        }
    }
  });
}

Var softmax_last(const Var& x) {
  Tape* t = x.tape();
  const Tensor& xv = x.value();
  if (xv.ndim() < 1) throw std::invalid_argument("softmax: tensor has no axes");
  const std::int64_t n = xv.shape.back();
  const std::int64_t rows = xv.numel() / n;
  Tensor out = xv;
  for (std::int64_t r = 0; r < rows; ++r) {
    double* row = out.data.data() + r * n;
    double m = row[0];
    for (std::int64_t i = 1; i < n; ++i) m = std::max(m, row[i]);
    double s = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
      row[i] = std::exp(row[i] - m);
      s += row[i];
    }
    for (std::int64_t i = 0; i < n; ++i) row[i] /= s;
  }
  const int xi = x.id();
  return t->emit(std::move(out), {x}, [xi, rows, n](Tape& tp, int self) {
    const Tensor& g = tp.grad_of(self);
    const Tensor& y = tp.val(self);
    if (!tp.requires_grad(xi)) return;
    Tensor& gx = tp.grad_buffer(xi);
    for (std::int64_t r = 0; r < rows; ++r) {
      const double* gr = g.data.data() + r * n;
      const double* yr = y.data.data() + r * n;
      double dot = 0.0;
      for (std::int64_t i = 0; i < n; ++i) dot += gr[i] * yr[i];
      double* gxr = gx.data.data() + r * n;
      for (std::int64_t i = 0; i < n; ++i) gxr[i] += yr[i] * (gr[i] - dot);
    }
  });
}

Var layernorm_last(const Var& x, const Var& gamma, const Var& beta, double eps) {
  Tape* t = same_tape(x, gamma, "layernorm");
  same_tape(x, beta, "layernorm");
  const Tensor& xv = x.value();
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  if (xv.ndim() < 1) throw std::invalid_argument("layernorm: tensor has no axes");
  const std::int64_t n = xv.shape.back();
  if (gv.ndim() != 1 || gv.dim(0) != n || bv.ndim() != 1 || bv.dim(0) != n)
    throw std::invalid_argument("layernorm: affine shapes " + gv.shape_str() +
                                ", " + bv.shape_str() +
                                " do not match last axis of " + xv.shape_str());
  const std::int64_t rows = xv.numel() / n;
  Tensor xhat(xv.shape);
  Tensor inv_s({static_cast<int>(rows)});
  Tensor out(xv.shape);
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* row = xv.data.data() + r * n;
    double mu = 0.0;
    for (std::int64_t i = 0; i < n; ++i) mu += row[i];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
      const double dv = row[i] - mu;
      var += dv * dv;
    }
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_s[r] = is;
    for (std::int64_t i = 0; i < n; ++i) {
      const double xh = (row[i] - mu) * is;
      xhat[r * n + i] = xh;
      out[r * n + i] = xh * gv[i] + bv[i];
    }
  }
  const int xi = x.id(), gi = gamma.id(), bi = beta.id();
  return t->emit(std::move(out), {x, gamma, beta},
                 [xi, gi, bi, rows, n, xhat = std::move(xhat),
                  inv_s = std::move(inv_s)](Tape& tp, int self) {
    const Tensor& g = tp.grad_of(self);
    const Tensor& gv2 = tp.val(gi);
    if (tp.requires_grad(xi)) {
      Tensor& gx = tp.grad_buffer(xi);
      for (std::int64_t r = 0; r < rows; ++r) {
        const double* gr = g.data.data() + r * n;
        const double* xh = xhat.data.data() + r * n;
        double sum_d = 0.0, sum_dx = 0.0;
        for (std::int64_t i = 0; i < n; ++i) {
          const double dxh = gr[i] * gv2[i];
          sum_d += dxh;
          sum_dx += dxh * xh[i];
        }
        const double inv_n = 1.0 / static_cast<double>(n);
        double* gxr = gx.data.data() + r * n;
        for (std::int64_t i = 0; i < n; ++i) {
          const double dxh = gr[i] * gv2[i];
          gxr[i] += inv_s[r] * (dxh - sum_d * inv_n - xh[i] * sum_dx * inv_n);
        }
      }
    }
    if (tp.requires_grad(gi)) {
      Tensor& gg = tp.grad_buffer(gi);
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t i = 0; i < n; ++i)
          gg[i] += g[r * n + i] * xhat[r * n + i];
    }
    if (tp.requires_grad(bi)) {
      Tensor& gb = tp.grad_buffer(bi);
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t i = 0; i < n; ++i) gb[i] += g[r * n + i];
    }
  });
}

Var concat_rows(const std::vector<Var>& xs) {
  if (xs.empty()) throw std::invalid_argument("concat: no inputs");
  Tape* t = xs[0].tape();
  const Tensor& first = xs[0].value();
  std::vector<int> tail(first.shape.begin() + 1, first.shape.end());
  std::int64_t total_rows = 0;
  for (const Var& v : xs) {
    same_tape(xs[0], v, "concat");
    const Tensor& tv = v.value();
    std::vector<int> vt(tv.shape.begin() + (tv.ndim() > 0 ? 1 : 0), tv.shape.end());
    if (tv.ndim() == 0 || vt != tail)
      throw std::invalid_argument("concat: mismatched trailing shape between " +
                                  first.shape_str() + " and " + tv.shape_str());
    total_rows += tv.dim(0);
  }
  std::vector<int> out_shape = first.shape;
  out_shape[0] = static_cast<int>(total_rows);
  Tensor out(out_shape);
  std::int64_t off = 0;
  std::vector<int> ids;
  std::vector<std::int64_t> sizes;
  for (const Var& v : xs) {
    const Tensor& tv = v.value();
    std::memcpy(out.data.data() + off, tv.data.data(),
                sizeof(double) * static_cast<std::size_t>(tv.numel()));
    off += tv.numel();
    ids.push_back(v.id());
    sizes.push_back(tv.numel());
  }
  // emit() takes an initializer_list; register parents manually via a chain
  // of no-op dependencies would be clumsy, so bypass with a custom node.
  Var out_var = t->emit(std::move(out), {xs[0]},
                        [ids, sizes](Tape& tp, int self) {
    const Tensor& g = tp.grad_of(self);
    std::int64_t off2 = 0;
    for (std::size_t p = 0; p < ids.size(); ++p) {
      if (tp.requires_grad(ids[p])) {
        Tensor& gp = tp.grad_buffer(ids[p]);
        for (std::int64_t i = 0; i < sizes[p]; ++i) gp[i] += g[off2 + i];
      }
      off2 += sizes[p];
    }
  });
  // Fix requires_grad: any input with gradients makes the output need them.
  bool req = false;
  for (const Var& v : xs) req = req || t->requires_grad(v.id());
  if (req && !t->requires_grad(out_var.id()))
    throw std::logic_error("concat: gradient wiring failed");
  return out_var;
}

Var gather_rows(const Var& x, std::vector<int> idx) {
  Tape* t = x.tape();
  const Tensor& xv = x.value();
  if (xv.ndim() < 1) throw std::invalid_argument("gather: tensor has no axes");
  const std::int64_t nrows = xv.dim(0);
  const std::int64_t row_len = xv.numel() / nrows;
  for (int i : idx)
    if (i < 0 || i >= nrows)
      throw std::invalid_argument("gather: index " + std::to_string(i) +
                                  " out of range for " + xv.shape_str());
  std::vector<int> out_shape = xv.shape;
  out_shape[0] = static_cast<int>(idx.size());
  Tensor out(out_shape);
  for (std::size_t r = 0; r < idx.size(); ++r)
    std::memcpy(out.data.data() + static_cast<std::int64_t>(r) * row_len,
                xv.data.data() + static_cast<std::int64_t>(idx[r]) * row_len,
                sizeof(double) * static_cast<std::size_t>(row_len));
  const int xi = x.id();
  return t->emit(std::move(out), {x},
                 [xi, idx = std::move(idx), row_len](Tape& tp, int self) {
    const Tensor& g = tp.grad_of(self);
    if (!tp.requires_grad(xi)) return;
    Tensor& gx = tp.grad_buffer(xi);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      double* dst = gx.data.data() + static_cast<std::int64_t>(idx[r]) * row_len;
      const double* src = g.data.data() + static_cast<std::int64_t>(r) * row_len;
      for (std::int64_t i = 0; i < row_len; ++i) dst[i] += src[i];
    }
  });
}

Var slice_rows(const Var& x, int start, int len) {
  const Tensor& xv = x.value();
  if (xv.ndim() < 1) throw std::invalid_argument("slice: tensor has no axes");
  if (start < 0 || len < 1 || start + len > xv.dim(0))
    throw std::invalid_argument("slice: range [" + std::to_string(start) + ", " +
                                std::to_string(start + len) +
                                ") out of bounds for " + xv.shape_str());
  std::vector<int> idx(static_cast<std::size_t>(len));
  for (int i = 0; i < len; ++i) idx[static_cast<std::size_t>(i)] = start + i;
  return gather_rows(x, std::move(idx));
}

Var transpose(const Var& x) {
  const Tensor& xv = x.value();
  if (xv.ndim() != 2)
    throw std::invalid_argument("transpose: expected 2-D tensor, got " +
                                xv.shape_str());
  return permute(x, {1, 0});
}

Var permute(const Var& x, const std::vector<int>& perm) {
  Tape* t = x.tape();
  const Tensor& xv = x.value();
  const int nd = xv.ndim();
  if (static_cast<int>(perm.size()) != nd)
    throw std::invalid_argument("permute: permutation rank " +
                                std::to_string(perm.size()) +
                                " does not match tensor " + xv.shape_str());
  std::vector<bool> seen(static_cast<std::size_t>(nd), false);
  for (int p : perm) {
    if (p < 0 || p >= nd || seen[static_cast<std::size_t>(p)])
      throw std::invalid_argument("permute: invalid permutation");
    seen[static_cast<std::size_t>(p)] = true;
  }
  std::vector<int> out_shape(static_cast<std::size_t>(nd));
  for (int i = 0; i < nd; ++i)
    out_shape[static_cast<std::size_t>(i)] =
        xv.shape[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];

  auto apply = [nd](const Tensor& src, const std::vector<int>& pm,
                    const std::vector<int>& dst_shape) {
    Tensor dst(dst_shape);
    std::vector<std::int64_t> src_strides(static_cast<std::size_t>(nd), 1);
    for (int i = nd - 2; i >= 0; --i)
      src_strides[static_cast<std::size_t>(i)] =
          src_strides[static_cast<std::size_t>(i + 1)] * src.dim(i + 1);
    std::vector<std::int64_t> dst_coord(static_cast<std::size_t>(nd), 0);
    const std::int64_t total = src.numel();
    for (std::int64_t flat = 0; flat < total; ++flat) {
      std::int64_t src_off = 0;
      for (int i = 0; i < nd; ++i)
        src_off += dst_coord[static_cast<std::size_t>(i)] *
                   src_strides[static_cast<std::size_t>(pm[static_cast<std::size_t>(i)])];
      dst[flat] = src[src_off];
      for (int i = nd - 1; i >= 0; --i) {
        if (++dst_coord[static_cast<std::size_t>(i)] <
            dst_shape[static_cast<std::size_t>(i)])
          break;
        dst_coord[static_cast<std::size_t>(i)] = 0;
      }
    }
    return dst;
  };

  Tensor out = apply(xv, perm, out_shape);
  std::vector<int> inv(static_cast<std::size_t>(nd));
  for (int i = 0; i < nd; ++i)
    inv[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])] = i;
  const int xi = x.id();
  std::vector<int> in_shape = xv.shape;
  return t->emit(std::move(out), {x},
                 [xi, inv = std::move(inv), in_shape = std::move(in_shape),
                  apply](Tape& tp, int self) {
    const Tensor& g = tp.grad_of(self);
    if (!tp.requires_grad(xi)) return;
    Tensor gperm = apply(g, inv, in_shape);
    Tensor& gx = tp.grad_buffer(xi);
    for (std::int64_t i = 0; i < gperm.numel(); ++i) gx[i] += gperm[i];
  });
}

Var reshape(const Var& x, std::vector<int> shape) {
  Tape* t = x.tape();
  const Tensor& xv = x.value();
  if (shape_numel(shape) != xv.numel())
    throw std::invalid_argument("reshape: cannot view " + xv.shape_str() + " as " +
                                shape_to_string(shape));
  Tensor out(std::move(shape), xv.data);
  const int xi = x.id();
  return t->emit(std::move(out), {x}, [xi](Tape& tp, int self) {
    const Tensor& g = tp.grad_of(self);
    if (tp.requires_grad(xi)) {
      Tensor& gx = tp.grad_buffer(xi);
      for (std::int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
    }
  });
}

}  // namespace comet
