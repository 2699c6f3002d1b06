#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <string>
#include <vector>

namespace comet {

// Dense row-major tensor of 64-bit reals. Everything trainable in this
// project runs in double precision so finite-difference checks are reliable.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape_in);
  Tensor(std::vector<int> shape_in, std::vector<double> data_in);

  static Tensor scalar(double v);
  static Tensor zeros(std::vector<int> shape);
  static Tensor full(std::vector<int> shape, double v);

  int ndim() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
  std::int64_t numel() const;
  bool same_shape(const Tensor& o) const { return shape == o.shape; }
  bool all_finite() const;
  std::string shape_str() const;

  double& operator[](std::int64_t i) { return data[static_cast<std::size_t>(i)]; }
  double operator[](std::int64_t i) const { return data[static_cast<std::size_t>(i)]; }

  std::vector<int> shape;
  std::vector<double> data;
};

std::int64_t shape_numel(const std::vector<int>& shape);
std::string shape_to_string(const std::vector<int>& shape);

class Tape;

// Handle to a value recorded on a tape.
class Var {
 public:
  Var() = default;
  bool defined() const { return tape_ != nullptr; }
  const Tensor& value() const;
  // Gradient accumulated by the last backward(); zeros if the node was not
  // reached (or backward has not run).
  const Tensor& grad() const;
  Tape* tape() const { return tape_; }
  int id() const { return id_; }

 private:
  friend class Tape;
  Var(Tape* t, int id) : tape_(t), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

// Reverse-mode tape. Nodes are appended in forward order, so reverse node
// order is a reverse topological order. A tape is used by one thread at a
// time; independent tapes may run concurrently.
class Tape {
 public:
  // Called with the tape and the id of the node being differentiated.
  using BackwardFn = std::function<void(Tape&, int)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }
  Var constant(double scalar) { return leaf(Tensor::scalar(scalar), false); }

  // Seeds the output gradient (with ones for the scalar overload) and runs
  // every reached node's backward rule exactly once, in reverse order.
  void backward(const Var& output);
  void backward(const Var& output, const Tensor& seed);

  std::size_t node_count() const { return nodes_.size(); }

  // --- plumbing used by the op builders ---
  Var emit(Tensor value, std::initializer_list<Var> parents, BackwardFn fn);
  const Tensor& val(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool requires_grad(int id) const {
    return nodes_[static_cast<std::size_t>(id)].requires_grad;
  }
  // Gradient accumulation buffer, allocated as zeros on first touch.
  Tensor& grad_buffer(int id);
  const Tensor& grad_of(int id);

 private:
  struct Node {
    Tensor value;
    Tensor grad;  // empty until touched
    bool requires_grad = false;
    BackwardFn backward_fn;
  };
  std::vector<Node> nodes_;
};

double scalar_value(const Var& v);

// ---- elementwise / reduction ops ----
// Binary ops accept equal shapes, or a right operand whose shape is a
// suffix of the left's (broadcast over the leading dims). No other
// broadcasting exists; all other coercions are explicit.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var scale(const Var& a, double c);
Var neg(const Var& a);
Var square(const Var& x);
Var sqrt(const Var& x);
Var exp(const Var& x);
Var log(const Var& x);
Var gelu(const Var& x);  // exact Gaussian-CDF form
Var sum(const Var& x);   // -> shape {1}
Var mean(const Var& x);  // -> shape {1}
Var sum_last(const Var& x);
Var logsumexp_last(const Var& x);  // max-subtracted, overflow-safe

// ---- linear algebra / structure ops ----
Var matmul(const Var& a, const Var& b);  // 2-D, or 3-D with equal batch dim
// x: (C,T), w: (d,k), bias: (d), output (C,N,d) with N = floor((T-k)/stride)+1.
Var conv1d(const Var& x, const Var& w, const Var& bias, int stride);
Var softmax_last(const Var& x);
Var layernorm_last(const Var& x, const Var& gamma, const Var& beta,
                   double eps = 1e-5);
Var concat_rows(const std::vector<Var>& xs);
Var gather_rows(const Var& x, std::vector<int> idx);
Var slice_rows(const Var& x, int start, int len);
Var transpose(const Var& x);  // 2-D
Var permute(const Var& x, const std::vector<int>& perm);
Var reshape(const Var& x, std::vector<int> shape);

}  // namespace comet
