#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "crate/linalg.hpp"
#include "crate/matrix.hpp"

namespace crate::ad {

class Tape;

// Handle to a node on a tape. Cheap to copy; valid as long as the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  const Matrix& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Vector-Jacobian product for one node: receives the gradient flowing into
// the node's output and accumulates into its parents.
using Backward = std::function<void(Tape&, const Matrix& out_grad)>;

// Reverse-mode tape. Nodes are appended in creation order, which is a
// topological order, so backward walks the node list once in reverse.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var variable(Matrix value);  // differentiable leaf
  Var constant(Matrix value);  // gradient is zero
  Var record(Matrix value, std::vector<Var> parents, Backward backward);

  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  void accumulate(const Var& v, const Matrix& g);

  // Seeds d(root)/d(root) = 1; root must be 1x1.
  void backward(const Var& root);
  // Gradient of the last backward root w.r.t. v; zero matrix for constants
  // and nodes the root does not depend on.
  Matrix grad(const Var& v) const;

  std::size_t size() const { return nodes_.size(); }
  std::size_t backward_visits() const { return visits_; }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    Backward backward;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
  std::size_t visits_ = 0;
};

// ---- primitives -----------------------------------------------------------

Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var operator+(const Var& a, const Var& b);
Var operator-(const Var& a, const Var& b);
Var operator*(double s, const Var& a);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var hadamard(const Var& a, const Var& b);
Var relu(const Var& a);
Var abs(const Var& a);
Var add_colvec(const Var& a, const Var& v);
Var slice_rows(const Var& a, std::size_t begin, std::size_t end);
Var slice_cols(const Var& a, std::size_t begin, std::size_t end);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var sum(const Var& a);
Var squared_norm(const Var& a);
Var softmax_columns(const Var& a);
Var causal_mask(const Var& a, CausalConvention conv = CausalConvention::Literal);
Var logdet_gram(const Var& z, double scale);
// Per-column standardization followed by gain/bias (both rows x 1).
Var layer_norm(const Var& z, const Var& gain, const Var& bias, double eps);
// H(target, softmax(logits)) for a C x 1 logit column and constant target.
Var cross_entropy(const Var& logits, const Matrix& target);

// ---- name-based dispatch --------------------------------------------------

struct Attrs {
  double scalar = 0.0;
  std::size_t begin = 0;
  std::size_t end = 0;
  Matrix target;
};

// Builds a node from a registered primitive name; unknown names throw
// UnregisteredPrimitive.
Var apply(std::string_view op, std::span<const Var> inputs, const Attrs& attrs = {});
std::vector<std::string> registered_primitives();

// ---- drivers --------------------------------------------------------------

using ScalarFn = std::function<Var(Tape&, std::span<const Var>)>;

struct ValueAndGrad {
  double value = 0.0;
  std::vector<Matrix> grads;
};

ValueAndGrad value_and_grad(const ScalarFn& f, std::span<const Matrix> at);

// Central finite differences of f at `at`, one entry at a time.
std::vector<Matrix> finite_difference_grad(const ScalarFn& f, std::span<const Matrix> at, double step = 1e-5);

}  // namespace crate::ad
