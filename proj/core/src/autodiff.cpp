#include "crate/autodiff.hpp"

#include <cmath>
#include <limits>
#include <map>

#include "crate/error.hpp"

namespace crate::ad {

const Matrix& Var::value() const { return tape_->value(id_); }

Var Tape::variable(Matrix value) {
  nodes_.push_back(Node{std::move(value), {}, {}, true});
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Matrix value) {
  nodes_.push_back(Node{std::move(value), {}, {}, false});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Matrix value, std::vector<Var> parents, Backward backward) {
  bool needs = false;
  for (const Var& p : parents) {
    if (p.tape() != this) throw InvalidArgument("autodiff: operands live on different tapes");
    needs = needs || nodes_[p.id()].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), {}, needs ? std::move(backward) : Backward{}, needs});
  return Var(this, nodes_.size() - 1);
}

void Tape::accumulate(const Var& v, const Matrix& g) {
  Node& n = nodes_[v.id()];
  if (!n.requires_grad) return;
  if (n.grad.empty() && !n.value.empty())
    n.grad = g;
  else
    n.grad += g;
}

void Tape::backward(const Var& root) {
  if (root.tape() != this) throw InvalidArgument("backward: root on another tape");
  if (nodes_[root.id()].value.size() != 1) throw ShapeMismatch("backward: root must be a 1x1 scalar");
  for (Node& n : nodes_) n.grad = Matrix();
  visits_ = 0;
  if (!nodes_[root.id()].requires_grad) return;
  nodes_[root.id()].grad = Matrix(1, 1, 1.0);
  for (std::size_t i = root.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.grad.empty() || !n.backward) continue;
    ++visits_;
    n.backward(*this, n.grad);
  }
}

Matrix Tape::grad(const Var& v) const {
  const Node& n = nodes_[v.id()];
  if (n.grad.empty()) return Matrix(n.value.rows(), n.value.cols());
  return n.grad;
}

// ---- primitives -----------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
  return a.tape()->record(crate::matmul(a.value(), b.value()), {a, b}, [a, b](Tape& t, const Matrix& g) {
    if (t.requires_grad(a.id())) t.accumulate(a, crate::matmul_nt(g, b.value()));
    if (t.requires_grad(b.id())) t.accumulate(b, crate::matmul_tn(a.value(), g));
  });
}

Var transpose(const Var& a) {
  return a.tape()->record(crate::transpose(a.value()), {a},
                          [a](Tape& t, const Matrix& g) { t.accumulate(a, crate::transpose(g)); });
}

Var operator+(const Var& a, const Var& b) {
  return a.tape()->record(a.value() + b.value(), {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Var operator-(const Var& a, const Var& b) {
  return a.tape()->record(a.value() - b.value(), {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(b, -g);
  });
}

Var scale(const Var& a, double s) {
  return a.tape()->record(s * a.value(), {a}, [a, s](Tape& t, const Matrix& g) { t.accumulate(a, s * g); });
}

Var operator*(double s, const Var& a) { return scale(a, s); }

Var add_scalar(const Var& a, double s) {
  return a.tape()->record(crate::add_scalar(a.value(), s), {a},
                          [a](Tape& t, const Matrix& g) { t.accumulate(a, g); });
}

Var hadamard(const Var& a, const Var& b) {
  return a.tape()->record(crate::hadamard(a.value(), b.value()), {a, b}, [a, b](Tape& t, const Matrix& g) {
    if (t.requires_grad(a.id())) t.accumulate(a, crate::hadamard(g, b.value()));
    if (t.requires_grad(b.id())) t.accumulate(b, crate::hadamard(g, a.value()));
  });
}

Var relu(const Var& a) {
  return a.tape()->record(crate::relu(a.value()), {a}, [a](Tape& t, const Matrix& g) {
    Matrix d = g;
    const Matrix& x = a.value();
    for (std::size_t k = 0; k < d.size(); ++k)
      if (!(x[k] > 0.0)) d[k] = 0.0;
    t.accumulate(a, d);
  });
}

Var abs(const Var& a) {
  return a.tape()->record(crate::abs(a.value()), {a}, [a](Tape& t, const Matrix& g) {
    Matrix d = g;
    const Matrix& x = a.value();
    for (std::size_t k = 0; k < d.size(); ++k) d[k] *= x[k] > 0.0 ? 1.0 : (x[k] < 0.0 ? -1.0 : 0.0);
    t.accumulate(a, d);
  });
}

Var add_colvec(const Var& a, const Var& v) {
  return a.tape()->record(crate::add_colvec(a.value(), v.value()), {a, v}, [a, v](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    if (t.requires_grad(v.id())) t.accumulate(v, crate::row_sums(g));
  });
}

Var slice_rows(const Var& a, std::size_t begin, std::size_t end) {
  return a.tape()->record(crate::slice_rows(a.value(), begin, end), {a}, [a, begin](Tape& t, const Matrix& g) {
    Matrix d(a.rows(), a.cols());
    std::copy(g.data(), g.data() + g.size(), d.data() + begin * a.cols());
    t.accumulate(a, d);
  });
}

Var slice_cols(const Var& a, std::size_t begin, std::size_t end) {
  return a.tape()->record(crate::slice_cols(a.value(), begin, end), {a}, [a, begin](Tape& t, const Matrix& g) {
    Matrix d(a.rows(), a.cols());
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t j = 0; j < g.cols(); ++j) d(i, begin + j) = g(i, j);
    t.accumulate(a, d);
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw InvalidArgument("concat_rows: no parts");
  std::vector<Matrix> values;
  for (const Var& p : parts) values.push_back(p.value());
  std::vector<Var> ps(parts.begin(), parts.end());
  return parts.front().tape()->record(crate::concat_rows(values), ps, [ps](Tape& t, const Matrix& g) {
    std::size_t off = 0;
    for (const Var& p : ps) {
      if (t.requires_grad(p.id())) t.accumulate(p, crate::slice_rows(g, off, off + p.rows()));
      off += p.rows();
    }
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw InvalidArgument("concat_cols: no parts");
  std::vector<Matrix> values;
  for (const Var& p : parts) values.push_back(p.value());
  std::vector<Var> ps(parts.begin(), parts.end());
  return parts.front().tape()->record(crate::concat_cols(values), ps, [ps](Tape& t, const Matrix& g) {
    std::size_t off = 0;
    for (const Var& p : ps) {
      if (t.requires_grad(p.id())) t.accumulate(p, crate::slice_cols(g, off, off + p.cols()));
      off += p.cols();
    }
  });
}

Var sum(const Var& a) {
  return a.tape()->record(Matrix(1, 1, crate::sum(a.value())), {a},
                          [a](Tape& t, const Matrix& g) { t.accumulate(a, Matrix(a.rows(), a.cols(), g[0])); });
}

Var squared_norm(const Var& a) {
  return a.tape()->record(Matrix(1, 1, crate::squared_norm(a.value())), {a},
                          [a](Tape& t, const Matrix& g) { t.accumulate(a, (2.0 * g[0]) * a.value()); });
}

Var softmax_columns(const Var& a) {
  Matrix s = crate::softmax_columns(a.value());
  const std::size_t out = a.tape()->size();
  return a.tape()->record(std::move(s), {a}, [a, out](Tape& t, const Matrix& g) {
    const Matrix& s = t.value(out);
    Matrix d(s.rows(), s.cols());
    for (std::size_t j = 0; j < s.cols(); ++j) {
      double inner = 0.0;
      for (std::size_t i = 0; i < s.rows(); ++i) inner += g(i, j) * s(i, j);
      for (std::size_t i = 0; i < s.rows(); ++i) d(i, j) = s(i, j) * (g(i, j) - inner);
    }
    t.accumulate(a, d);
  });
}

Var causal_mask(const Var& a, CausalConvention conv) {
  return a.tape()->record(crate::causal_mask(a.value(), conv), {a}, [a, conv](Tape& t, const Matrix& g) {
    Matrix d = g;
    for (std::size_t i = 0; i < d.rows(); ++i)
      for (std::size_t j = 0; j < d.cols(); ++j) {
        const bool keep = conv == CausalConvention::Literal ? i <= j : i >= j;
        if (!keep) d(i, j) = 0.0;
      }
    t.accumulate(a, d);
  });
}

Var logdet_gram(const Var& z, double scale) {
  return z.tape()->record(Matrix(1, 1, crate::logdet_gram(z.value(), scale)), {z},
                          [z, scale](Tape& t, const Matrix& g) {
                            // d/dZ log det(I + s Z^T Z) = 2 s Z (I + s Z^T Z)^{-1}
                            t.accumulate(z, (2.0 * scale * g[0]) * gram_resolvent_apply(z.value(), scale));
                          });
}

Var layer_norm(const Var& z, const Var& gain, const Var& bias, double eps) {
  LayerNormCache cache;
  Matrix y = crate::layer_norm(z.value(), gain.value(), bias.value(), eps, &cache);
  const std::size_t d = y.rows(), n = y.cols();
  Matrix xhat = std::move(cache.xhat);
  std::vector<double> inv_std = std::move(cache.inv_std);
  return z.tape()->record(std::move(y), {z, gain, bias},
                          [z, gain, bias, xhat, inv_std, d, n](Tape& t, const Matrix& g) {
                            const Matrix& gv = gain.value();
                            if (t.requires_grad(gain.id())) t.accumulate(gain, crate::row_sums(crate::hadamard(g, xhat)));
                            if (t.requires_grad(bias.id())) t.accumulate(bias, crate::row_sums(g));
                            if (!t.requires_grad(z.id())) return;
                            Matrix dx(d, n);
                            for (std::size_t j = 0; j < n; ++j) {
                              double mean_g = 0.0, mean_gx = 0.0;
                              for (std::size_t i = 0; i < d; ++i) {
                                const double gh = g(i, j) * gv[i];
                                mean_g += gh;
                                mean_gx += gh * xhat(i, j);
                              }
                              mean_g /= double(d);
                              mean_gx /= double(d);
                              for (std::size_t i = 0; i < d; ++i)
                                dx(i, j) = inv_std[j] * (g(i, j) * gv[i] - mean_g - xhat(i, j) * mean_gx);
                            }
                            t.accumulate(z, dx);
                          });
}

Var cross_entropy(const Var& logits, const Matrix& target) {
  const Matrix& l = logits.value();
  if (l.cols() != 1 || !l.same_shape(target)) throw ShapeMismatch("cross_entropy: expects matching C x 1 columns");
  double m = -std::numeric_limits<double>::infinity();
  for (double v : l.values()) m = std::max(m, v);
  double se = 0.0;
  for (double v : l.values()) se += std::exp(v - m);
  const double lse = m + std::log(se);
  double mass = 0.0, loss = 0.0;
  for (std::size_t c = 0; c < l.size(); ++c) {
    mass += target[c];
    loss -= target[c] * (l[c] - lse);
  }
  return logits.tape()->record(Matrix(1, 1, loss), {logits}, [logits, target, lse, mass](Tape& t, const Matrix& g) {
    const Matrix& l = logits.value();
    Matrix d(l.rows(), 1);
    for (std::size_t c = 0; c < l.size(); ++c) d[c] = g[0] * (mass * std::exp(l[c] - lse) - target[c]);
    t.accumulate(logits, d);
  });
}

// ---- registry -------------------------------------------------------------

namespace {

using Builder = std::function<Var(std::span<const Var>, const Attrs&)>;

void arity(std::span<const Var> in, std::size_t n, std::string_view op) {
  if (in.size() != n)
    throw InvalidArgument(std::string(op) + ": expected " + std::to_string(n) + " inputs, got " + std::to_string(in.size()));
}

const std::map<std::string, Builder, std::less<>>& registry() {
  static const std::map<std::string, Builder, std::less<>> reg = {
      {"matmul", [](auto in, const Attrs&) { arity(in, 2, "matmul"); return matmul(in[0], in[1]); }},
      {"transpose", [](auto in, const Attrs&) { arity(in, 1, "transpose"); return transpose(in[0]); }},
      {"add", [](auto in, const Attrs&) { arity(in, 2, "add"); return in[0] + in[1]; }},
      {"sub", [](auto in, const Attrs&) { arity(in, 2, "sub"); return in[0] - in[1]; }},
      {"scale", [](auto in, const Attrs& a) { arity(in, 1, "scale"); return scale(in[0], a.scalar); }},
      {"add_scalar", [](auto in, const Attrs& a) { arity(in, 1, "add_scalar"); return add_scalar(in[0], a.scalar); }},
      {"hadamard", [](auto in, const Attrs&) { arity(in, 2, "hadamard"); return hadamard(in[0], in[1]); }},
      {"relu", [](auto in, const Attrs&) { arity(in, 1, "relu"); return relu(in[0]); }},
      {"abs", [](auto in, const Attrs&) { arity(in, 1, "abs"); return abs(in[0]); }},
      {"add_colvec", [](auto in, const Attrs&) { arity(in, 2, "add_colvec"); return add_colvec(in[0], in[1]); }},
      {"slice_rows", [](auto in, const Attrs& a) { arity(in, 1, "slice_rows"); return slice_rows(in[0], a.begin, a.end); }},
      {"slice_cols", [](auto in, const Attrs& a) { arity(in, 1, "slice_cols"); return slice_cols(in[0], a.begin, a.end); }},
      {"concat_rows", [](auto in, const Attrs&) { return concat_rows(in); }},
      {"concat_cols", [](auto in, const Attrs&) { return concat_cols(in); }},
      {"sum", [](auto in, const Attrs&) { arity(in, 1, "sum"); return sum(in[0]); }},
      {"squared_norm", [](auto in, const Attrs&) { arity(in, 1, "squared_norm"); return squared_norm(in[0]); }},
      {"softmax_columns", [](auto in, const Attrs&) { arity(in, 1, "softmax_columns"); return softmax_columns(in[0]); }},
      {"causal_mask", [](auto in, const Attrs&) { arity(in, 1, "causal_mask"); return causal_mask(in[0]); }},
      {"logdet_gram", [](auto in, const Attrs& a) { arity(in, 1, "logdet_gram"); return logdet_gram(in[0], a.scalar); }},
      {"layer_norm", [](auto in, const Attrs& a) { arity(in, 3, "layer_norm"); return layer_norm(in[0], in[1], in[2], a.scalar); }},
      {"cross_entropy", [](auto in, const Attrs& a) { arity(in, 1, "cross_entropy"); return cross_entropy(in[0], a.target); }},
  };
  return reg;
}

}  // namespace

Var apply(std::string_view op, std::span<const Var> inputs, const Attrs& attrs) {
  const auto& reg = registry();
  auto it = reg.find(op);
  if (it == reg.end()) throw UnregisteredPrimitive("autodiff: primitive '" + std::string(op) + "' is not registered");
  if (inputs.empty() || !inputs.front().valid()) throw InvalidArgument("autodiff: " + std::string(op) + " needs tape-bound inputs");
  return it->second(inputs, attrs);
}

std::vector<std::string> registered_primitives() {
  std::vector<std::string> names;
  for (const auto& [name, _] : registry()) names.push_back(name);
  return names;
}

// ---- drivers --------------------------------------------------------------

ValueAndGrad value_and_grad(const ScalarFn& f, std::span<const Matrix> at) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(at.size());
  for (const Matrix& m : at) vars.push_back(tape.variable(m));
  const Var out = f(tape, vars);
  if (out.value().size() != 1) throw ShapeMismatch("value_and_grad: function must return a scalar");
  tape.backward(out);
  ValueAndGrad r;
  r.value = out.value()[0];
  for (const Var& v : vars) r.grads.push_back(tape.grad(v));
  return r;
}

std::vector<Matrix> finite_difference_grad(const ScalarFn& f, std::span<const Matrix> at, double step) {
  std::vector<Matrix> point(at.begin(), at.end());
  auto eval = [&]() {
    Tape tape;
    std::vector<Var> vars;
    for (const Matrix& m : point) vars.push_back(tape.constant(m));
    return f(tape, vars).value()[0];
  };
  std::vector<Matrix> grads;
  for (std::size_t p = 0; p < point.size(); ++p) {
    Matrix g(point[p].rows(), point[p].cols());
    for (std::size_t k = 0; k < g.size(); ++k) {
      const double orig = point[p][k];
      point[p][k] = orig + step;
      const double fp = eval();
      point[p][k] = orig - step;
      const double fm = eval();
      point[p][k] = orig;
      g[k] = (fp - fm) / (2.0 * step);
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

}  // namespace crate::ad
