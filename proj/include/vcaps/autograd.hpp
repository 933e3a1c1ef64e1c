#pragma once

#include <cmath>
#include <deque>
#include <functional>
#include <initializer_list>
#include <string>
#include <utility>
#include <vector>

#include "vcaps/tensor.hpp"

namespace vcaps {

template <typename T>
class Tape;

// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
template <typename T>
class Var {
 public:
  Var() = default;

  const Tensor<T>& value() const { return tape_->value_of(id_); }
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }
  std::size_t id() const noexcept { return id_; }
  Tape<T>& tape() const noexcept { return *tape_; }
  bool valid() const noexcept { return tape_ != nullptr; }
  bool requires_grad() const { return tape_->requires_grad(id_); }

 private:
  friend class Tape<T>;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Records primitive applications in creation order. Creation order is a
// topological order, so the backward sweep walks ids from the loss downwards
// and visits every contributing node exactly once.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor<T>& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value) { return push("constant", std::move(value), false, nullptr, true); }

  Var<T> variable(Tensor<T> value) { return push("variable", std::move(value), true, nullptr, true); }

  // Appends the result of a primitive. The node needs a gradient iff any parent does;
  // otherwise the backward closure is dropped.
  Var<T> record(std::string op, Tensor<T> value, std::initializer_list<Var<T>> parents, BackwardFn fn) {
    if (!scope_.empty()) op = scope_ + "/" + op;
    bool needs = false;
    for (const auto& p : parents) {
      if (p.tape_ != this) throw UsageError(op + ": operand recorded on a different tape");
      needs = needs || nodes_[p.id_].requires_grad;
    }
    if (check_finite_ && !value.all_finite()) {
      throw NumericError("non-finite value produced by " + op);
    }
    return push(std::move(op), std::move(value), needs, needs ? std::move(fn) : BackwardFn{}, false);
  }

  void backward(const Var<T>& loss) {
    if (loss.tape_ != this) throw UsageError("backward: loss recorded on a different tape");
    if (loss.size() != 1) {
      throw UsageError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    }
    Node& root = nodes_[loss.id_];
    if (!root.requires_grad) return;
    root.grad = Tensor<T>(root.value.shape(), T{1});
    for (std::size_t id = loss.id_ + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
      if (check_finite_ && !n.grad.all_finite()) {
        throw NumericError("non-finite gradient flowing into " + n.op);
      }
      n.backward(*this, n.grad);
      if (!n.leaf) n.grad = Tensor<T>();
    }
  }

  // Gradient of a leaf after backward(); zeros when nothing flowed into it.
  Tensor<T> grad(const Var<T>& v) const {
    const Node& n = nodes_.at(v.id_);
    if (n.grad.empty()) return Tensor<T>::zeros(n.value.shape());
    return n.grad;
  }

  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  void accumulate(const Var<T>& v, const Tensor<T>& g) { accumulate(v, g.data()); }

  void accumulate(const Var<T>& v, std::span<const T> g) {
    Node& n = nodes_[v.id_];
    if (!n.requires_grad) return;
    if (g.size() != n.value.size()) {
      throw UsageError("accumulate: gradient size mismatch at " + n.op);
    }
    if (n.grad.empty()) {
      n.grad = Tensor<T>(n.value.shape(), std::vector<T>(g.begin(), g.end()));
      return;
    }
    auto dst = n.grad.data();
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  }

  // Direct access to the gradient buffer for ops that scatter into it.
  std::span<T> grad_buffer(const Var<T>& v) {
    Node& n = nodes_[v.id_];
    if (n.grad.empty()) n.grad = Tensor<T>::zeros(n.value.shape());
    return n.grad.data();
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  void set_check_finite(bool on) noexcept { check_finite_ = on; }

  // Label prefixed to every op recorded from now on (layer attribution in errors).
  void set_scope(std::string scope) { scope_ = std::move(scope); }
  const std::string& scope() const noexcept { return scope_; }
  const std::string& op_name(std::size_t id) const { return nodes_.at(id).op; }

  const Tensor<T>& value_of(std::size_t id) const { return nodes_.at(id).value; }

 private:
  struct Node {
    std::string op;
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    bool leaf = false;
    BackwardFn backward;
  };

  Var<T> push(std::string op, Tensor<T> value, bool requires_grad, BackwardFn fn, bool leaf) {
    nodes_.push_back(Node{std::move(op), std::move(value), {}, requires_grad, leaf, std::move(fn)});
    return Var<T>(this, nodes_.size() - 1);
  }

  std::deque<Node> nodes_;
  std::string scope_;
  bool check_finite_ = true;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_coord = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

// Compares reverse-mode gradients of a scalar function against central
// differences: max over coordinates of |analytic - numeric| / max(1, |analytic|).
// `fn` maps (tape, x) to a scalar Var. An empty `coords` checks every coordinate.
template <typename Fn>
GradCheckReport grad_check(Fn&& fn, const Tensor<double>& point, double step = 1e-4,
                           std::span<const std::size_t> coords = {}) {
  Tensor<double> analytic;
  {
    Tape<double> tape;
    Var<double> x = tape.variable(point);
    Var<double> y = fn(tape, x);
    tape.backward(y);
    analytic = tape.grad(x);
  }
  auto eval = [&](const Tensor<double>& p) {
    Tape<double> tape;
    Var<double> x = tape.constant(p);
    double v = fn(tape, x).value()[0];
    if (!std::isfinite(v)) throw NumericError("grad_check: non-finite function value");
    return v;
  };

  std::vector<std::size_t> all;
  if (coords.empty()) {
    all.resize(point.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    coords = all;
  }

  GradCheckReport report;
  Tensor<double> probe = point;
  for (std::size_t i : coords) {
    const double orig = probe[i];
    probe[i] = orig + step;
    const double up = eval(probe);
    probe[i] = orig - step;
    const double down = eval(probe);
    probe[i] = orig;
    const double numeric = (up - down) / (2.0 * step);
    const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
    if (err >= report.max_rel_error) {
      report = {err, i, analytic[i], numeric};
    }
  }
  return report;
}

}  // namespace vcaps
