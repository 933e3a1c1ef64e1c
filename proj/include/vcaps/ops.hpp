#pragma once

#include <cmath>
#include <string>
#include <string_view>

#include "vcaps/autograd.hpp"
#include "vcaps/conv.hpp"

// Differentiable primitives. Each op records its forward value on the tape of
// its operands together with the adjoint closure.
namespace vcaps::ops {

template <typename T>
T stable_sigmoid(T x) {
  if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}

// log(1 + e^x) without overflow.
template <typename T>
T softplus(T x) {
  return x > T{0} ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

template <typename T>
Var<T> conv3d(const Var<T>& x, const Var<T>& k, const ConvGeometry& g) {
  Tensor<T> out = conv3d_forward(x.value(), k.value(), g);
  const Dims3 in_ext = detail::spatial(x.shape());
  return x.tape().record("conv3d", std::move(out), {x, k}, [x, k, g, in_ext](Tape<T>& tape, const Tensor<T>& go) {
    if (x.requires_grad()) tape.accumulate(x, conv3d_input_grad(go, k.value(), g, in_ext));
    if (k.requires_grad()) tape.accumulate(k, conv3d_kernel_grad(x.value(), go, g, k.shape()));
  });
}

template <typename T>
Var<T> conv3d_transposed(const Var<T>& y, const Var<T>& k, const ConvGeometry& g) {
  Tensor<T> out = conv3d_transposed_forward(y.value(), k.value(), g);
  return y.tape().record("conv3d_transposed", std::move(out), {y, k}, [y, k, g](Tape<T>& tape, const Tensor<T>& go) {
    if (y.requires_grad()) tape.accumulate(y, conv3d_forward(go, k.value(), g));
    if (k.requires_grad()) tape.accumulate(k, conv3d_kernel_grad(go, y.value(), g, k.shape()));
  });
}

enum class Pointwise { relu, sigmoid };

template <typename T>
Var<T> pointwise(Pointwise kind, const Var<T>& x) {
  Tensor<T> out = x.value();
  if (kind == Pointwise::relu) {
    for (T& v : out.data()) v = v > T{0} ? v : T{0};
    return x.tape().record("relu", std::move(out), {x}, [x](Tape<T>& tape, const Tensor<T>& go) {
      Tensor<T> g = go;
      const auto in = x.value().data();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (!(in[i] > T{0})) g[i] = T{0};
      tape.accumulate(x, g);
    });
  }
  for (T& v : out.data()) v = stable_sigmoid(v);
  return x.tape().record("sigmoid", std::move(out), {x}, [x](Tape<T>& tape, const Tensor<T>& go) {
    Tensor<T> g = go;
    const auto in = x.value().data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T s = stable_sigmoid(in[i]);
      g[i] *= s * (T{1} - s);
    }
    tape.accumulate(x, g);
  });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  return pointwise(Pointwise::relu, x);
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  return pointwise(Pointwise::sigmoid, x);
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  return x.tape().record("reshape", std::move(out), {x},
                         [x](Tape<T>& tape, const Tensor<T>& go) { tape.accumulate(x, go.data()); });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape()) throw ConfigError("add: shape mismatch");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return a.tape().record("add", std::move(out), {a, b}, [a, b](Tape<T>& tape, const Tensor<T>& go) {
    tape.accumulate(a, go);
    tape.accumulate(b, go);
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape()) throw ConfigError("mul: shape mismatch");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return a.tape().record("mul", std::move(out), {a, b}, [a, b](Tape<T>& tape, const Tensor<T>& go) {
    Tensor<T> ga = go, gb = go;
    for (std::size_t i = 0; i < go.size(); ++i) {
      ga[i] *= b.value()[i];
      gb[i] *= a.value()[i];
    }
    tape.accumulate(a, ga);
    tape.accumulate(b, gb);
  });
}

template <typename T>
Var<T> scale(const Var<T>& x, T s) {
  Tensor<T> out = x.value();
  for (T& v : out.data()) v *= s;
  return x.tape().record("scale", std::move(out), {x}, [x, s](Tape<T>& tape, const Tensor<T>& go) {
    Tensor<T> g = go;
    for (T& v : g.data()) v *= s;
    tape.accumulate(x, g);
  });
}

// Adds a per-channel bias broadcast over every leading axis.
template <typename T>
Var<T> add_bias(const Var<T>& x, const Var<T>& bias) {
  const std::size_t c = bias.size();
  if (x.shape().back() != c) {
    throw ConfigError("add_bias: bias " + shape_str(bias.shape()) + " vs input " + shape_str(x.shape()));
  }
  Tensor<T> out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bias.value()[i % c];
  return x.tape().record("add_bias", std::move(out), {x, bias}, [x, bias, c](Tape<T>& tape, const Tensor<T>& go) {
    tape.accumulate(x, go);
    if (bias.requires_grad()) {
      Tensor<T> gb(bias.shape());
      for (std::size_t i = 0; i < go.size(); ++i) gb[i % c] += go[i];
      tape.accumulate(bias, gb);
    }
  });
}

// Concatenation along the last axis; leading extents must agree.
template <typename T>
Var<T> concat_last(const Var<T>& a, const Var<T>& b) {
  Shape sa = a.shape(), sb = b.shape();
  if (sa.size() != sb.size() || !std::equal(sa.begin(), sa.end() - 1, sb.begin())) {
    throw ConfigError("concat: " + shape_str(sa) + " vs " + shape_str(sb));
  }
  const std::size_t ca = sa.back(), cb = sb.back(), rows = a.size() / ca;
  Shape so = sa;
  so.back() = ca + cb;
  Tensor<T> out(so);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(a.value().raw() + r * ca, ca, out.raw() + r * (ca + cb));
    std::copy_n(b.value().raw() + r * cb, cb, out.raw() + r * (ca + cb) + ca);
  }
  return a.tape().record("concat", std::move(out), {a, b},
                         [a, b, ca, cb, rows](Tape<T>& tape, const Tensor<T>& go) {
                           Tensor<T> ga(a.shape()), gb(b.shape());
                           for (std::size_t r = 0; r < rows; ++r) {
                             std::copy_n(go.raw() + r * (ca + cb), ca, ga.raw() + r * ca);
                             std::copy_n(go.raw() + r * (ca + cb) + ca, cb, gb.raw() + r * cb);
                           }
                           tape.accumulate(a, ga);
                           tape.accumulate(b, gb);
                         });
}

// [m,k] x [k,n] -> [m,n]
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0]) {
    throw ConfigError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  Tensor<T> out(Shape{m, n});
  detail::MapMat<T>(out.raw(), m, n).noalias() =
      detail::CMapMat<T>(a.value().raw(), m, k) * detail::CMapMat<T>(b.value().raw(), k, n);
  return a.tape().record("matmul", std::move(out), {a, b}, [a, b, m, k, n](Tape<T>& tape, const Tensor<T>& go) {
    detail::CMapMat<T> g(go.raw(), m, n);
    if (a.requires_grad()) {
      Tensor<T> ga(a.shape());
      detail::MapMat<T>(ga.raw(), m, k).noalias() = g * detail::CMapMat<T>(b.value().raw(), k, n).transpose();
      tape.accumulate(a, ga);
    }
    if (b.requires_grad()) {
      Tensor<T> gb(b.shape());
      detail::MapMat<T>(gb.raw(), k, n).noalias() = detail::CMapMat<T>(a.value().raw(), m, k).transpose() * g;
      tape.accumulate(b, gb);
    }
  });
}

// Flattens x and applies an affine map: x [..] -> [n_out].
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  Var<T> row = reshape(x, Shape{1, x.size()});
  Var<T> y = matmul(row, weight);
  return add_bias(reshape(y, Shape{weight.shape()[1]}), bias);
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  T acc{0};
  for (T v : x.value().data()) acc += v;
  return x.tape().record("sum", Tensor<T>::scalar(acc), {x}, [x](Tape<T>& tape, const Tensor<T>& go) {
    tape.accumulate(x, Tensor<T>(x.shape(), go[0]));
  });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
  return scale(sum(x), T{1} / static_cast<T>(x.size()));
}

}  // namespace vcaps::ops
