#pragma once

#include <array>
#include <cstddef>
#include <string>

#include <Eigen/Core>

#include "vcaps/tensor.hpp"

namespace vcaps {

using Dims3 = std::array<std::size_t, 3>;

inline std::string dims_str(const Dims3& d) {
  return std::to_string(d[0]) + "x" + std::to_string(d[1]) + "x" + std::to_string(d[2]);
}

// Per-axis zero padding; lo pads before index 0, hi after the last index.
struct Padding3 {
  Dims3 lo{0, 0, 0};
  Dims3 hi{0, 0, 0};

  static Padding3 valid() { return {}; }
  static Padding3 symmetric(Dims3 p) { return {p, p}; }
  friend bool operator==(const Padding3&, const Padding3&) = default;
};

struct ConvGeometry {
  Dims3 kernel{1, 1, 1};
  Dims3 stride{1, 1, 1};
  Padding3 pad{};
};

// TensorFlow-style "same" padding: output extent ceil(in / stride), extra cell on the hi side.
inline Padding3 same_padding(Dims3 in, Dims3 kernel, Dims3 stride) {
  Padding3 p;
  for (int a = 0; a < 3; ++a) {
    const std::size_t out = (in[a] + stride[a] - 1) / stride[a];
    const std::size_t need = (out - 1) * stride[a] + kernel[a];
    const std::size_t total = need > in[a] ? need - in[a] : 0;
    p.lo[a] = total / 2;
    p.hi[a] = total - p.lo[a];
  }
  return p;
}

inline Dims3 conv_output_extent(Dims3 in, const ConvGeometry& g) {
  Dims3 out{};
  for (int a = 0; a < 3; ++a) {
    if (g.stride[a] == 0) throw ConfigError("conv3d: stride must be >= 1");
    const std::size_t padded = in[a] + g.pad.lo[a] + g.pad.hi[a];
    if (g.kernel[a] == 0 || g.kernel[a] > padded) {
      throw ConfigError("conv3d: kernel " + dims_str(g.kernel) + " exceeds padded input " +
                        dims_str({in[0] + g.pad.lo[0] + g.pad.hi[0], in[1] + g.pad.lo[1] + g.pad.hi[1],
                                  in[2] + g.pad.lo[2] + g.pad.hi[2]}));
    }
    out[a] = (padded - g.kernel[a]) / g.stride[a] + 1;
  }
  return out;
}

// Extent produced by the adjoint of conv3d; conv3d maps it back onto `in`.
inline Dims3 transposed_output_extent(Dims3 in, const ConvGeometry& g) {
  Dims3 out{};
  for (int a = 0; a < 3; ++a) {
    if (g.stride[a] == 0) throw ConfigError("conv3d_transposed: stride must be >= 1");
    const long long full = static_cast<long long>((in[a] - 1) * g.stride[a] + g.kernel[a]);
    const long long v = full - static_cast<long long>(g.pad.lo[a] + g.pad.hi[a]);
    if (v <= 0) throw ConfigError("conv3d_transposed: padding consumes the whole output");
    out[a] = static_cast<std::size_t>(v);
  }
  if (conv_output_extent(out, g) != in) {
    throw ConfigError("conv3d_transposed: geometry is not invertible for input " + dims_str(in));
  }
  return out;
}

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

inline Dims3 spatial(const Shape& s) { return {s.at(0), s.at(1), s.at(2)}; }

// Gathers every receptive-field window into one row: [P, kT*kH*kW*C].
template <typename T>
RowMat<T> im2col(const T* in, Dims3 in_ext, std::size_t channels, const ConvGeometry& g, Dims3 out_ext) {
  const std::size_t kvol = g.kernel[0] * g.kernel[1] * g.kernel[2];
  const std::size_t positions = out_ext[0] * out_ext[1] * out_ext[2];
  RowMat<T> cols = RowMat<T>::Zero(positions, kvol * channels);
  std::size_t row = 0;
  for (std::size_t ot = 0; ot < out_ext[0]; ++ot)
    for (std::size_t oh = 0; oh < out_ext[1]; ++oh)
      for (std::size_t ow = 0; ow < out_ext[2]; ++ow, ++row) {
        T* dst = cols.data() + row * kvol * channels;
        for (std::size_t kt = 0; kt < g.kernel[0]; ++kt) {
          const long long it = static_cast<long long>(ot * g.stride[0] + kt) - static_cast<long long>(g.pad.lo[0]);
          for (std::size_t kh = 0; kh < g.kernel[1]; ++kh) {
            const long long ih = static_cast<long long>(oh * g.stride[1] + kh) - static_cast<long long>(g.pad.lo[1]);
            for (std::size_t kw = 0; kw < g.kernel[2]; ++kw, dst += channels) {
              const long long iw =
                  static_cast<long long>(ow * g.stride[2] + kw) - static_cast<long long>(g.pad.lo[2]);
              if (it < 0 || ih < 0 || iw < 0 || it >= static_cast<long long>(in_ext[0]) ||
                  ih >= static_cast<long long>(in_ext[1]) || iw >= static_cast<long long>(in_ext[2]))
                continue;
              const T* src = in + ((static_cast<std::size_t>(it) * in_ext[1] + static_cast<std::size_t>(ih)) * in_ext[2] +
                                   static_cast<std::size_t>(iw)) * channels;
              std::copy(src, src + channels, dst);
            }
          }
        }
      }
  return cols;
}

// Adjoint of im2col: scatter-adds rows back into the [T,H,W,C] volume.
template <typename T>
void col2im(const RowMat<T>& cols, T* out, Dims3 in_ext, std::size_t channels, const ConvGeometry& g, Dims3 out_ext) {
  const std::size_t kvol = g.kernel[0] * g.kernel[1] * g.kernel[2];
  std::size_t row = 0;
  for (std::size_t ot = 0; ot < out_ext[0]; ++ot)
    for (std::size_t oh = 0; oh < out_ext[1]; ++oh)
      for (std::size_t ow = 0; ow < out_ext[2]; ++ow, ++row) {
        const T* src = cols.data() + row * kvol * channels;
        for (std::size_t kt = 0; kt < g.kernel[0]; ++kt) {
          const long long it = static_cast<long long>(ot * g.stride[0] + kt) - static_cast<long long>(g.pad.lo[0]);
          for (std::size_t kh = 0; kh < g.kernel[1]; ++kh) {
            const long long ih = static_cast<long long>(oh * g.stride[1] + kh) - static_cast<long long>(g.pad.lo[1]);
            for (std::size_t kw = 0; kw < g.kernel[2]; ++kw, src += channels) {
              const long long iw =
                  static_cast<long long>(ow * g.stride[2] + kw) - static_cast<long long>(g.pad.lo[2]);
              if (it < 0 || ih < 0 || iw < 0 || it >= static_cast<long long>(in_ext[0]) ||
                  ih >= static_cast<long long>(in_ext[1]) || iw >= static_cast<long long>(in_ext[2]))
                continue;
              T* dst = out + ((static_cast<std::size_t>(it) * in_ext[1] + static_cast<std::size_t>(ih)) * in_ext[2] +
                              static_cast<std::size_t>(iw)) * channels;
              for (std::size_t c = 0; c < channels; ++c) dst[c] += src[c];
            }
          }
        }
      }
}

inline void check_conv_operands(const Shape& x, const Shape& k, const ConvGeometry& g, std::size_t x_channel_axis_of_k,
                                const char* op) {
  if (x.size() != 4) throw ConfigError(std::string(op) + ": input must be [T,H,W,C], got " + shape_str(x));
  if (k.size() != 5) throw ConfigError(std::string(op) + ": kernel must be rank 5, got " + shape_str(k));
  if (k[0] != g.kernel[0] || k[1] != g.kernel[1] || k[2] != g.kernel[2]) {
    throw ConfigError(std::string(op) + ": kernel tensor " + shape_str(k) + " disagrees with geometry " +
                      dims_str(g.kernel));
  }
  if (k[x_channel_axis_of_k] != x[3]) {
    throw ConfigError(std::string(op) + ": channel mismatch between input " + shape_str(x) + " and kernel " +
                      shape_str(k));
  }
}

}  // namespace detail

// input [T,H,W,Cin], kernel [kT,kH,kW,Cin,Cout] -> [T',H',W',Cout]
template <typename T>
Tensor<T> conv3d_forward(const Tensor<T>& input, const Tensor<T>& kernel, const ConvGeometry& g) {
  detail::check_conv_operands(input.shape(), kernel.shape(), g, 3, "conv3d");
  const std::size_t cin = input.extent(3), cout = kernel.extent(4);
  const Dims3 in_ext = detail::spatial(input.shape());
  const Dims3 out_ext = conv_output_extent(in_ext, g);
  const auto cols = detail::im2col(input.raw(), in_ext, cin, g, out_ext);
  Tensor<T> out(Shape{out_ext[0], out_ext[1], out_ext[2], cout});
  detail::MapMat<T> o(out.raw(), cols.rows(), cout);
  detail::CMapMat<T> k(kernel.raw(), cols.cols(), cout);
  o.noalias() = cols * k;
  return out;
}

// Gradient of conv3d with respect to its input; also the forward of conv3d_transposed.
template <typename T>
Tensor<T> conv3d_input_grad(const Tensor<T>& grad_out, const Tensor<T>& kernel, const ConvGeometry& g, Dims3 in_ext) {
  const std::size_t cin = kernel.extent(3), cout = kernel.extent(4);
  if (grad_out.rank() != 4 || grad_out.extent(3) != cout) {
    throw ConfigError("conv3d_transposed: input " + shape_str(grad_out.shape()) + " does not match kernel " +
                      shape_str(kernel.shape()));
  }
  const Dims3 out_ext = detail::spatial(grad_out.shape());
  const std::size_t positions = out_ext[0] * out_ext[1] * out_ext[2];
  const std::size_t kc = kernel.size() / cout;
  detail::CMapMat<T> go(grad_out.raw(), positions, cout);
  detail::CMapMat<T> k(kernel.raw(), kc, cout);
  detail::RowMat<T> gcols = go * k.transpose();
  Tensor<T> gin(Shape{in_ext[0], in_ext[1], in_ext[2], cin});
  detail::col2im(gcols, gin.raw(), in_ext, cin, g, out_ext);
  return gin;
}

// Gradient of conv3d with respect to its kernel.
template <typename T>
Tensor<T> conv3d_kernel_grad(const Tensor<T>& input, const Tensor<T>& grad_out, const ConvGeometry& g,
                             const Shape& kernel_shape) {
  const std::size_t cin = input.extent(3), cout = grad_out.extent(3);
  const Dims3 in_ext = detail::spatial(input.shape());
  const Dims3 out_ext = detail::spatial(grad_out.shape());
  const auto cols = detail::im2col(input.raw(), in_ext, cin, g, out_ext);
  detail::CMapMat<T> go(grad_out.raw(), cols.rows(), cout);
  Tensor<T> gk(kernel_shape);
  detail::MapMat<T> k(gk.raw(), cols.cols(), cout);
  k.noalias() = cols.transpose() * go;
  return gk;
}

// Adjoint of conv3d: input [T',H',W',Cout], kernel [kT,kH,kW,Cin,Cout] -> [T,H,W,Cin].
template <typename T>
Tensor<T> conv3d_transposed_forward(const Tensor<T>& input, const Tensor<T>& kernel, const ConvGeometry& g) {
  detail::check_conv_operands(input.shape(), kernel.shape(), g, 4, "conv3d_transposed");
  const Dims3 out_ext = transposed_output_extent(detail::spatial(input.shape()), g);
  return conv3d_input_grad(input, kernel, g, out_ext);
}

}  // namespace vcaps
