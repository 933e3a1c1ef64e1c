#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "vcaps/ops.hpp"

namespace vcaps {

inline constexpr std::size_t kPoseDim = 16;  // flattened 4x4 pose

// Spatio-temporal grid of matrix capsules.
//   pose       [T,H,W,C,4,4]
//   activation [T,H,W,C], values in [0,1]
template <typename T>
struct CapsuleGrid {
  Var<T> pose;
  Var<T> activation;

  Dims3 extents() const { return {activation.shape()[0], activation.shape()[1], activation.shape()[2]}; }
  std::size_t types() const { return activation.shape()[3]; }
};

// One 4x4 transform per (input type, output type) pair, shared over positions:
// weights [C_in, C_out, 4, 4].
template <typename T>
struct TransformBank {
  Tensor<T> weights;

  std::size_t inputs() const { return weights.extent(0); }
  std::size_t outputs() const { return weights.extent(1); }

  // Identity plus elementwise Gaussian noise.
  template <typename Rng>
  static TransformBank identity_with_noise(std::size_t c_in, std::size_t c_out, double noise_std, Rng& rng) {
    std::normal_distribution<double> noise(0.0, noise_std);
    Tensor<T> w(Shape{c_in, c_out, 4, 4});
    for (std::size_t i = 0; i < w.size(); ++i) {
      const std::size_t r = (i / 4) % 4, c = i % 4;
      w[i] = static_cast<T>((r == c ? 1.0 : 0.0) + noise(rng));
    }
    return {std::move(w)};
  }
};

enum class RoutingCost {
  standardized,  // cost z-scored across output capsules before the logistic
  literal,       // activation = sigmoid(lambda * (beta_a - cost))
};

struct RoutingConfig {
  int iterations = 3;
  double inv_temp_start = 1.0;
  double inv_temp_end = 1.0;
  double variance_floor = 1e-6;
  RoutingCost cost = RoutingCost::standardized;

  void validate() const {
    if (iterations < 1) throw ConfigError("routing: iterations must be >= 1");
    if (!(variance_floor > 0.0)) throw ConfigError("routing: variance_floor must be > 0");
    if (!(inv_temp_start > 0.0) || !(inv_temp_end > 0.0)) throw ConfigError("routing: inverse temperatures must be > 0");
  }

  // Linear schedule; the last iteration always uses inv_temp_end.
  double inv_temp(int iteration) const {
    if (iterations == 1) return inv_temp_end;
    return inv_temp_start + (inv_temp_end - inv_temp_start) * iteration / (iterations - 1);
  }
};

// Instrumented count of 4x4 vote products.
struct VoteCounter {
  std::uint64_t vote_products = 0;
  std::uint64_t output_positions = 0;

  std::uint64_t per_position() const { return output_positions ? vote_products / output_positions : 0; }
};

template <typename T>
struct RoutedCapsules {
  Var<T> pose;        // [P, C_out, 16]
  Var<T> activation;  // [P, C_out]
};

namespace caps_detail {

inline void matmul4(const auto* a, const auto* b, auto* out) {
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) {
      auto acc = a[r * 4] * b[c];
      for (int k = 1; k < 4; ++k) acc += a[r * 4 + k] * b[k * 4 + c];
      out[r * 4 + c] = acc;
    }
}

// out += a^T b
inline void matmul4_at_b_add(const auto* a, const auto* b, auto* out) {
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) {
      auto acc = out[r * 4 + c];
      for (int k = 0; k < 4; ++k) acc += a[k * 4 + r] * b[k * 4 + c];
      out[r * 4 + c] = acc;
    }
}

// out += a b^T
inline void matmul4_a_bt_add(const auto* a, const auto* b, auto* out) {
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) {
      auto acc = out[r * 4 + c];
      for (int k = 0; k < 4; ++k) acc += a[r * 4 + k] * b[c * 4 + k];
      out[r * 4 + c] = acc;
    }
}

struct WindowPlan {
  Dims3 in_ext;
  Dims3 out_ext;
  Dims3 rf;
  Dims3 stride;

  std::size_t positions() const { return out_ext[0] * out_ext[1] * out_ext[2]; }
  std::size_t volume() const { return rf[0] * rf[1] * rf[2]; }

  // Flat grid cell index of window element k at output position p.
  std::size_t cell(std::size_t p, std::size_t k) const {
    const std::size_t ow = p % out_ext[2], oh = (p / out_ext[2]) % out_ext[1], ot = p / (out_ext[1] * out_ext[2]);
    const std::size_t kw = k % rf[2], kh = (k / rf[2]) % rf[1], kt = k / (rf[1] * rf[2]);
    const std::size_t t = ot * stride[0] + kt, h = oh * stride[1] + kh, w = ow * stride[2] + kw;
    return (t * in_ext[1] + h) * in_ext[2] + w;
  }
};

inline WindowPlan plan_windows(Dims3 in_ext, Dims3 rf, Dims3 stride) {
  ConvGeometry g{rf, stride, Padding3::valid()};
  return {in_ext, conv_output_extent(in_ext, g), rf, stride};
}

}  // namespace caps_detail

// Primary capsules from a feature volume. Valid padding.
//   pose = relu(conv(features) + b) reshaped to [.,.,.,C,4,4]  (relu optional)
//   activation = sigmoid(conv(features) + b)
template <typename T>
CapsuleGrid<T> primary_capsules(const Var<T>& features, const Var<T>& pose_kernel, const Var<T>& pose_bias,
                                const Var<T>& act_kernel, const Var<T>& act_bias, bool pose_relu = true) {
  const Shape& ks = pose_kernel.shape();
  const ConvGeometry g{{ks.at(0), ks.at(1), ks.at(2)}, {1, 1, 1}, Padding3::valid()};
  const std::size_t types = act_kernel.shape().at(4);
  if (ks.at(4) != types * kPoseDim) {
    throw ConfigError("primary_capsules: pose kernel must produce 16 channels per capsule type");
  }
  Var<T> pose = ops::add_bias(ops::conv3d(features, pose_kernel, g), pose_bias);
  if (pose_relu) pose = ops::relu(pose);
  Var<T> act = ops::sigmoid(ops::add_bias(ops::conv3d(features, act_kernel, g), act_bias));
  const Shape& s = act.shape();
  return {ops::reshape(pose, Shape{s[0], s[1], s[2], types, 4, 4}), act};
}

// Mean pose and activation per capsule type over each receptive field.
// Returns pose [P, C, 16] and activation [P, C].
template <typename T>
RoutedCapsules<T> capsule_pool(const CapsuleGrid<T>& grid, Dims3 rf, Dims3 stride) {
  const auto plan = caps_detail::plan_windows(grid.extents(), rf, stride);
  const std::size_t C = grid.types(), P = plan.positions(), K = plan.volume();
  const T inv = T{1} / static_cast<T>(K);
  const auto& pose = grid.pose.value();
  const auto& act = grid.activation.value();
  Tensor<T> out_pose(Shape{P, C, kPoseDim}), out_act(Shape{P, C});
  for (std::size_t p = 0; p < P; ++p)
    for (std::size_t k = 0; k < K; ++k) {
      const std::size_t cell = plan.cell(p, k);
      for (std::size_t c = 0; c < C; ++c) {
        out_act[p * C + c] += act[cell * C + c];
        const T* src = pose.raw() + (cell * C + c) * kPoseDim;
        T* dst = out_pose.raw() + (p * C + c) * kPoseDim;
        for (std::size_t h = 0; h < kPoseDim; ++h) dst[h] += src[h];
      }
    }
  for (T& v : out_pose.data()) v /= static_cast<T>(K);
  for (T& v : out_act.data()) v /= static_cast<T>(K);

  auto scatter = [plan, C, P, K, inv](std::size_t width) {
    return [plan, C, P, K, inv, width](const Tensor<T>& go, std::span<T> gin) {
      for (std::size_t p = 0; p < P; ++p)
        for (std::size_t k = 0; k < K; ++k) {
          const std::size_t cell = plan.cell(p, k);
          for (std::size_t i = 0; i < C * width; ++i) gin[cell * C * width + i] += go[p * C * width + i] * inv;
        }
    };
  };
  Tape<T>& tape = grid.pose.tape();
  Var<T> gp = grid.pose, ga = grid.activation;
  Var<T> vp = tape.record("capsule_pool.pose", std::move(out_pose), {gp},
                          [gp, f = scatter(kPoseDim)](Tape<T>& t, const Tensor<T>& go) { f(go, t.grad_buffer(gp)); });
  Var<T> va = tape.record("capsule_pool.activation", std::move(out_act), {ga},
                          [ga, f = scatter(1)](Tape<T>& t, const Tensor<T>& go) { f(go, t.grad_buffer(ga)); });
  return {vp, va};
}

// Every capsule of every receptive field, without pooling: pose [P, K*C, 16],
// activation [P, K*C], input index n = k*C + c. Reference path for capsule-pooling.
template <typename T>
RoutedCapsules<T> gather_windows(const CapsuleGrid<T>& grid, Dims3 rf, Dims3 stride) {
  const auto plan = caps_detail::plan_windows(grid.extents(), rf, stride);
  const std::size_t C = grid.types(), P = plan.positions(), K = plan.volume();
  const auto& pose = grid.pose.value();
  const auto& act = grid.activation.value();
  Tensor<T> out_pose(Shape{P, K * C, kPoseDim}), out_act(Shape{P, K * C});
  for (std::size_t p = 0; p < P; ++p)
    for (std::size_t k = 0; k < K; ++k) {
      const std::size_t cell = plan.cell(p, k);
      std::copy_n(act.raw() + cell * C, C, out_act.raw() + (p * K + k) * C);
      std::copy_n(pose.raw() + cell * C * kPoseDim, C * kPoseDim, out_pose.raw() + (p * K + k) * C * kPoseDim);
    }
  auto scatter = [plan, C, P, K](std::size_t width) {
    return [plan, C, P, K, width](const Tensor<T>& go, std::span<T> gin) {
      for (std::size_t p = 0; p < P; ++p)
        for (std::size_t k = 0; k < K; ++k) {
          const std::size_t cell = plan.cell(p, k);
          for (std::size_t i = 0; i < C * width; ++i) gin[cell * C * width + i] += go[((p * K + k) * C) * width + i];
        }
    };
  };
  Tape<T>& tape = grid.pose.tape();
  Var<T> gp = grid.pose, ga = grid.activation;
  Var<T> vp = tape.record("gather_windows.pose", std::move(out_pose), {gp},
                          [gp, f = scatter(kPoseDim)](Tape<T>& t, const Tensor<T>& go) { f(go, t.grad_buffer(gp)); });
  Var<T> va = tape.record("gather_windows.activation", std::move(out_act), {ga},
                          [ga, f = scatter(1)](Tape<T>& t, const Tensor<T>& go) { f(go, t.grad_buffer(ga)); });
  return {vp, va};
}

// V = M W. poses [P, N, 16], bank [C_types, C_out, 4, 4]; input n uses the
// transform row of type n % C_types. Returns votes [P, N, C_out, 16].
template <typename T>
Var<T> cast_votes(const Var<T>& poses, const Var<T>& bank, VoteCounter* counter = nullptr) {
  const Shape& ps = poses.shape();
  const Shape& bs = bank.shape();
  if (ps.size() != 3 || ps[2] != kPoseDim) throw ConfigError("cast_votes: poses must be [P,N,16]");
  if (bs.size() != 4 || bs[2] != 4 || bs[3] != 4) throw ConfigError("cast_votes: bank must be [C_in,C_out,4,4]");
  const std::size_t P = ps[0], N = ps[1], Ct = bs[0], J = bs[1];
  if (N % Ct != 0) {
    throw ConfigError("cast_votes: " + std::to_string(N) + " inputs do not tile " + std::to_string(Ct) + " capsule types");
  }
  Tensor<T> votes(Shape{P, N, J, kPoseDim});
  const T* m = poses.value().raw();
  const T* w = bank.value().raw();
  for (std::size_t p = 0; p < P; ++p)
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t j = 0; j < J; ++j)
        caps_detail::matmul4(m + (p * N + n) * kPoseDim, w + ((n % Ct) * J + j) * kPoseDim,
                             votes.raw() + ((p * N + n) * J + j) * kPoseDim);
  if (counter) counter->vote_products += P * N * J;
  return poses.tape().record("cast_votes", std::move(votes), {poses, bank},
                             [poses, bank, P, N, J, Ct](Tape<T>& tape, const Tensor<T>& go) {
                               const T* m = poses.value().raw();
                               const T* w = bank.value().raw();
                               if (poses.requires_grad()) {
                                 Tensor<T> gm(poses.shape());
                                 for (std::size_t p = 0; p < P; ++p)
                                   for (std::size_t n = 0; n < N; ++n)
                                     for (std::size_t j = 0; j < J; ++j)
                                       caps_detail::matmul4_a_bt_add(go.raw() + ((p * N + n) * J + j) * kPoseDim,
                                                                     w + ((n % Ct) * J + j) * kPoseDim,
                                                                     gm.raw() + (p * N + n) * kPoseDim);
                                 tape.accumulate(poses, gm);
                               }
                               if (bank.requires_grad()) {
                                 Tensor<T> gw(bank.shape());
                                 for (std::size_t p = 0; p < P; ++p)
                                   for (std::size_t n = 0; n < N; ++n)
                                     for (std::size_t j = 0; j < J; ++j)
                                       caps_detail::matmul4_at_b_add(m + (p * N + n) * kPoseDim,
                                                                     go.raw() + ((p * N + n) * J + j) * kPoseDim,
                                                                     gw.raw() + ((n % Ct) * J + j) * kPoseDim);
                                 tape.accumulate(bank, gw);
                               }
                             });
}

// Normalized grid coordinates ((t+0.5)/T, (r+0.5)/H, (c+0.5)/W) of the cell
// that input n = cell*C + c occupies.
inline std::array<double, 3> capsule_coordinates(std::size_t n, std::size_t types, Dims3 extents) {
  const std::size_t cell = n / types;
  const std::size_t col = cell % extents[2], row = (cell / extents[2]) % extents[1], t = cell / (extents[1] * extents[2]);
  return {(t + 0.5) / extents[0], (row + 0.5) / extents[1], (col + 0.5) / extents[2]};
}

// Adds the voting capsule's coordinates to flat vote entries 13 (time), 14 (row), 15 (column).
// votes [P, N, J, 16] with N = T*H*W*C in grid order.
template <typename T>
Var<T> coordinate_addition(const Var<T>& votes, Dims3 extents, std::size_t types) {
  const Shape& s = votes.shape();
  if (s.size() != 4 || s[3] != kPoseDim) throw ConfigError("coordinate_addition: votes must be [P,N,J,16]");
  if (s[1] != extents[0] * extents[1] * extents[2] * types) {
    throw ConfigError("coordinate_addition: vote count does not match grid extents");
  }
  const std::size_t P = s[0], N = s[1], J = s[2];
  Tensor<T> out = votes.value();
  for (std::size_t p = 0; p < P; ++p)
    for (std::size_t n = 0; n < N; ++n) {
      const auto xyz = capsule_coordinates(n, types, extents);
      for (std::size_t j = 0; j < J; ++j) {
        T* v = out.raw() + ((p * N + n) * J + j) * kPoseDim;
        v[13] += static_cast<T>(xyz[0]);
        v[14] += static_cast<T>(xyz[1]);
        v[15] += static_cast<T>(xyz[2]);
      }
    }
  return votes.tape().record("coordinate_addition", std::move(out), {votes},
                             [votes](Tape<T>& tape, const Tensor<T>& go) { tape.accumulate(votes, go); });
}

namespace caps_detail {

// Saved forward state of one EM-routing position, per iteration.
template <typename T>
struct EmTrace {
  std::vector<T> R;      // [K][N*J] assignment weights entering each M-step
  std::vector<T> S;      // [K][J]
  std::vector<T> mu;     // [K][J*16]
  std::vector<T> var;    // [K][J*16]
  std::vector<T> A;      // [K][J] per-capsule log-std sum
  std::vector<T> dev;    // [K][J] cost - mean cost (standardized)
  std::vector<T> sd;     // [K]
  std::vector<T> act;    // [K][J]
};

template <typename T>
struct EmSaved {
  std::size_t P, N, J;
  RoutingConfig cfg;
  std::vector<EmTrace<T>> traces;
};

// Denominator for normalizing assignment mass. Every r is <= S, so only an
// output with exactly zero mass needs a guard (its weights are then all zero).
template <typename T>
T mass_denom(T s) {
  return s > T{0} ? s : T{1};
}
inline constexpr double kCostEps = 1e-9;

template <typename T>
void em_forward_position(const T* V, const T* a_in, const T* beta_u, const T* beta_a, std::size_t N, std::size_t J,
                         const RoutingConfig& cfg, EmTrace<T>& tr, T* out_pose, T* out_act) {
  constexpr std::size_t H = kPoseDim;
  const int K = cfg.iterations;
  const T floor = static_cast<T>(cfg.variance_floor);
  tr.R.assign(K * N * J, T{0});
  tr.S.assign(K * J, T{0});
  tr.mu.assign(K * J * H, T{0});
  tr.var.assign(K * J * H, T{0});
  tr.A.assign(K * J, T{0});
  tr.dev.assign(K * J, T{0});
  tr.sd.assign(K, T{0});
  tr.act.assign(K * J, T{0});
  std::fill(tr.R.begin(), tr.R.begin() + N * J, T{1} / static_cast<T>(J));
  std::vector<T> logit(J), lrow(J);

  for (int it = 0; it < K; ++it) {
    const T lam = static_cast<T>(cfg.inv_temp(it));
    const T* R = tr.R.data() + it * N * J;
    T* S = tr.S.data() + it * J;
    T* mu = tr.mu.data() + it * J * H;
    T* var = tr.var.data() + it * J * H;
    T* A = tr.A.data() + it * J;
    T* act = tr.act.data() + it * J;

    // M-step
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t j = 0; j < J; ++j) S[j] += R[n * J + j] * a_in[n];
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t j = 0; j < J; ++j) {
        const T w = R[n * J + j] * a_in[n] / mass_denom(S[j]);
        const T* v = V + (n * J + j) * H;
        for (std::size_t h = 0; h < H; ++h) mu[j * H + h] += w * v[h];
      }
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t j = 0; j < J; ++j) {
        const T w = R[n * J + j] * a_in[n] / mass_denom(S[j]);
        const T* v = V + (n * J + j) * H;
        for (std::size_t h = 0; h < H; ++h) {
          const T e = v[h] - mu[j * H + h];
          var[j * H + h] += w * e * e;
        }
      }
    for (std::size_t j = 0; j < J; ++j) {
      T lsum{0};
      for (std::size_t h = 0; h < H; ++h) {
        var[j * H + h] += floor;
        lsum += std::log(var[j * H + h]);
      }
      A[j] = static_cast<T>(H) * beta_u[j] + T{0.5} * lsum;
    }
    if (cfg.cost == RoutingCost::standardized) {
      T mean{0};
      for (std::size_t j = 0; j < J; ++j) mean += A[j] * S[j];
      mean /= static_cast<T>(J);
      T msq{0};
      for (std::size_t j = 0; j < J; ++j) {
        tr.dev[it * J + j] = A[j] * S[j] - mean;
        msq += tr.dev[it * J + j] * tr.dev[it * J + j];
      }
      tr.sd[it] = std::sqrt(msq / static_cast<T>(J) + static_cast<T>(kCostEps));
      for (std::size_t j = 0; j < J; ++j) logit[j] = lam * (beta_a[j] - tr.dev[it * J + j] / tr.sd[it]);
    } else {
      for (std::size_t j = 0; j < J; ++j) logit[j] = lam * (beta_a[j] - A[j] * S[j]);
    }
    for (std::size_t j = 0; j < J; ++j) act[j] = ops::stable_sigmoid(logit[j]);

    if (it + 1 == K) break;
    // E-step
    T* Rn = tr.R.data() + (it + 1) * N * J;
    const T log2pi = static_cast<T>(std::log(2.0 * std::numbers::pi));
    for (std::size_t n = 0; n < N; ++n) {
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < J; ++j) {
        const T* v = V + (n * J + j) * H;
        T lp{0};
        for (std::size_t h = 0; h < H; ++h) {
          const T e = v[h] - mu[j * H + h];
          lp -= e * e / (T{2} * var[j * H + h]) + T{0.5} * (std::log(var[j * H + h]) + log2pi);
        }
        lrow[j] = lp - ops::softplus(-logit[j]);
        mx = std::max(mx, lrow[j]);
      }
      T z{0};
      for (std::size_t j = 0; j < J; ++j) {
        lrow[j] = std::exp(lrow[j] - mx);
        z += lrow[j];
      }
      for (std::size_t j = 0; j < J; ++j) Rn[n * J + j] = lrow[j] / z;
    }
  }
  std::copy_n(tr.mu.data() + (K - 1) * J * H, J * H, out_pose);
  std::copy_n(tr.act.data() + (K - 1) * J, J, out_act);
}

// Reverse sweep through the unrolled iterations of one position.
template <typename T>
void em_backward_position(const T* V, const T* a_in, const T* beta_u, const EmTrace<T>& tr, std::size_t N,
                          std::size_t J, const RoutingConfig& cfg, const T* g_pose, const T* g_act, T* gV, T* ga_in,
                          T* g_beta_u, T* g_beta_a) {
  (void)beta_u;
  constexpr std::size_t H = kPoseDim;
  const int K = cfg.iterations;
  std::vector<T> gmu(g_pose, g_pose + J * H), gvar(J * H, T{0}), glogit(J), gR(N * J), gw(N * J), gS(J), gcost(J);
  {
    const T* act = tr.act.data() + (K - 1) * J;
    for (std::size_t j = 0; j < J; ++j) glogit[j] = g_act[j] * act[j] * (T{1} - act[j]);
  }
  for (int it = K - 1; it >= 0; --it) {
    const T lam = static_cast<T>(cfg.inv_temp(it));
    const T* R = tr.R.data() + it * N * J;
    const T* S = tr.S.data() + it * J;
    const T* mu = tr.mu.data() + it * J * H;
    const T* var = tr.var.data() + it * J * H;
    const T* A = tr.A.data() + it * J;

    // activation logit -> cost
    for (std::size_t j = 0; j < J; ++j) g_beta_a[j] += lam * glogit[j];
    if (cfg.cost == RoutingCost::standardized) {
      const T* d = tr.dev.data() + it * J;
      const T sd = tr.sd[it];
      T dot{0};
      for (std::size_t j = 0; j < J; ++j) dot += -lam * glogit[j] * d[j];
      T mean{0};
      for (std::size_t j = 0; j < J; ++j) {
        const T gz = lam * glogit[j];
        gcost[j] = -gz / sd - d[j] * dot / (static_cast<T>(J) * sd * sd * sd);
        mean += gcost[j];
      }
      mean /= static_cast<T>(J);
      for (std::size_t j = 0; j < J; ++j) gcost[j] -= mean;
    } else {
      for (std::size_t j = 0; j < J; ++j) gcost[j] = -lam * glogit[j];
    }
    // cost = A * S, A = H*beta_u + 0.5 * sum log var
    for (std::size_t j = 0; j < J; ++j) {
      const T gA = gcost[j] * S[j];
      gS[j] = gcost[j] * A[j];
      g_beta_u[j] += static_cast<T>(H) * gA;
      for (std::size_t h = 0; h < H; ++h) gvar[j * H + h] += gA * T{0.5} / var[j * H + h];
    }
    // var = sum_n w (V - mu)^2 + floor;  mu = sum_n w V
    std::fill(gw.begin(), gw.end(), T{0});
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t j = 0; j < J; ++j) {
        const T w = R[n * J + j] * a_in[n] / mass_denom(S[j]);
        const T* v = V + (n * J + j) * H;
        T* gv = gV + (n * J + j) * H;
        T acc{0};
        for (std::size_t h = 0; h < H; ++h) {
          const T e = v[h] - mu[j * H + h];
          acc += gvar[j * H + h] * e * e;
          gv[h] += gvar[j * H + h] * T{2} * w * e;
        }
        gw[n * J + j] += acc;
      }
    for (std::size_t j = 0; j < J; ++j)
      for (std::size_t h = 0; h < H; ++h) {
        T se{0};
        for (std::size_t n = 0; n < N; ++n) {
          const T w = R[n * J + j] * a_in[n] / mass_denom(S[j]);
          se += w * (V[(n * J + j) * H + h] - mu[j * H + h]);
        }
        gmu[j * H + h] -= T{2} * gvar[j * H + h] * se;
      }
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t j = 0; j < J; ++j) {
        const T w = R[n * J + j] * a_in[n] / mass_denom(S[j]);
        const T* v = V + (n * J + j) * H;
        T* gv = gV + (n * J + j) * H;
        T acc{0};
        for (std::size_t h = 0; h < H; ++h) {
          acc += gmu[j * H + h] * v[h];
          gv[h] += gmu[j * H + h] * w;
        }
        gw[n * J + j] += acc;
      }
    // w = r / (S + tiny), S = sum_n r, r = R a
    for (std::size_t j = 0; j < J; ++j) {
      if (!(S[j] > T{0})) continue;
      T acc{0};
      for (std::size_t n = 0; n < N; ++n) acc += gw[n * J + j] * R[n * J + j] * a_in[n];
      gS[j] -= acc / (S[j] * S[j]);
    }
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t j = 0; j < J; ++j) {
        const T D = mass_denom(S[j]);
        const T gr = gw[n * J + j] / D + gS[j];
        ga_in[n] += gr * R[n * J + j];
        gR[n * J + j] = gr * a_in[n];
      }
    if (it == 0) break;

    // E-step that produced R from iteration it-1.
    const T* mu_p = tr.mu.data() + (it - 1) * J * H;
    const T* var_p = tr.var.data() + (it - 1) * J * H;
    const T* act_p = tr.act.data() + (it - 1) * J;
    std::fill(gmu.begin(), gmu.end(), T{0});
    std::fill(gvar.begin(), gvar.end(), T{0});
    std::fill(glogit.begin(), glogit.end(), T{0});
    for (std::size_t n = 0; n < N; ++n) {
      T dotr{0};
      for (std::size_t j = 0; j < J; ++j) dotr += gR[n * J + j] * R[n * J + j];
      for (std::size_t j = 0; j < J; ++j) {
        const T gL = R[n * J + j] * (gR[n * J + j] - dotr);
        glogit[j] += (T{1} - act_p[j]) * gL;
        const T* v = V + (n * J + j) * H;
        T* gv = gV + (n * J + j) * H;
        for (std::size_t h = 0; h < H; ++h) {
          const T vv = var_p[j * H + h];
          const T e = v[h] - mu_p[j * H + h];
          gv[h] -= gL * e / vv;
          gmu[j * H + h] += gL * e / vv;
          gvar[j * H + h] += gL * (e * e / (T{2} * vv * vv) - T{1} / (T{2} * vv));
        }
      }
    }
  }
}

}  // namespace caps_detail

// EM routing of votes [P, N, J, 16] weighted by input activations [P, N].
// beta_u and beta_a are per-output-type [J]. Differentiates through the
// unrolled iterations.
template <typename T>
RoutedCapsules<T> em_routing(const Var<T>& votes, const Var<T>& activations, const Var<T>& beta_u,
                             const Var<T>& beta_a, const RoutingConfig& cfg) {
  cfg.validate();
  const Shape& s = votes.shape();
  if (s.size() != 4 || s[3] != kPoseDim) throw ConfigError("em_routing: votes must be [P,N,J,16]");
  const std::size_t P = s[0], N = s[1], J = s[2];
  if (activations.shape() != Shape{P, N}) throw ConfigError("em_routing: activations must be [P,N]");
  if (beta_u.size() != J || beta_a.size() != J) throw ConfigError("em_routing: beta must have one entry per output type");

  auto saved = std::make_shared<caps_detail::EmSaved<T>>();
  saved->P = P;
  saved->N = N;
  saved->J = J;
  saved->cfg = cfg;
  saved->traces.resize(P);
  Tensor<T> pose(Shape{P, J, kPoseDim}), act(Shape{P, J});
  for (std::size_t p = 0; p < P; ++p) {
    caps_detail::em_forward_position(votes.value().raw() + p * N * J * kPoseDim, activations.value().raw() + p * N,
                                     beta_u.value().raw(), beta_a.value().raw(), N, J, cfg, saved->traces[p],
                                     pose.raw() + p * J * kPoseDim, act.raw() + p * J);
  }

  // Both outputs share one adjoint. The pose node (lower id) carries it; the
  // activation node (higher id, so visited first in the reverse sweep) parks its
  // gradient in a shared buffer and makes sure the pose node is visited.
  Tape<T>& tape = votes.tape();
  auto act_grad = std::make_shared<Tensor<T>>(Tensor<T>::zeros(Shape{P, J}));
  Var<T> pose_var = tape.record(
      "em_routing", std::move(pose), {votes, activations, beta_u, beta_a},
      [votes, activations, beta_u, beta_a, saved, act_grad](Tape<T>& tape, const Tensor<T>& go) {
        const std::size_t P = saved->P, N = saved->N, J = saved->J;
        Tensor<T> gV(votes.shape()), ga(activations.shape()), gbu(beta_u.shape()), gba(beta_a.shape());
        for (std::size_t p = 0; p < P; ++p) {
          caps_detail::em_backward_position(votes.value().raw() + p * N * J * kPoseDim,
                                            activations.value().raw() + p * N, beta_u.value().raw(),
                                            saved->traces[p], N, J, saved->cfg, go.raw() + p * J * kPoseDim,
                                            act_grad->raw() + p * J, gV.raw() + p * N * J * kPoseDim,
                                            ga.raw() + p * N, gbu.raw(), gba.raw());
        }
        tape.accumulate(votes, gV);
        tape.accumulate(activations, ga);
        tape.accumulate(beta_u, gbu);
        tape.accumulate(beta_a, gba);
      });
  Var<T> act_var = tape.record("em_routing.activation", std::move(act), {pose_var},
                               [pose_var, act_grad](Tape<T>& tape, const Tensor<T>& go) {
                                 for (std::size_t i = 0; i < go.size(); ++i) (*act_grad)[i] += go[i];
                                 tape.grad_buffer(pose_var);
                               });
  return {pose_var, act_var};
}

// Learned parameters of one routed capsule layer.
template <typename T>
struct RoutingParams {
  Var<T> transforms;  // [C_in, C_out, 4, 4]
  Var<T> beta_u;      // [C_out]
  Var<T> beta_a;      // [C_out]
};

namespace caps_detail {

template <typename T>
CapsuleGrid<T> to_grid(const RoutedCapsules<T>& r, Dims3 ext) {
  const std::size_t J = r.activation.shape()[1];
  return {ops::reshape(r.pose, Shape{ext[0], ext[1], ext[2], J, 4, 4}),
          ops::reshape(r.activation, Shape{ext[0], ext[1], ext[2], J})};
}

}  // namespace caps_detail

// Convolutional capsule layer with capsule-pooling: each output position pools its
// receptive field per type, casts C_in x C_out votes and routes them.
template <typename T>
CapsuleGrid<T> conv_capsule_layer(const CapsuleGrid<T>& grid, Dims3 rf, Dims3 stride, const RoutingParams<T>& params,
                                  const RoutingConfig& cfg, VoteCounter* counter = nullptr) {
  if (params.transforms.shape().at(0) != grid.types()) {
    throw ConfigError("conv_capsule_layer: transform bank expects " + std::to_string(params.transforms.shape()[0]) +
                      " input types, grid has " + std::to_string(grid.types()));
  }
  const auto plan = caps_detail::plan_windows(grid.extents(), rf, stride);
  RoutedCapsules<T> pooled = capsule_pool(grid, rf, stride);
  Var<T> votes = cast_votes(pooled.pose, params.transforms, counter);
  if (counter) counter->output_positions += plan.positions();
  RoutedCapsules<T> routed = em_routing(votes, pooled.activation, params.beta_u, params.beta_a, cfg);
  return caps_detail::to_grid(routed, plan.out_ext);
}

// Reference layer without pooling: every capsule of the receptive field votes
// (C_in x C_out x K_T x K_X x K_Y products per position) and all votes are routed.
template <typename T>
CapsuleGrid<T> naive_conv_capsule_layer(const CapsuleGrid<T>& grid, Dims3 rf, Dims3 stride,
                                        const RoutingParams<T>& params, const RoutingConfig& cfg,
                                        VoteCounter* counter = nullptr) {
  const auto plan = caps_detail::plan_windows(grid.extents(), rf, stride);
  RoutedCapsules<T> all = gather_windows(grid, rf, stride);
  Var<T> votes = cast_votes(all.pose, params.transforms, counter);
  if (counter) counter->output_positions += plan.positions();
  RoutedCapsules<T> routed = em_routing(votes, all.activation, params.beta_u, params.beta_a, cfg);
  return caps_detail::to_grid(routed, plan.out_ext);
}

template <typename T>
struct ClassCapsules {
  Var<T> pose;        // [N_class, 4, 4]
  Var<T> activation;  // [N_class]

  std::size_t classes() const { return activation.size(); }

  std::size_t predicted() const {
    const auto a = activation.value().data();
    return static_cast<std::size_t>(std::max_element(a.begin(), a.end()) - a.begin());
  }
};

// Fully connected routing from every grid capsule to one capsule per class.
// Transforms are shared per input type; coordinates are added to the votes.
template <typename T>
ClassCapsules<T> class_capsules(const CapsuleGrid<T>& grid, const RoutingParams<T>& params, const RoutingConfig& cfg,
                                bool coordinate_add = true, VoteCounter* counter = nullptr) {
  const Dims3 ext = grid.extents();
  const std::size_t C = grid.types();
  const std::size_t N = ext[0] * ext[1] * ext[2] * C;
  Var<T> poses = ops::reshape(grid.pose, Shape{1, N, kPoseDim});
  Var<T> acts = ops::reshape(grid.activation, Shape{1, N});
  Var<T> votes = cast_votes(poses, params.transforms, counter);
  if (counter) counter->output_positions += 1;
  if (coordinate_add) votes = coordinate_addition(votes, ext, C);
  RoutedCapsules<T> routed = em_routing(votes, acts, params.beta_u, params.beta_a, cfg);
  const std::size_t J = routed.activation.shape()[1];
  return {ops::reshape(routed.pose, Shape{J, 4, 4}), ops::reshape(routed.activation, Shape{J})};
}

// Zeroes every class pose except the target (training) or the most active class
// (inference). Returns the flattened [N_class * 16] vector.
template <typename T>
Var<T> mask_poses(const ClassCapsules<T>& caps, std::optional<std::size_t> target) {
  const std::size_t n = caps.classes();
  if (target && *target >= n) {
    throw UsageError("mask_poses: target class " + std::to_string(*target) + " out of range for " +
                     std::to_string(n) + " classes");
  }
  const std::size_t keep = target ? *target : caps.predicted();
  Tensor<T> out(Shape{n * kPoseDim});
  std::copy_n(caps.pose.value().raw() + keep * kPoseDim, kPoseDim, out.raw() + keep * kPoseDim);
  Var<T> pose = caps.pose;
  return pose.tape().record("mask_poses", std::move(out), {pose}, [pose, keep](Tape<T>& tape, const Tensor<T>& go) {
    Tensor<T> g(pose.shape());
    std::copy_n(go.raw() + keep * kPoseDim, kPoseDim, g.raw() + keep * kPoseDim);
    tape.accumulate(pose, g);
  });
}

}  // namespace vcaps
