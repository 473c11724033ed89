#pragma once

// Layer primitives with hand-derived backward passes. Every function is
// templated on the scalar so the same code runs in float for training and in
// double for finite-difference checks.

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "fckit/error.hpp"
#include "fckit/tensor.hpp"

namespace fckit::ops {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;
template <typename T>
using ConstRowVec = Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>;

inline constexpr std::size_t kKernel = 3;
inline constexpr double kProbClamp = 1e-7;

// ---------------------------------------------------------------------------
// conv2d: 3x3 kernels, stride 1, zero "same" padding, NHWC.

namespace detail {

// out[c] += sum over rows of m[r][c], rows visited in order. Eigen's
// colwise().sum() picks its summation order from the buffer address.
template <typename T>
void add_column_sums(const T* m, std::size_t rows, std::size_t cols, T* out) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c] += m[r * cols + c];
}

// Gathers the 3x3 neighbourhood of every pixel of one image into a
// (H*W, 9*C) matrix; column index is (dy*3 + dx)*C + c to match the kernel layout.
template <typename T>
void im2col(const T* image, std::size_t H, std::size_t W, std::size_t C, T* col) {
  const std::size_t row_len = kKernel * kKernel * C;
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      T* row = col + (y * W + x) * row_len;
      for (std::size_t dy = 0; dy < kKernel; ++dy) {
        const auto sy = static_cast<std::ptrdiff_t>(y + dy) - 1;
        for (std::size_t dx = 0; dx < kKernel; ++dx) {
          const auto sx = static_cast<std::ptrdiff_t>(x + dx) - 1;
          T* dst = row + (dy * kKernel + dx) * C;
          if (sy < 0 || sx < 0 || sy >= static_cast<std::ptrdiff_t>(H) || sx >= static_cast<std::ptrdiff_t>(W)) {
            std::fill(dst, dst + C, T{0});
          } else {
            const T* src = image + (static_cast<std::size_t>(sy) * W + static_cast<std::size_t>(sx)) * C;
            std::copy(src, src + C, dst);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, std::size_t H, std::size_t W, std::size_t C, T* image) {
  const std::size_t row_len = kKernel * kKernel * C;
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      const T* row = col + (y * W + x) * row_len;
      for (std::size_t dy = 0; dy < kKernel; ++dy) {
        const auto sy = static_cast<std::ptrdiff_t>(y + dy) - 1;
        if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(H)) continue;
        for (std::size_t dx = 0; dx < kKernel; ++dx) {
          const auto sx = static_cast<std::ptrdiff_t>(x + dx) - 1;
          if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(W)) continue;
          const T* src = row + (dy * kKernel + dx) * C;
          T* dst = image + (static_cast<std::size_t>(sy) * W + static_cast<std::size_t>(sx)) * C;
          for (std::size_t c = 0; c < C; ++c) dst[c] += src[c];
        }
      }
    }
  }
}

template <typename T>
void check_conv_shapes(const Tensor<T>& input, const Tensor<T>& kernels, const Tensor<T>& bias) {
  require(input.rank() == 4, Errc::shape_mismatch, "conv2d input must be (B,H,W,C), got " + shape_str(input.shape()));
  require(kernels.rank() == 4 && kernels.dim(0) == kKernel && kernels.dim(1) == kKernel, Errc::shape_mismatch,
          "conv2d kernels must be (3,3,Cin,Cout), got " + shape_str(kernels.shape()));
  require(kernels.dim(2) == input.dim(3), Errc::shape_mismatch,
          "conv2d input has " + std::to_string(input.dim(3)) + " channels but kernels expect " +
              std::to_string(kernels.dim(2)));
  require(bias.rank() == 1 && bias.dim(0) == kernels.dim(3), Errc::shape_mismatch,
          "conv2d bias must be (Cout), got " + shape_str(bias.shape()));
}

}  // namespace detail

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernels, const Tensor<T>& bias) {
  detail::check_conv_shapes(input, kernels, bias);
  const std::size_t B = input.dim(0), H = input.dim(1), W = input.dim(2), Cin = input.dim(3);
  const std::size_t Cout = kernels.dim(3);
  const auto P = static_cast<Eigen::Index>(H * W);
  const auto K = static_cast<Eigen::Index>(kKernel * kKernel * Cin);

  Tensor<T> out({B, H, W, Cout});
  std::vector<T> col(static_cast<std::size_t>(P * K));
  ConstMatMap<T> kmat(kernels.data(), K, static_cast<Eigen::Index>(Cout));
  ConstRowVec<T> b(bias.data(), static_cast<Eigen::Index>(Cout));
  for (std::size_t n = 0; n < B; ++n) {
    detail::im2col(input.data() + n * H * W * Cin, H, W, Cin, col.data());
    ConstMatMap<T> cmat(col.data(), P, K);
    MatMap<T> omat(out.data() + n * H * W * Cout, P, static_cast<Eigen::Index>(Cout));
    omat.noalias() = cmat * kmat;
    omat.rowwise() += b;
  }
  return out;
}

template <typename T>
struct Conv2dGrads {
  Tensor<T> input;  // empty when not requested
  Tensor<T> kernels;
  Tensor<T> bias;
};

template <typename T>
Conv2dGrads<T> conv2d_backward(const Tensor<T>& input, const Tensor<T>& kernels, const Tensor<T>& grad_out,
                               bool need_input_grad = true) {
  const std::size_t B = input.dim(0), H = input.dim(1), W = input.dim(2), Cin = input.dim(3);
  const std::size_t Cout = kernels.dim(3);
  require(grad_out.shape() == Shape{B, H, W, Cout}, Errc::shape_mismatch,
          "conv2d grad_out shape " + shape_str(grad_out.shape()));
  const auto P = static_cast<Eigen::Index>(H * W);
  const auto K = static_cast<Eigen::Index>(kKernel * kKernel * Cin);
  const auto Co = static_cast<Eigen::Index>(Cout);

  Conv2dGrads<T> g{{}, Tensor<T>(kernels.shape()), Tensor<T>({Cout})};
  if (need_input_grad) g.input = Tensor<T>(input.shape());

  std::vector<T> col(static_cast<std::size_t>(P * K));
  std::vector<T> dcol(need_input_grad ? col.size() : 0);
  ConstMatMap<T> kmat(kernels.data(), K, Co);
  MatMap<T> dk(g.kernels.data(), K, Co);
  for (std::size_t n = 0; n < B; ++n) {
    ConstMatMap<T> gmat(grad_out.data() + n * H * W * Cout, P, Co);
    detail::im2col(input.data() + n * H * W * Cin, H, W, Cin, col.data());
    ConstMatMap<T> cmat(col.data(), P, K);
    dk.noalias() += cmat.transpose() * gmat;
    detail::add_column_sums(grad_out.data() + n * H * W * Cout, H * W, Cout, g.bias.data());
    if (need_input_grad) {
      MatMap<T> dc(dcol.data(), P, K);
      dc.noalias() = gmat * kmat.transpose();
      detail::col2im(dcol.data(), H, W, Cin, g.input.data() + n * H * W * Cin);
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// maxpool2: 2x2 window, stride 2, trailing odd row/column dropped.

template <typename T>
struct PoolResult {
  Tensor<T> output;
  std::vector<std::uint32_t> argmax;  // flat input offset per output element
};

template <typename T>
PoolResult<T> maxpool2(const Tensor<T>& input) {
  require(input.rank() == 4, Errc::shape_mismatch, "maxpool2 input must be (B,H,W,C)");
  const std::size_t B = input.dim(0), H = input.dim(1), W = input.dim(2), C = input.dim(3);
  require(H >= 2 && W >= 2, Errc::shape_mismatch, "maxpool2 needs H,W >= 2, got " + shape_str(input.shape()));
  const std::size_t Ho = H / 2, Wo = W / 2;
  PoolResult<T> r{Tensor<T>({B, Ho, Wo, C}), std::vector<std::uint32_t>(B * Ho * Wo * C)};
  const T* in = input.data();
  std::size_t o = 0;
  for (std::size_t n = 0; n < B; ++n) {
    for (std::size_t y = 0; y < Ho; ++y) {
      for (std::size_t x = 0; x < Wo; ++x) {
        for (std::size_t c = 0; c < C; ++c, ++o) {
          std::size_t best = ((n * H + 2 * y) * W + 2 * x) * C + c;
          // row-major window scan; strict '>' keeps the first maximum on ties
          for (std::size_t dy = 0; dy < 2; ++dy) {
            for (std::size_t dx = 0; dx < 2; ++dx) {
              const std::size_t idx = ((n * H + 2 * y + dy) * W + 2 * x + dx) * C + c;
              if (in[idx] > in[best]) best = idx;
            }
          }
          r.output[o] = in[best];
          r.argmax[o] = static_cast<std::uint32_t>(best);
        }
      }
    }
  }
  return r;
}

template <typename T>
Tensor<T> maxpool2_backward(const Shape& input_shape, std::span<const std::uint32_t> argmax, const Tensor<T>& grad_out) {
  require(argmax.size() == grad_out.size(), Errc::shape_mismatch, "maxpool2 backward: argmax/grad size mismatch");
  Tensor<T> g(input_shape);
  for (std::size_t i = 0; i < grad_out.size(); ++i) g[argmax[i]] += grad_out[i];
  return g;
}

// ---------------------------------------------------------------------------
// dense: out = input * weight + bias

template <typename T>
Tensor<T> dense(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias) {
  require(input.rank() == 2 && weight.rank() == 2, Errc::shape_mismatch, "dense expects 2-d input and weight");
  require(input.dim(1) == weight.dim(0), Errc::shape_mismatch,
          "dense input " + shape_str(input.shape()) + " does not match weight " + shape_str(weight.shape()));
  require(bias.rank() == 1 && bias.dim(0) == weight.dim(1), Errc::shape_mismatch,
          "dense bias " + shape_str(bias.shape()) + " does not match weight " + shape_str(weight.shape()));
  const auto B = static_cast<Eigen::Index>(input.dim(0));
  const auto N = static_cast<Eigen::Index>(weight.dim(0));
  const auto M = static_cast<Eigen::Index>(weight.dim(1));
  Tensor<T> out({input.dim(0), weight.dim(1)});
  MatMap<T> o(out.data(), B, M);
  o.noalias() = ConstMatMap<T>(input.data(), B, N) * ConstMatMap<T>(weight.data(), N, M);
  o.rowwise() += ConstRowVec<T>(bias.data(), M);
  return out;
}

template <typename T>
struct DenseGrads {
  Tensor<T> input;
  Tensor<T> weight;
  Tensor<T> bias;
};

template <typename T>
DenseGrads<T> dense_backward(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& grad_out,
                             bool need_input_grad = true) {
  const auto B = static_cast<Eigen::Index>(input.dim(0));
  const auto N = static_cast<Eigen::Index>(weight.dim(0));
  const auto M = static_cast<Eigen::Index>(weight.dim(1));
  require(grad_out.shape() == Shape{input.dim(0), weight.dim(1)}, Errc::shape_mismatch,
          "dense grad_out shape " + shape_str(grad_out.shape()));
  DenseGrads<T> g{{}, Tensor<T>(weight.shape()), Tensor<T>({weight.dim(1)})};
  ConstMatMap<T> go(grad_out.data(), B, M);
  MatMap<T>(g.weight.data(), N, M).noalias() = ConstMatMap<T>(input.data(), B, N).transpose() * go;
  detail::add_column_sums(grad_out.data(), input.dim(0), weight.dim(1), g.bias.data());
  if (need_input_grad) {
    g.input = Tensor<T>(input.shape());
    MatMap<T>(g.input.data(), B, N).noalias() = go * ConstMatMap<T>(weight.data(), N, M).transpose();
  }
  return g;
}

// ---------------------------------------------------------------------------
// activations. Backward passes take the forward output.

template <typename T>
Tensor<T> relu(Tensor<T> x) {
  for (auto& v : x.values()) v = v > T{0} ? v : T{0};
  return x;
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& out, Tensor<T> grad) {
  for (std::size_t i = 0; i < grad.size(); ++i)
    if (!(out[i] > T{0})) grad[i] = T{0};
  return grad;
}

template <typename T>
Tensor<T> tanh_act(Tensor<T> x) {
  for (auto& v : x.values()) v = std::tanh(v);
  return x;
}

template <typename T>
Tensor<T> tanh_backward(const Tensor<T>& out, Tensor<T> grad) {
  for (std::size_t i = 0; i < grad.size(); ++i) grad[i] *= T{1} - out[i] * out[i];
  return grad;
}

template <typename T>
T sigmoid_scalar(T v) {
  // split on sign so exp never overflows
  if (v >= T{0}) return T{1} / (T{1} + std::exp(-v));
  const T e = std::exp(v);
  return e / (T{1} + e);
}

template <typename T>
Tensor<T> sigmoid(Tensor<T> x) {
  for (auto& v : x.values()) v = sigmoid_scalar(v);
  return x;
}

template <typename T>
Tensor<T> sigmoid_backward(const Tensor<T>& out, Tensor<T> grad) {
  for (std::size_t i = 0; i < grad.size(); ++i) grad[i] *= out[i] * (T{1} - out[i]);
  return grad;
}

template <typename T>
Tensor<T> softmax(Tensor<T> x) {
  require(x.rank() >= 1, Errc::shape_mismatch, "softmax needs at least one axis");
  const std::size_t K = x.shape().back();
  for (std::size_t r = 0; r < x.size() / K; ++r) {
    T* row = x.data() + r * K;
    const T mx = *std::max_element(row, row + K);
    T sum{0};
    for (std::size_t k = 0; k < K; ++k) {
      row[k] = std::exp(row[k] - mx);
      sum += row[k];
    }
    for (std::size_t k = 0; k < K; ++k) row[k] /= sum;
  }
  return x;
}

template <typename T>
Tensor<T> softmax_backward(const Tensor<T>& out, Tensor<T> grad) {
  const std::size_t K = out.shape().back();
  for (std::size_t r = 0; r < out.size() / K; ++r) {
    const T* y = out.data() + r * K;
    T* g = grad.data() + r * K;
    T dot{0};
    for (std::size_t k = 0; k < K; ++k) dot += g[k] * y[k];
    for (std::size_t k = 0; k < K; ++k) g[k] = y[k] * (g[k] - dot);
  }
  return grad;
}

// ---------------------------------------------------------------------------
// LSTM cell. Gate order: input, forget, cell candidate, output. Each gate has
// an (N+U, U) weight acting on [x, h] and a U-bias.

enum Gate : std::size_t { kInputGate = 0, kForgetGate = 1, kCellGate = 2, kOutputGate = 3 };

template <typename T>
struct LstmParamsRef {
  std::array<const Tensor<T>*, 4> weight;
  std::array<const Tensor<T>*, 4> bias;
};

template <typename T>
struct LstmGrads {
  std::array<Tensor<T>, 4> weight;
  std::array<Tensor<T>, 4> bias;

  static LstmGrads zeros(std::size_t N, std::size_t U) {
    LstmGrads g;
    for (std::size_t k = 0; k < 4; ++k) {
      g.weight[k] = Tensor<T>({N + U, U});
      g.bias[k] = Tensor<T>({U});
    }
    return g;
  }
};

template <typename T>
struct LstmStepCache {
  Tensor<T> x, h, c;                  // inputs
  std::array<Tensor<T>, 4> gate;      // post-activation i, f, g, o
  Tensor<T> tanh_c;                   // tanh(c')
  Tensor<T> h_next, c_next;
};

template <typename T>
LstmStepCache<T> lstm_step(const Tensor<T>& x, const Tensor<T>& h, const Tensor<T>& c, const LstmParamsRef<T>& p) {
  require(x.rank() == 2 && h.rank() == 2 && c.rank() == 2, Errc::shape_mismatch, "lstm_step expects 2-d x, h, c");
  const std::size_t B = x.dim(0), N = x.dim(1), U = h.dim(1);
  require(h.dim(0) == B && c.shape() == h.shape(), Errc::shape_mismatch,
          "lstm_step state shapes " + shape_str(h.shape()) + "/" + shape_str(c.shape()) + " vs batch " +
              std::to_string(B));
  for (std::size_t k = 0; k < 4; ++k) {
    require(p.weight[k]->shape() == Shape{N + U, U}, Errc::shape_mismatch,
            "lstm gate weight must be " + shape_str({N + U, U}) + ", got " + shape_str(p.weight[k]->shape()));
    require(p.bias[k]->shape() == Shape{U}, Errc::shape_mismatch, "lstm gate bias must be (U)");
  }
  const auto Bi = static_cast<Eigen::Index>(B), Ni = static_cast<Eigen::Index>(N), Ui = static_cast<Eigen::Index>(U);
  LstmStepCache<T> s{x, h, c, {}, Tensor<T>({B, U}), Tensor<T>({B, U}), Tensor<T>({B, U})};
  ConstMatMap<T> xm(x.data(), Bi, Ni), hm(h.data(), Bi, Ui);
  for (std::size_t k = 0; k < 4; ++k) {
    s.gate[k] = Tensor<T>({B, U});
    MatMap<T> z(s.gate[k].data(), Bi, Ui);
    const T* w = p.weight[k]->data();
    z.noalias() = xm * ConstMatMap<T>(w, Ni, Ui);
    z.noalias() += hm * ConstMatMap<T>(w + N * U, Ui, Ui);
    z.rowwise() += ConstRowVec<T>(p.bias[k]->data(), Ui);
    for (auto& v : s.gate[k].values()) v = (k == kCellGate) ? std::tanh(v) : sigmoid_scalar(v);
  }
  for (std::size_t i = 0; i < B * U; ++i) {
    const T cn = s.gate[kForgetGate][i] * c[i] + s.gate[kInputGate][i] * s.gate[kCellGate][i];
    s.c_next[i] = cn;
    s.tanh_c[i] = std::tanh(cn);
    s.h_next[i] = s.gate[kOutputGate][i] * s.tanh_c[i];
  }
  return s;
}

template <typename T>
struct LstmStepBackward {
  Tensor<T> x, h, c;
};

/// Backward through one step given upstream dL/dh' and dL/dc'. Parameter
/// gradients are accumulated into `grads`.
template <typename T>
LstmStepBackward<T> lstm_step_backward(const LstmStepCache<T>& s, const LstmParamsRef<T>& p, const Tensor<T>& dh_next,
                                       const Tensor<T>& dc_next, LstmGrads<T>& grads) {
  const std::size_t B = s.x.dim(0), N = s.x.dim(1), U = s.h.dim(1);
  const auto Bi = static_cast<Eigen::Index>(B), Ni = static_cast<Eigen::Index>(N), Ui = static_cast<Eigen::Index>(U);
  std::array<Tensor<T>, 4> dz;
  for (auto& t : dz) t = Tensor<T>({B, U});
  LstmStepBackward<T> out{Tensor<T>({B, N}), Tensor<T>({B, U}), Tensor<T>({B, U})};
  for (std::size_t i = 0; i < B * U; ++i) {
    const T ig = s.gate[kInputGate][i], fg = s.gate[kForgetGate][i], gg = s.gate[kCellGate][i],
            og = s.gate[kOutputGate][i];
    const T dc = dc_next[i] + dh_next[i] * og * (T{1} - s.tanh_c[i] * s.tanh_c[i]);
    dz[kOutputGate][i] = dh_next[i] * s.tanh_c[i] * og * (T{1} - og);
    dz[kInputGate][i] = dc * gg * ig * (T{1} - ig);
    dz[kForgetGate][i] = dc * s.c[i] * fg * (T{1} - fg);
    dz[kCellGate][i] = dc * ig * (T{1} - gg * gg);
    out.c[i] = dc * fg;
  }
  ConstMatMap<T> xm(s.x.data(), Bi, Ni), hm(s.h.data(), Bi, Ui);
  MatMap<T> dx(out.x.data(), Bi, Ni), dh(out.h.data(), Bi, Ui);
  for (std::size_t k = 0; k < 4; ++k) {
    ConstMatMap<T> d(dz[k].data(), Bi, Ui);
    MatMap<T> gw(grads.weight[k].data(), Ni + Ui, Ui);
    gw.topRows(Ni).noalias() += xm.transpose() * d;
    gw.bottomRows(Ui).noalias() += hm.transpose() * d;
    detail::add_column_sums(dz[k].data(), B, U, grads.bias[k].data());
    const T* w = p.weight[k]->data();
    dx.noalias() += d * ConstMatMap<T>(w, Ni, Ui).transpose();
    dh.noalias() += d * ConstMatMap<T>(w + N * U, Ui, Ui).transpose();
  }
  return out;
}

// ---------------------------------------------------------------------------
// losses

template <typename T>
T mse(const Tensor<T>& pred, const Tensor<T>& target) {
  require(pred.shape() == target.shape(), Errc::shape_mismatch,
          "mse shapes " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  T sum{0};
  for (std::size_t i = 0; i < pred.size(); ++i) sum += (pred[i] - target[i]) * (pred[i] - target[i]);
  return sum / static_cast<T>(pred.dim(0));
}

template <typename T>
Tensor<T> mse_backward(const Tensor<T>& pred, const Tensor<T>& target) {
  Tensor<T> g(pred.shape());
  const T scale = T{2} / static_cast<T>(pred.dim(0));
  for (std::size_t i = 0; i < pred.size(); ++i) g[i] = scale * (pred[i] - target[i]);
  return g;
}

namespace detail {
inline void check_targets(std::size_t B, std::size_t K, std::span<const int> targets) {
  require(targets.size() == B, Errc::shape_mismatch, "cross_entropy: target count does not match batch");
  for (int t : targets)
    require(t >= 0 && static_cast<std::size_t>(t) < K, Errc::invalid_argument,
            "cross_entropy: target class " + std::to_string(t) + " outside [0," + std::to_string(K) + ")");
}
}  // namespace detail

/// Mean negative log-likelihood of softmax outputs; probabilities are
/// clamped to [1e-7, 1-1e-7] before the log.
template <typename T>
T cross_entropy(const Tensor<T>& dist, std::span<const int> targets) {
  require(dist.rank() == 2, Errc::shape_mismatch, "cross_entropy expects (B,K) distribution");
  const std::size_t B = dist.dim(0), K = dist.dim(1);
  detail::check_targets(B, K, targets);
  const T lo = static_cast<T>(kProbClamp), hi = T{1} - static_cast<T>(kProbClamp);
  T sum{0};
  for (std::size_t b = 0; b < B; ++b) sum -= std::log(std::clamp(dist[b * K + targets[b]], lo, hi));
  return sum / static_cast<T>(B);
}

template <typename T>
Tensor<T> cross_entropy_backward(const Tensor<T>& dist, std::span<const int> targets) {
  const std::size_t B = dist.dim(0), K = dist.dim(1);
  detail::check_targets(B, K, targets);
  const T lo = static_cast<T>(kProbClamp), hi = T{1} - static_cast<T>(kProbClamp);
  Tensor<T> g(dist.shape());
  for (std::size_t b = 0; b < B; ++b) {
    const T p = dist[b * K + targets[b]];
    // the clamp is flat outside its range
    if (p >= lo && p <= hi) g[b * K + targets[b]] = T{-1} / (static_cast<T>(B) * p);
  }
  return g;
}

}  // namespace fckit::ops
