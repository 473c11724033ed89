#pragma once

// Finite-difference verification of the backward passes in ops.hpp. All
// checks run in double precision with central differences.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "fckit/error.hpp"
#include "fckit/ops.hpp"
#include "fckit/tensor.hpp"

namespace fckit {

struct ParamError {
  std::string name;
  double max_rel_error = 0.0;
};

struct GradCheckReport {
  std::string op;
  double max_rel_error = 0.0;
  std::vector<ParamError> per_parameter;
  double tolerance = 0.0;
  int seeds = 0;

  bool passed() const { return max_rel_error <= tolerance; }
};

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

inline constexpr double kGradCheckStep = 1e-5;
inline constexpr double kGradCheckTolerance = 1e-4;

inline const std::vector<std::string>& gradcheck_primitives() {
  static const std::vector<std::string> names{"conv2d", "maxpool2", "dense",   "relu", "tanh",
                                              "sigmoid", "softmax", "lstm_step", "mse", "cross_entropy"};
  return names;
}

namespace detail {

struct NamedInput {
  std::string name;
  Tensord value;
};

struct GradProblem {
  std::vector<NamedInput> inputs;
  std::function<double(const std::vector<NamedInput>&)> objective;
  std::function<std::vector<Tensord>(const std::vector<NamedInput>&)> analytic;
};

inline Tensord random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensord t(std::move(shape));
  for (auto& v : t.values()) v = dist(rng);
  return t;
}

inline double weighted_sum(const Tensord& out, const Tensord& weights) {
  double s = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) s += out[i] * weights[i];
  return s;
}

inline GradCheckReport evaluate(std::string op, GradProblem& p, double h) {
  GradCheckReport report;
  report.op = std::move(op);
  const auto analytic = p.analytic(p.inputs);
  require(analytic.size() == p.inputs.size(), Errc::invariant, "analytic gradient count mismatch");
  for (std::size_t t = 0; t < p.inputs.size(); ++t) {
    ParamError pe{p.inputs[t].name, 0.0};
    auto& x = p.inputs[t].value;
    require(analytic[t].shape() == x.shape(), Errc::invariant, "analytic gradient shape mismatch for " + pe.name);
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double orig = x[i];
      x[i] = orig + h;
      const double fp = p.objective(p.inputs);
      x[i] = orig - h;
      const double fm = p.objective(p.inputs);
      x[i] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      pe.max_rel_error = std::max(pe.max_rel_error, relative_error(analytic[t][i], numeric));
    }
    report.max_rel_error = std::max(report.max_rel_error, pe.max_rel_error);
    report.per_parameter.push_back(std::move(pe));
  }
  return report;
}

inline GradProblem conv2d_problem(std::mt19937_64& rng) {
  GradProblem p;
  p.inputs = {{"input", random_tensor({1, 6, 6, 2}, rng)},
              {"kernels", random_tensor({3, 3, 2, 2}, rng)},
              {"bias", random_tensor({2}, rng)}};
  auto weights = random_tensor({1, 6, 6, 2}, rng);
  p.objective = [weights](const std::vector<NamedInput>& in) {
    return weighted_sum(ops::conv2d(in[0].value, in[1].value, in[2].value), weights);
  };
  p.analytic = [weights](const std::vector<NamedInput>& in) {
    auto g = ops::conv2d_backward(in[0].value, in[1].value, weights);
    return std::vector<Tensord>{g.input, g.kernels, g.bias};
  };
  return p;
}

// Pooling is non-differentiable where two window entries tie, so windows whose
// two largest values are closer than `margin` are redrawn.
inline GradProblem maxpool2_problem(std::mt19937_64& rng) {
  constexpr double margin = 1e-3;
  Tensord input;
  for (;;) {
    input = random_tensor({2, 5, 4, 2}, rng);
    bool ok = true;
    const std::size_t H = 5, W = 4, C = 2;
    for (std::size_t n = 0; n < 2 && ok; ++n)
      for (std::size_t y = 0; y + 1 < H && ok; y += 2)
        for (std::size_t x = 0; x + 1 < W && ok; x += 2)
          for (std::size_t c = 0; c < C && ok; ++c) {
            std::array<double, 4> w{};
            std::size_t k = 0;
            for (std::size_t dy = 0; dy < 2; ++dy)
              for (std::size_t dx = 0; dx < 2; ++dx) w[k++] = input[((n * H + y + dy) * W + x + dx) * C + c];
            std::sort(w.begin(), w.end());
            ok = (w[3] - w[2]) > margin;
          }
    if (ok) break;
  }
  GradProblem p;
  p.inputs = {{"input", std::move(input)}};
  auto weights = random_tensor({2, 2, 2, 2}, rng);
  p.objective = [weights](const std::vector<NamedInput>& in) {
    return weighted_sum(ops::maxpool2(in[0].value).output, weights);
  };
  p.analytic = [weights](const std::vector<NamedInput>& in) {
    auto r = ops::maxpool2(in[0].value);
    return std::vector<Tensord>{ops::maxpool2_backward(in[0].value.shape(), r.argmax, weights)};
  };
  return p;
}

inline GradProblem dense_problem(std::mt19937_64& rng) {
  GradProblem p;
  p.inputs = {{"input", random_tensor({4, 3}, rng)},
              {"weight", random_tensor({3, 5}, rng)},
              {"bias", random_tensor({5}, rng)}};
  auto weights = random_tensor({4, 5}, rng);
  p.objective = [weights](const std::vector<NamedInput>& in) {
    return weighted_sum(ops::dense(in[0].value, in[1].value, in[2].value), weights);
  };
  p.analytic = [weights](const std::vector<NamedInput>& in) {
    auto g = ops::dense_backward(in[0].value, in[1].value, weights);
    return std::vector<Tensord>{g.input, g.weight, g.bias};
  };
  return p;
}

template <typename Fwd, typename Bwd>
GradProblem elementwise_problem(std::mt19937_64& rng, Shape shape, double lo, double hi, double avoid_zero,
                                Fwd fwd, Bwd bwd) {
  Tensord x = random_tensor(shape, rng, lo, hi);
  std::uniform_real_distribution<double> redraw(lo, hi);
  for (auto& v : x.values())
    while (std::abs(v) < avoid_zero) v = redraw(rng);
  GradProblem p;
  p.inputs = {{"input", std::move(x)}};
  auto weights = random_tensor(shape, rng);
  p.objective = [weights, fwd](const std::vector<NamedInput>& in) { return weighted_sum(fwd(in[0].value), weights); };
  p.analytic = [weights, fwd, bwd](const std::vector<NamedInput>& in) {
    return std::vector<Tensord>{bwd(fwd(in[0].value), weights)};
  };
  return p;
}

inline GradProblem lstm_problem(std::mt19937_64& rng) {
  constexpr std::size_t B = 2, N = 3, U = 4;
  GradProblem p;
  p.inputs = {{"x", random_tensor({B, N}, rng)}, {"h", random_tensor({B, U}, rng)}, {"c", random_tensor({B, U}, rng)}};
  const char* gate_names[4] = {"i", "f", "g", "o"};
  for (std::size_t k = 0; k < 4; ++k) p.inputs.push_back({std::string("w_") + gate_names[k], random_tensor({N + U, U}, rng)});
  for (std::size_t k = 0; k < 4; ++k) p.inputs.push_back({std::string("b_") + gate_names[k], random_tensor({U}, rng)});
  auto wh = random_tensor({B, U}, rng);
  auto wc = random_tensor({B, U}, rng);
  auto params = [](const std::vector<NamedInput>& in) {
    ops::LstmParamsRef<double> ref;
    for (std::size_t k = 0; k < 4; ++k) {
      ref.weight[k] = &in[3 + k].value;
      ref.bias[k] = &in[7 + k].value;
    }
    return ref;
  };
  p.objective = [=](const std::vector<NamedInput>& in) {
    auto s = ops::lstm_step(in[0].value, in[1].value, in[2].value, params(in));
    return weighted_sum(s.h_next, wh) + weighted_sum(s.c_next, wc);
  };
  p.analytic = [=](const std::vector<NamedInput>& in) {
    auto ref = params(in);
    auto s = ops::lstm_step(in[0].value, in[1].value, in[2].value, ref);
    auto grads = ops::LstmGrads<double>::zeros(N, U);
    auto back = ops::lstm_step_backward(s, ref, wh, wc, grads);
    std::vector<Tensord> out{back.x, back.h, back.c};
    for (auto& w : grads.weight) out.push_back(w);
    for (auto& b : grads.bias) out.push_back(b);
    return out;
  };
  return p;
}

inline GradProblem mse_problem(std::mt19937_64& rng) {
  GradProblem p;
  p.inputs = {{"pred", random_tensor({5, 1}, rng)}};
  auto target = random_tensor({5, 1}, rng);
  p.objective = [target](const std::vector<NamedInput>& in) { return ops::mse(in[0].value, target); };
  p.analytic = [target](const std::vector<NamedInput>& in) {
    return std::vector<Tensord>{ops::mse_backward(in[0].value, target)};
  };
  return p;
}

inline GradProblem cross_entropy_problem(std::mt19937_64& rng) {
  constexpr std::size_t B = 4, K = 7;
  GradProblem p;
  p.inputs = {{"pred_dist", ops::softmax(random_tensor({B, K}, rng, -2.0, 2.0))}};
  std::uniform_int_distribution<int> cls(0, K - 1);
  std::vector<int> targets(B);
  for (auto& t : targets) t = cls(rng);
  p.objective = [targets](const std::vector<NamedInput>& in) { return ops::cross_entropy<double>(in[0].value, targets); };
  p.analytic = [targets](const std::vector<NamedInput>& in) {
    return std::vector<Tensord>{ops::cross_entropy_backward<double>(in[0].value, targets)};
  };
  return p;
}

inline GradProblem make_problem(std::string_view op, std::mt19937_64& rng) {
  if (op == "conv2d") return conv2d_problem(rng);
  if (op == "maxpool2") return maxpool2_problem(rng);
  if (op == "dense") return dense_problem(rng);
  if (op == "relu")
    return elementwise_problem(
        rng, {3, 4}, -1.0, 1.0, 1e-3, [](const Tensord& x) { return ops::relu(x); },
        [](const Tensord& y, const Tensord& g) { return ops::relu_backward(y, g); });
  if (op == "tanh")
    return elementwise_problem(
        rng, {3, 4}, -2.0, 2.0, 0.0, [](const Tensord& x) { return ops::tanh_act(x); },
        [](const Tensord& y, const Tensord& g) { return ops::tanh_backward(y, g); });
  if (op == "sigmoid")
    return elementwise_problem(
        rng, {3, 4}, -4.0, 4.0, 0.0, [](const Tensord& x) { return ops::sigmoid(x); },
        [](const Tensord& y, const Tensord& g) { return ops::sigmoid_backward(y, g); });
  if (op == "softmax")
    return elementwise_problem(
        rng, {3, 5}, -2.0, 2.0, 0.0, [](const Tensord& x) { return ops::softmax(x); },
        [](const Tensord& y, const Tensord& g) { return ops::softmax_backward(y, g); });
  if (op == "lstm_step") return lstm_problem(rng);
  if (op == "mse") return mse_problem(rng);
  if (op == "cross_entropy") return cross_entropy_problem(rng);
  fail(Errc::invalid_argument, "unknown primitive '" + std::string(op) + "'");
}

}  // namespace detail

/// Checks one primitive on one random draw.
inline GradCheckReport grad_check(std::string_view op, std::uint64_t seed, double h = kGradCheckStep,
                                  double tol = kGradCheckTolerance) {
  std::mt19937_64 rng(seed);
  auto problem = detail::make_problem(op, rng);
  auto report = detail::evaluate(std::string(op), problem, h);
  report.tolerance = tol;
  report.seeds = 1;
  return report;
}

/// Checks one primitive over seeds [first_seed, first_seed + seeds) and keeps
/// the worst error per parameter.
inline GradCheckReport grad_check_seeds(std::string_view op, int seeds, std::uint64_t first_seed = 1,
                                        double h = kGradCheckStep, double tol = kGradCheckTolerance) {
  GradCheckReport total;
  total.op = std::string(op);
  total.tolerance = tol;
  for (int s = 0; s < seeds; ++s) {
    auto r = grad_check(op, first_seed + static_cast<std::uint64_t>(s), h, tol);
    if (total.per_parameter.empty()) {
      total.per_parameter = r.per_parameter;
    } else {
      for (std::size_t i = 0; i < r.per_parameter.size(); ++i)
        total.per_parameter[i].max_rel_error =
            std::max(total.per_parameter[i].max_rel_error, r.per_parameter[i].max_rel_error);
    }
    total.max_rel_error = std::max(total.max_rel_error, r.max_rel_error);
    ++total.seeds;
  }
  return total;
}

inline std::vector<GradCheckReport> grad_check_suite(int seeds = 10, double tol = kGradCheckTolerance) {
  std::vector<GradCheckReport> out;
  for (const auto& op : gradcheck_primitives()) out.push_back(grad_check_seeds(op, seeds, 1, kGradCheckStep, tol));
  return out;
}

}  // namespace fckit
