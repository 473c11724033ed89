#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "fckit/datapipe.hpp"
#include "fckit/error.hpp"
#include "fckit/metrics.hpp"
#include "fckit/model.hpp"
#include "fckit/tensor.hpp"
#include "fckit/weights_io.hpp"
#include <nlohmann/json.hpp>

namespace fckit {

/// Seed used when none is given.
inline constexpr std::uint64_t kDefaultSeed = 2020;

struct TaskMask {
  bool arousal = true;
  bool valence = true;
  bool expression = true;

  bool any() const { return arousal || valence || expression; }
  friend bool operator==(const TaskMask&, const TaskMask&) = default;
};

/// "all" or a comma/plus separated subset of arousal, valence, expression.
inline TaskMask parse_task_mask(std::string_view text) {
  if (text == "all") return {};
  TaskMask m{false, false, false};
  std::size_t start = 0;
  while (start <= text.size()) {
    auto end = text.find_first_of(",+", start);
    if (end == std::string_view::npos) end = text.size();
    const auto item = detail::trim(text.substr(start, end - start));
    if (item == "arousal")
      m.arousal = true;
    else if (item == "valence")
      m.valence = true;
    else if (item == "expression")
      m.expression = true;
    else
      fail(Errc::invalid_argument, "unknown task '" + std::string(item) + "' (use arousal, valence, expression or all)");
    start = end + 1;
  }
  return m;
}

inline std::string to_string(const TaskMask& m) {
  if (m.arousal && m.valence && m.expression) return "all";
  std::string s;
  for (auto [on, name] : {std::pair{m.arousal, "arousal"}, {m.valence, "valence"}, {m.expression, "expression"}})
    if (on) s += (s.empty() ? "" : ",") + std::string(name);
  return s;
}

struct LossWeights {
  double arousal = 1.0;
  double valence = 1.0;
  double expression = 1.0;
};

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

enum class Balance { none, categorical, dimensional };

struct TrainConfig {
  std::size_t batch_size = 1024;
  std::size_t epochs = 10;
  AdamConfig adam;
  LossWeights weights;
  std::uint64_t seed = kDefaultSeed;
  TaskMask tasks;
  Variant variant = Variant::frame;
  bool freeze_trunk = false;
  FcsWiring wiring = FcsWiring::sequential;
  int num_classes = kDefaultClasses;
  std::string train_manifest;
  std::string val_manifest;
  std::string out_dir;
  std::string base_weights;
  bool filter = true;  // coherence filter on training data
  Balance balance = Balance::none;
  FilterThresholds thresholds;

  void validate() const {
    require(batch_size >= 1, Errc::invalid_argument, "batch_size must be >= 1");
    require(adam.learning_rate > 0, Errc::invalid_argument, "learning_rate must be > 0");
    require(adam.beta1 >= 0 && adam.beta1 < 1 && adam.beta2 >= 0 && adam.beta2 < 1, Errc::invalid_argument,
            "beta1 and beta2 must be in [0,1)");
    require(adam.epsilon > 0, Errc::invalid_argument, "epsilon must be > 0");
    require(tasks.any(), Errc::invalid_argument, "at least one task must be enabled");
    require(weights.arousal >= 0 && weights.valence >= 0 && weights.expression >= 0, Errc::invalid_argument,
            "loss weights must be >= 0");
    require((tasks.arousal && weights.arousal > 0) || (tasks.valence && weights.valence > 0) ||
                (tasks.expression && weights.expression > 0),
            Errc::invalid_argument, "every enabled task has weight 0");
    require(num_classes >= 2, Errc::invalid_argument, "classes must be >= 2");
  }
};

namespace detail {

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  fail(Errc::invalid_argument, key + ": expected true/false, got '" + v + "'");
}

inline double parse_double(const std::string& key, const std::string& v) {
  double x = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
  if (v.empty() || ec != std::errc() || ptr != v.data() + v.size() || !std::isfinite(x))
    fail(Errc::invalid_argument, key + ": expected a number, got '" + v + "'");
  return x;
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::uint64_t x = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
  if (v.empty() || ec != std::errc() || ptr != v.data() + v.size())
    fail(Errc::invalid_argument, key + ": expected a non-negative integer, got '" + v + "'");
  return x;
}

}  // namespace detail

/// Keys accepted by config files and `--set`.
inline const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys{
      "batch_size",     "epochs",       "learning_rate", "beta1",          "beta2",        "epsilon",
      "weight_arousal", "weight_valence", "weight_expression", "seed",     "tasks",        "variant",
      "freeze_trunk",   "wiring",       "classes",       "train_manifest", "val_manifest", "out_dir",
      "base_weights",   "filter",       "balance",       "neutral_threshold", "neutral_rule"};
  return keys;
}

inline void set_config_value(TrainConfig& c, const std::string& key, const std::string& value) {
  using namespace detail;
  if (key == "batch_size") c.batch_size = parse_uint(key, value);
  else if (key == "epochs") c.epochs = parse_uint(key, value);
  else if (key == "learning_rate") c.adam.learning_rate = parse_double(key, value);
  else if (key == "beta1") c.adam.beta1 = parse_double(key, value);
  else if (key == "beta2") c.adam.beta2 = parse_double(key, value);
  else if (key == "epsilon") c.adam.epsilon = parse_double(key, value);
  else if (key == "weight_arousal") c.weights.arousal = parse_double(key, value);
  else if (key == "weight_valence") c.weights.valence = parse_double(key, value);
  else if (key == "weight_expression") c.weights.expression = parse_double(key, value);
  else if (key == "seed") c.seed = parse_uint(key, value);
  else if (key == "tasks") c.tasks = parse_task_mask(value);
  else if (key == "variant") {
    if (value == "fc" || value == "frame") c.variant = Variant::frame;
    else if (value == "fcs" || value == "sequence") c.variant = Variant::sequence;
    else fail(Errc::invalid_argument, "variant: expected fc or fcs, got '" + value + "'");
  } else if (key == "freeze_trunk") c.freeze_trunk = parse_bool(key, value);
  else if (key == "wiring") {
    if (value == "sequential") c.wiring = FcsWiring::sequential;
    else if (value == "concat") c.wiring = FcsWiring::concat;
    else fail(Errc::invalid_argument, "wiring: expected sequential or concat, got '" + value + "'");
  } else if (key == "classes") c.num_classes = static_cast<int>(parse_uint(key, value));
  else if (key == "train_manifest") c.train_manifest = value;
  else if (key == "val_manifest") c.val_manifest = value;
  else if (key == "out_dir") c.out_dir = value;
  else if (key == "base_weights") c.base_weights = value;
  else if (key == "filter") c.filter = parse_bool(key, value);
  else if (key == "balance") {
    if (value == "none") c.balance = Balance::none;
    else if (value == "cat") c.balance = Balance::categorical;
    else if (value == "dim") c.balance = Balance::dimensional;
    else fail(Errc::invalid_argument, "balance: expected none, cat or dim, got '" + value + "'");
  } else if (key == "neutral_threshold") c.thresholds.neutral_threshold = parse_double(key, value);
  else if (key == "neutral_rule") {
    if (value == "and") c.thresholds.neutral_requires_both = true;
    else if (value == "or") c.thresholds.neutral_requires_both = false;
    else fail(Errc::invalid_argument, "neutral_rule: expected and or or, got '" + value + "'");
  } else fail(Errc::invalid_argument, "unknown config key '" + key + "'");
}

/// Applies `key = value` lines on top of `base`. '#' starts a comment.
/// Path values are resolved against `base_dir` when relative.
inline TrainConfig parse_config(std::string_view text, TrainConfig base = {}, const std::string& origin = "<config>",
                                const std::string& base_dir = "") {
  std::size_t line_no = 0;
  for (std::size_t start = 0; start <= text.size();) {
    auto nl = text.find('\n', start);
    if (nl == std::string_view::npos) nl = text.size();
    auto line = text.substr(start, nl - start);
    start = nl + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const auto where = origin + ":" + std::to_string(line_no);
    if (eq == std::string_view::npos) fail(Errc::parse_error, where + ": expected 'key = value'");
    const std::string key(detail::trim(line.substr(0, eq)));
    std::string value(detail::trim(line.substr(eq + 1)));
    if (key.ends_with("_manifest") || key == "out_dir" || key == "base_weights") value = resolve_path(base_dir, value);
    try {
      set_config_value(base, key, value);
    } catch (const Error& e) {
      fail(e.code(), where + ": " + e.what());
    }
  }
  return base;
}

inline TrainConfig load_config(const std::string& path, TrainConfig base = {}) {
  return parse_config(detail::read_file_bytes(path), std::move(base), path, manifest_dir(path));
}

// ---------------------------------------------------------------------------
// Labels and loss

/// Per-sample targets; NaN / -1 mark an absent label.
struct Labels {
  std::vector<float> arousal;
  std::vector<float> valence;
  std::vector<int> expression;

  std::size_t size() const { return arousal.size(); }

  void push(const Sample& s) {
    constexpr float none = std::numeric_limits<float>::quiet_NaN();
    arousal.push_back(s.arousal ? static_cast<float>(*s.arousal) : none);
    valence.push_back(s.valence ? static_cast<float>(*s.valence) : none);
    expression.push_back(s.expression ? *s.expression : -1);
  }

  void push(float a, float v, int e) {
    arousal.push_back(a);
    valence.push_back(v);
    expression.push_back(e);
  }

  Labels select(std::span<const std::size_t> idx) const {
    Labels out;
    for (auto i : idx) out.push(arousal[i], valence[i], expression[i]);
    return out;
  }
};

struct LossComponents {
  double total = 0;
  double arousal = 0;
  double valence = 0;
  double expression = 0;
  std::size_t n_arousal = 0, n_valence = 0, n_expression = 0;
  bool empty_arousal = false, empty_valence = false, empty_expression = false;  // enabled but unlabeled batch
};

struct JointLoss {
  LossComponents loss;
  OutputGrads<float> grads;  // empty tensor for a head that receives no gradient
};

/// L = w_a mse_a + w_v mse_v + w_e CE over enabled tasks. Each component is a
/// mean over the samples carrying that label.
inline JointLoss joint_loss(const Predictions<float>& p, const Labels& y, const TaskMask& mask,
                            const LossWeights& w = {}) {
  const std::size_t B = p.batch();
  require(y.size() == B, Errc::shape_mismatch,
          "joint_loss: " + std::to_string(y.size()) + " labels for batch of " + std::to_string(B));
  JointLoss out;
  auto regression = [&](const Tensorf& pred, const std::vector<float>& target, double weight, double& value,
                        std::size_t& n, bool& empty, Tensorf& grad) {
    for (std::size_t b = 0; b < B; ++b) n += !std::isnan(target[b]);
    if (n == 0) {
      empty = true;
      return;
    }
    double sum = 0;
    for (std::size_t b = 0; b < B; ++b)
      if (!std::isnan(target[b])) {
        const double d = static_cast<double>(pred[b]) - static_cast<double>(target[b]);
        sum += d * d;
      }
    value = sum / static_cast<double>(n);
    if (weight == 0) return;
    grad = Tensorf(pred.shape());
    for (std::size_t b = 0; b < B; ++b)
      if (!std::isnan(target[b]))
        grad[b] = static_cast<float>(weight * 2.0 * (static_cast<double>(pred[b]) - target[b]) / static_cast<double>(n));
  };
  auto& L = out.loss;
  if (mask.arousal) regression(p.arousal, y.arousal, w.arousal, L.arousal, L.n_arousal, L.empty_arousal, out.grads.arousal);
  if (mask.valence) regression(p.valence, y.valence, w.valence, L.valence, L.n_valence, L.empty_valence, out.grads.valence);
  if (mask.expression) {
    const std::size_t K = p.classes.dim(1);
    for (int e : y.expression) {
      require(e < static_cast<int>(K), Errc::invalid_argument, "joint_loss: class " + std::to_string(e) + " out of range");
      L.n_expression += e >= 0;
    }
    if (L.n_expression == 0) {
      L.empty_expression = true;
    } else {
      const double lo = ops::kProbClamp, hi = 1.0 - ops::kProbClamp;
      const double n = static_cast<double>(L.n_expression);
      double sum = 0;
      if (w.expression != 0) out.grads.classes = Tensorf(p.classes.shape());
      for (std::size_t b = 0; b < B; ++b) {
        const int e = y.expression[b];
        if (e < 0) continue;
        const double q = p.classes[b * K + static_cast<std::size_t>(e)];
        sum -= std::log(std::clamp(q, lo, hi));
        if (w.expression != 0 && q >= lo && q <= hi)
          out.grads.classes[b * K + static_cast<std::size_t>(e)] = static_cast<float>(-w.expression / (n * q));
      }
      L.expression = sum / n;
    }
  }
  L.total = (mask.arousal ? w.arousal * L.arousal : 0.0) + (mask.valence ? w.valence * L.valence : 0.0) +
            (mask.expression ? w.expression * L.expression : 0.0);
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer

/// Adaptive-moment optimizer with bias correction. Frozen parameters are skipped.
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  const AdamConfig& config() const { return cfg_; }
  void set_config(const AdamConfig& cfg) { cfg_ = cfg; }
  std::uint64_t steps() const { return t_; }

  /// One update from ParamTensor::grad. A non-finite gradient aborts the step
  /// before anything is modified.
  void step(ModelGraph& m) {
    ensure_state(m);
    for (const auto& p : m.params())
      if (p.trainable && !p.grad.all_finite())
        fail(Errc::non_finite, "non-finite gradient in parameter '" + p.name + "'");
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const double b1 = cfg_.beta1, b2 = cfg_.beta2, lr = cfg_.learning_rate, eps = cfg_.epsilon;
    for (std::size_t k = 0; k < m.params().size(); ++k) {
      auto& p = m.params()[k];
      if (!p.trainable) continue;
      float* w = p.value.data();
      float* m1 = m1_[k].data();
      float* m2 = m2_[k].data();
      const float* g = p.grad.data();
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        const double gi = g[i];
        const double a = b1 * m1[i] + (1 - b1) * gi;
        const double v = b2 * m2[i] + (1 - b2) * gi * gi;
        m1[i] = static_cast<float>(a);
        m2[i] = static_cast<float>(v);
        w[i] = static_cast<float>(w[i] - lr * (a / c1) / (std::sqrt(v / c2) + eps));
      }
    }
  }

  /// Moment tensors as records named `<param>.m1` / `<param>.m2`.
  std::vector<TensorRecord> records(const ModelGraph& m) const {
    const_cast<Adam*>(this)->ensure_state(m);
    std::vector<TensorRecord> out;
    for (std::size_t k = 0; k < m.params().size(); ++k) {
      out.push_back({m.params()[k].name + ".m1", m1_[k]});
      out.push_back({m.params()[k].name + ".m2", m2_[k]});
    }
    return out;
  }

  void restore(const ModelGraph& m, const std::vector<TensorRecord>& records, std::uint64_t steps,
               const std::string& path) {
    m1_.clear();
    m2_.clear();
    ensure_state(m);
    std::vector<bool> seen(2 * m.params().size(), false);
    for (const auto& r : records) {
      bool matched = false;
      for (std::size_t k = 0; k < m.params().size() && !matched; ++k)
        for (int which = 0; which < 2; ++which) {
          if (r.name != m.params()[k].name + (which ? ".m2" : ".m1")) continue;
          auto& slot = which ? m2_[k] : m1_[k];
          if (r.value.shape() != slot.shape())
            fail(Errc::tensor_shape_mismatch, path + ": tensor '" + r.name + "' has dims " + shape_str(r.value.shape()) +
                                                  ", expected " + shape_str(slot.shape()));
          slot = r.value;
          seen[2 * k + which] = true;
          matched = true;
          break;
        }
      if (!matched) fail(Errc::unknown_tensor, path + ": optimizer state has unexpected tensor '" + r.name + "'");
    }
    for (std::size_t i = 0; i < seen.size(); ++i)
      if (!seen[i])
        fail(Errc::missing_tensor,
             path + ": tensor '" + m.params()[i / 2].name + (i % 2 ? ".m2" : ".m1") + "' not in file");
    t_ = steps;
  }

 private:
  void ensure_state(const ModelGraph& m) {
    if (m1_.size() == m.params().size()) return;
    m1_.clear();
    m2_.clear();
    for (const auto& p : m.params()) {
      m1_.emplace_back(p.value.shape());
      m2_.emplace_back(p.value.shape());
    }
  }

  AdamConfig cfg_;
  std::uint64_t t_ = 0;
  std::vector<Tensorf> m1_, m2_;
};

// ---------------------------------------------------------------------------
// Datasets

/// Frames or clips with labels. Images come from files (decoded per batch)
/// or from an in-memory tensor.
class Dataset {
 public:
  static Dataset from_samples(std::vector<Sample> samples, std::string base_dir) {
    Dataset d;
    d.variant_ = Variant::frame;
    for (const auto& s : samples) d.labels_.push(s);
    d.samples_ = std::move(samples);
    d.base_dir_ = std::move(base_dir);
    return d;
  }

  /// Each clip is labeled by its final frame.
  static Dataset from_clips(std::vector<Clip> clips, std::string base_dir) {
    Dataset d;
    d.variant_ = Variant::sequence;
    for (const auto& c : clips) d.labels_.push(c.label());
    d.clips_ = std::move(clips);
    d.base_dir_ = std::move(base_dir);
    return d;
  }

  /// inputs: (N,120,120,3) frames or (N,10,120,120,3) clips.
  static Dataset from_tensor(Tensorf inputs, Labels labels) {
    require(inputs.rank() == 4 || inputs.rank() == 5, Errc::shape_mismatch,
            "dataset tensor must be rank 4 or 5, got " + shape_str(inputs.shape()));
    require(inputs.dim(0) == labels.size(), Errc::shape_mismatch, "dataset: input and label counts differ");
    Dataset d;
    d.variant_ = inputs.rank() == 4 ? Variant::frame : Variant::sequence;
    d.memory_ = std::move(inputs);
    d.labels_ = std::move(labels);
    return d;
  }

  Variant variant() const { return variant_; }
  std::size_t size() const { return labels_.size(); }
  const Labels& labels() const { return labels_; }
  const std::vector<Sample>& samples() const { return samples_; }
  const std::vector<Clip>& clips() const { return clips_; }

  Tensorf inputs(std::span<const std::size_t> idx) const {
    if (!memory_.empty()) {
      Shape shape = memory_.shape();
      const std::size_t stride = memory_.size() / shape[0];
      shape[0] = idx.size();
      Tensorf out(shape);
      for (std::size_t i = 0; i < idx.size(); ++i)
        std::copy_n(memory_.data() + idx[i] * stride, stride, out.data() + i * stride);
      return out;
    }
    if (variant_ == Variant::frame) {
      std::vector<const Sample*> batch;
      for (auto i : idx) batch.push_back(&samples_[i]);
      return load_batch(batch, base_dir_);
    }
    std::vector<const Clip*> batch;
    for (auto i : idx) batch.push_back(&clips_[i]);
    return load_clip_batch(batch, base_dir_);
  }

  /// Decodes every image once and keeps the tensor in memory.
  void preload() {
    if (!memory_.empty() || size() == 0) return;
    std::vector<std::size_t> all(size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    memory_ = inputs(all);
  }

 private:
  Variant variant_ = Variant::frame;
  std::vector<Sample> samples_;
  std::vector<Clip> clips_;
  std::string base_dir_;
  Tensorf memory_;
  Labels labels_;
};

// ---------------------------------------------------------------------------
// Evaluation

/// Runs the model over the dataset in batches; outputs are concatenated in dataset order.
inline Predictions<float> predict_all(const ModelGraph& m, const Dataset& data, std::size_t batch_size = 64) {
  require(data.size() > 0, Errc::empty_dataset, "evaluation set is empty");
  require(data.variant() == m.variant(), Errc::invalid_argument,
          std::string("dataset holds ") + (data.variant() == Variant::frame ? "frames" : "clips") + " but model is " +
              (m.variant() == Variant::frame ? "FC" : "FC-S"));
  const std::size_t N = data.size(), K = static_cast<std::size_t>(m.num_classes());
  Predictions<float> all{Tensorf({N, 1}), Tensorf({N, 1}), Tensorf({N, K})};
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < N; start += batch_size) {
    const std::size_t end = std::min(N, start + batch_size);
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const auto p = forward(m, data.inputs(idx));
    std::copy_n(p.arousal.data(), end - start, all.arousal.data() + start);
    std::copy_n(p.valence.data(), end - start, all.valence.data() + start);
    std::copy_n(p.classes.data(), (end - start) * K, all.classes.data() + start * K);
  }
  return all;
}

/// Table-style metrics over the labeled entries of each task. CCC needs at
/// least two labeled samples; otherwise the entry stays NaN.
inline MetricsReport score(const Predictions<float>& p, const Labels& y, int num_classes,
                           F1Averaging averaging = F1Averaging::macro) {
  require(y.size() == p.batch(), Errc::shape_mismatch, "score: prediction and label counts differ");
  require(y.size() > 0, Errc::empty_dataset, "evaluation set is empty");
  MetricsReport r;
  r.n = y.size();
  auto dimension = [&](const Tensorf& pred, const std::vector<float>& target) {
    PairedSeries s;
    for (std::size_t i = 0; i < target.size(); ++i)
      if (!std::isnan(target[i])) {
        s.predictions.push_back(pred[i]);
        s.annotations.push_back(target[i]);
      }
    return s.predictions.size() >= 2 ? ccc(s) : std::numeric_limits<double>::quiet_NaN();
  };
  r.ccc_arousal = dimension(p.arousal, y.arousal);
  r.ccc_valence = dimension(p.valence, y.valence);
  std::vector<int> pred, gold;
  const std::size_t K = p.classes.dim(1);
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (y.expression[i] < 0) continue;
    gold.push_back(y.expression[i]);
    const float* row = p.classes.data() + i * K;
    pred.push_back(static_cast<int>(std::max_element(row, row + K) - row));
  }
  r.n_expression = gold.size();
  if (!gold.empty()) {
    r.accuracy = accuracy(pred, gold);
    auto f1 = f1_score(pred, gold, num_classes, averaging);
    r.f1 = f1.f1;
    r.confusion = std::move(f1.confusion);
  } else {
    r.confusion = confusion_matrix(pred, gold, num_classes);
  }
  return r;
}

struct Evaluation {
  MetricsReport metrics;
  LossComponents loss;
  Predictions<float> predictions;
};

inline Evaluation evaluate(const ModelGraph& m, const Dataset& data, const TaskMask& mask = {},
                           const LossWeights& w = {}, std::size_t batch_size = 64) {
  Evaluation e;
  e.predictions = predict_all(m, data, batch_size);
  e.metrics = score(e.predictions, data.labels(), m.num_classes());
  e.loss = joint_loss(e.predictions, data.labels(), mask, LossWeights{0, 0, 0}).loss;
  e.loss.total = (mask.arousal ? w.arousal * e.loss.arousal : 0.0) + (mask.valence ? w.valence * e.loss.valence : 0.0) +
                 (mask.expression ? w.expression * e.loss.expression : 0.0);
  return e;
}

// ---------------------------------------------------------------------------
// Training loop

/// Everything needed to continue a run.
struct TrainState {
  ModelGraph model;
  Adam optimizer;
  std::size_t epoch = 0;  // completed epochs
  std::uint64_t step = 0;
  double best_val_loss = std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0;
};

struct EpochStats {
  std::size_t epoch = 0;
  std::uint64_t step = 0;
  LossComponents loss;  // sample-weighted mean over the epoch's batches
  std::optional<Evaluation> validation;
  bool improved = false;
};

struct TrainHooks {
  std::ostream* log = nullptr;      // per-step CSV
  std::ostream* val_log = nullptr;  // per-epoch validation CSV
  std::function<bool(const EpochStats&)> on_epoch;  // return false to stop early
};

inline std::string log_header() { return "epoch,step,loss,loss_arousal,loss_valence,loss_expression"; }
inline std::string val_log_header() { return "epoch,loss,ccc_arousal,ccc_valence,f1,accuracy"; }

namespace detail {

inline std::string g9(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), 0x5eedu};
  std::mt19937_64 rng(seq);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

inline bool trunk_trainable(const ModelGraph& m) {
  for (const auto& p : m.params())
    if (is_trunk_param(p.name) && p.trainable) return true;
  return false;
}

}  // namespace detail

/// Builds the model a config asks for. FC-S starts from the FC weights named
/// by base_weights.
inline ModelGraph initial_model(const TrainConfig& cfg) {
  if (cfg.variant == Variant::frame) return build_facechannel(cfg.num_classes, cfg.seed);
  require(!cfg.base_weights.empty(), Errc::invalid_argument, "FC-S training requires base weights (base_weights)");
  const auto base = load_weights(cfg.base_weights);
  require(base.variant() == Variant::frame, Errc::invalid_argument, "base weights must be an FC (frame) model");
  require(base.num_classes() == cfg.num_classes, Errc::invalid_argument,
          "base weights have " + std::to_string(base.num_classes()) + " classes, config says " +
              std::to_string(cfg.num_classes));
  return build_facechannels(base, cfg.freeze_trunk ? FcsMode::freeze_trunk : FcsMode::fine_tune, cfg.seed + 1,
                            cfg.wiring);
}

inline TrainState initial_state(const TrainConfig& cfg) { return {initial_model(cfg), Adam(cfg.adam)}; }

/// One epoch: seeded shuffle, then forward, joint loss, backward and an
/// optimizer step per mini-batch.
inline LossComponents train_epoch(TrainState& s, const TrainConfig& cfg, const Dataset& data, std::ostream* log) {
  const std::size_t epoch = s.epoch + 1;
  const auto order = detail::epoch_order(data.size(), cfg.seed, epoch);
  const bool through_trunk = detail::trunk_trainable(s.model);
  LossComponents sum;
  for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
    const std::span<const std::size_t> idx(order.data() + start, std::min(cfg.batch_size, order.size() - start));
    const auto x = data.inputs(idx);
    const auto y = data.labels().select(idx);
    s.model.zero_grads();
    ForwardCache<float> cache;
    const auto pred = forward(s.model, x, &cache);
    const auto jl = joint_loss(pred, y, cfg.tasks, cfg.weights);
    backward(s.model, cache, jl.grads, BackwardOptions{through_trunk});
    s.optimizer.step(s.model);
    ++s.step;
    const double n = static_cast<double>(idx.size());
    sum.total += n * jl.loss.total;
    sum.arousal += n * jl.loss.arousal;
    sum.valence += n * jl.loss.valence;
    sum.expression += n * jl.loss.expression;
    if (log)
      *log << epoch << "," << s.step << "," << detail::g9(jl.loss.total) << "," << detail::g9(jl.loss.arousal) << ","
           << detail::g9(jl.loss.valence) << "," << detail::g9(jl.loss.expression) << "\n";
  }
  const double N = static_cast<double>(data.size());
  sum.total /= N;
  sum.arousal /= N;
  sum.valence /= N;
  sum.expression /= N;
  s.epoch = epoch;
  return sum;
}

inline void save_checkpoint(const TrainState& s, const std::string& stem);

/// Continues `s` until cfg.epochs epochs are complete. When cfg.out_dir is
/// set, `last.*` is written after every epoch and `best.fcw` whenever the
/// validation loss improves.
inline std::vector<EpochStats> train(TrainState& s, const TrainConfig& cfg, const Dataset& train_set,
                                     const Dataset* val_set = nullptr, const TrainHooks& hooks = {}) {
  cfg.validate();
  require(train_set.size() > 0, Errc::empty_dataset, "training set is empty");
  require(train_set.variant() == s.model.variant(), Errc::invalid_argument,
          "training data does not match the model variant");
  s.optimizer.set_config(cfg.adam);
  std::vector<EpochStats> history;
  while (s.epoch < cfg.epochs) {
    EpochStats st;
    st.loss = train_epoch(s, cfg, train_set, hooks.log);
    st.epoch = s.epoch;
    st.step = s.step;
    if (val_set && val_set->size() > 0) {
      st.validation = evaluate(s.model, *val_set, cfg.tasks, cfg.weights, std::max<std::size_t>(cfg.batch_size, 1));
      const auto& v = *st.validation;
      if (v.loss.total < s.best_val_loss) {
        s.best_val_loss = v.loss.total;
        s.best_epoch = s.epoch;
        st.improved = true;
      }
      if (hooks.val_log)
        *hooks.val_log << s.epoch << "," << detail::g9(v.loss.total) << "," << detail::g9(v.metrics.ccc_arousal) << ","
                       << detail::g9(v.metrics.ccc_valence) << "," << detail::g9(v.metrics.f1) << ","
                       << detail::g9(v.metrics.accuracy) << "\n";
    }
    if (hooks.log) hooks.log->flush();
    if (!cfg.out_dir.empty()) {
      std::filesystem::create_directories(cfg.out_dir);
      save_checkpoint(s, (std::filesystem::path(cfg.out_dir) / "last").string());
      if (st.improved) save_weights(s.model, (std::filesystem::path(cfg.out_dir) / "best.fcw").string());
    }
    history.push_back(st);
    if (hooks.on_epoch && !hooks.on_epoch(history.back())) break;
  }
  return history;
}

// ---------------------------------------------------------------------------
// Checkpoints: <stem>.fcw weights, <stem>.opt moment records, <stem>.json counters

inline void save_checkpoint(const TrainState& s, const std::string& stem) {
  save_weights(s.model, stem + ".fcw");
  write_records(stem + ".opt", s.optimizer.records(s.model));
  nlohmann::ordered_json meta;
  meta["epoch"] = s.epoch;
  meta["step"] = s.step;
  meta["optimizer_steps"] = s.optimizer.steps();
  meta["best_epoch"] = s.best_epoch;
  meta["best_val_loss"] = std::isfinite(s.best_val_loss) ? nlohmann::ordered_json(s.best_val_loss) : nlohmann::ordered_json(nullptr);
  meta["frozen"] = nlohmann::ordered_json::array();
  for (const auto& p : s.model.params())
    if (!p.trainable) meta["frozen"].push_back(p.name);
  detail::write_file_bytes(stem + ".json", meta.dump(2) + "\n");
}

inline TrainState load_checkpoint(const std::string& stem, const AdamConfig& adam = {}) {
  TrainState s{load_weights(stem + ".fcw"), Adam(adam)};
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(detail::read_file_bytes(stem + ".json"));
    s.epoch = meta.at("epoch").get<std::size_t>();
    s.step = meta.at("step").get<std::uint64_t>();
    s.best_epoch = meta.at("best_epoch").get<std::size_t>();
    if (!meta.at("best_val_loss").is_null()) s.best_val_loss = meta.at("best_val_loss").get<double>();
    for (const auto& name : meta.at("frozen")) s.model.param(name.get<std::string>()).trainable = false;
    s.optimizer.restore(s.model, read_records(stem + ".opt"), meta.at("optimizer_steps").get<std::uint64_t>(),
                        stem + ".opt");
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::io_error, stem + ".json: malformed checkpoint metadata (" + e.what() + ")");
  }
  return s;
}

}  // namespace fckit
