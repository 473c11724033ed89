#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fckit/error.hpp"

namespace fckit {

/// Predictions paired with annotations; equal length, N >= 2, all finite.
struct PairedSeries {
  std::vector<double> predictions;
  std::vector<double> annotations;

  void validate() const {
    require(predictions.size() == annotations.size(), Errc::shape_mismatch,
            "paired series lengths differ (" + std::to_string(predictions.size()) + " vs " +
                std::to_string(annotations.size()) + ")");
    require(predictions.size() >= 2, Errc::invalid_argument, "paired series needs at least 2 points");
    for (std::size_t i = 0; i < predictions.size(); ++i)
      require(std::isfinite(predictions[i]) && std::isfinite(annotations[i]), Errc::non_finite,
              "paired series value at index " + std::to_string(i) + " is not finite");
  }
};

/// Population (1/N) moments.
struct MomentSet {
  double mean_x = 0, mean_y = 0;
  double var_x = 0, var_y = 0;
  double cov = 0;
};

/// Single pass (Welford-style co-moment updates).
inline MomentSet moments(const PairedSeries& s) {
  s.validate();
  MomentSet m;
  double m2x = 0, m2y = 0, cxy = 0;
  double n = 0;
  for (std::size_t i = 0; i < s.predictions.size(); ++i) {
    n += 1;
    const double x = s.predictions[i], y = s.annotations[i];
    const double dx = x - m.mean_x;
    const double dy = y - m.mean_y;
    m.mean_x += dx / n;
    m.mean_y += dy / n;
    m2x += dx * (x - m.mean_x);
    m2y += dy * (y - m.mean_y);
    cxy += dx * (y - m.mean_y);
  }
  m.var_x = m2x / n;
  m.var_y = m2y / n;
  m.cov = cxy / n;
  return m;
}

struct Pearson {
  double rho = 0;
  bool degenerate = false;  // a series had zero variance; rho reported as 0
};

inline Pearson pearson(const PairedSeries& s) {
  const auto m = moments(s);
  if (m.var_x <= 0 || m.var_y <= 0) return {0.0, true};
  const double rho = m.cov / std::sqrt(m.var_x * m.var_y);
  return {std::clamp(rho, -1.0, 1.0), false};
}

/// Concordance correlation coefficient in covariance form,
/// 2 cov / (var_x + var_y + (mean_x - mean_y)^2). Identical constant series
/// (zero denominator) count as perfect agreement.
inline double ccc(const PairedSeries& s) {
  const auto m = moments(s);
  const double diff = m.mean_x - m.mean_y;
  const double denom = m.var_x + m.var_y + diff * diff;
  if (denom == 0.0) return 1.0;
  return 2.0 * m.cov / denom;
}

inline double ccc(std::span<const double> predictions, std::span<const double> annotations) {
  return ccc(PairedSeries{{predictions.begin(), predictions.end()}, {annotations.begin(), annotations.end()}});
}

inline double accuracy(std::span<const int> predicted, std::span<const int> gold) {
  require(predicted.size() == gold.size(), Errc::shape_mismatch, "accuracy: prediction and gold lengths differ");
  require(!gold.empty(), Errc::invalid_argument, "accuracy: empty input");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) hits += predicted[i] == gold[i];
  return static_cast<double>(hits) / static_cast<double>(gold.size());
}

/// counts[gold][predicted]
struct ConfusionMatrix {
  int classes = 0;
  std::vector<std::size_t> counts;

  std::size_t at(int gold, int predicted) const {
    return counts[static_cast<std::size_t>(gold) * static_cast<std::size_t>(classes) + static_cast<std::size_t>(predicted)];
  }
  std::size_t total() const {
    std::size_t n = 0;
    for (auto c : counts) n += c;
    return n;
  }
  std::size_t trace() const {
    std::size_t n = 0;
    for (int k = 0; k < classes; ++k) n += at(k, k);
    return n;
  }
};

inline ConfusionMatrix confusion_matrix(std::span<const int> predicted, std::span<const int> gold, int K) {
  require(predicted.size() == gold.size(), Errc::shape_mismatch, "confusion: prediction and gold lengths differ");
  require(K >= 1, Errc::invalid_argument, "confusion: class count must be positive");
  ConfusionMatrix cm{K, std::vector<std::size_t>(static_cast<std::size_t>(K) * static_cast<std::size_t>(K), 0)};
  for (std::size_t i = 0; i < gold.size(); ++i) {
    for (int c : {predicted[i], gold[i]})
      require(c >= 0 && c < K, Errc::invalid_argument,
              "class " + std::to_string(c) + " outside [0," + std::to_string(K) + ")");
    ++cm.counts[static_cast<std::size_t>(gold[i]) * static_cast<std::size_t>(K) + static_cast<std::size_t>(predicted[i])];
  }
  return cm;
}

enum class F1Averaging { macro, weighted };

struct F1Result {
  double f1 = 0;
  std::vector<double> per_class;  // NaN for classes absent from gold and predictions
  ConfusionMatrix confusion;
};

/// Per-class F1 = 2PR/(P+R), 0 when P+R = 0. Macro averaging skips classes
/// that occur in neither gold nor predictions; weighted averaging uses gold support.
inline F1Result f1_score(std::span<const int> predicted, std::span<const int> gold, int K,
                         F1Averaging averaging = F1Averaging::macro) {
  F1Result r;
  r.confusion = confusion_matrix(predicted, gold, K);
  r.per_class.assign(static_cast<std::size_t>(K), std::numeric_limits<double>::quiet_NaN());
  double sum = 0, weight = 0;
  for (int k = 0; k < K; ++k) {
    std::size_t tp = r.confusion.at(k, k), support = 0, predicted_k = 0;
    for (int j = 0; j < K; ++j) {
      support += r.confusion.at(k, j);
      predicted_k += r.confusion.at(j, k);
    }
    if (support == 0 && predicted_k == 0) continue;
    const double precision = predicted_k ? static_cast<double>(tp) / static_cast<double>(predicted_k) : 0.0;
    const double recall = support ? static_cast<double>(tp) / static_cast<double>(support) : 0.0;
    const double f1 = (precision + recall) > 0 ? 2 * precision * recall / (precision + recall) : 0.0;
    r.per_class[static_cast<std::size_t>(k)] = f1;
    const double w = averaging == F1Averaging::macro ? 1.0 : static_cast<double>(support);
    sum += w * f1;
    weight += w;
  }
  r.f1 = weight > 0 ? sum / weight : 0.0;
  return r;
}

/// Evaluation summary laid out like the results table: Arousal CCC,
/// Valence CCC, F1-Score, Accuracy. Undefined entries are NaN.
struct MetricsReport {
  double ccc_arousal = std::numeric_limits<double>::quiet_NaN();
  double ccc_valence = std::numeric_limits<double>::quiet_NaN();
  double f1 = std::numeric_limits<double>::quiet_NaN();
  double accuracy = std::numeric_limits<double>::quiet_NaN();
  ConfusionMatrix confusion;
  std::size_t n = 0;             // evaluated samples
  std::size_t n_expression = 0;  // samples carrying an expression label
};

namespace detail {
inline std::string fixed4(double v) {
  if (std::isnan(v)) return "-";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  if (std::string_view(buf) == "-0.0000") return "0.0000";
  return buf;
}
inline std::string full(double v) {
  if (std::isnan(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}
}  // namespace detail

inline std::string table_header() { return "Arousal,Valence,F1-Score,Accuracy"; }

inline std::string table_row(const MetricsReport& r) {
  using detail::fixed4;
  return fixed4(r.ccc_arousal) + "," + fixed4(r.ccc_valence) + "," + fixed4(r.f1) + "," + fixed4(r.accuracy);
}

inline std::string metrics_csv(const MetricsReport& r) {
  using detail::full;
  std::string out = "metric,value\n";
  out += "ccc_arousal," + full(r.ccc_arousal) + "\n";
  out += "ccc_valence," + full(r.ccc_valence) + "\n";
  out += "f1," + full(r.f1) + "\n";
  out += "accuracy," + full(r.accuracy) + "\n";
  out += "n," + std::to_string(r.n) + "\n";
  out += "n_expression," + std::to_string(r.n_expression) + "\n";
  return out;
}

/// K x K counts, rows = gold class, columns = predicted class.
inline std::string confusion_csv(const ConfusionMatrix& cm, const std::vector<std::string>& names = {}) {
  auto label = [&](int k) { return k < static_cast<int>(names.size()) ? names[static_cast<std::size_t>(k)] : std::to_string(k); };
  std::string out = "gold\\pred";
  for (int k = 0; k < cm.classes; ++k) out += "," + label(k);
  out += "\n";
  for (int g = 0; g < cm.classes; ++g) {
    out += label(g);
    for (int p = 0; p < cm.classes; ++p) out += "," + std::to_string(cm.at(g, p));
    out += "\n";
  }
  return out;
}

}  // namespace fckit
