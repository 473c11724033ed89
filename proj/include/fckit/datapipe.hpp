#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include "fckit/error.hpp"
#include "fckit/image.hpp"
#include "fckit/model.hpp"
#include "fckit/parallel.hpp"
#include "fckit/tensor.hpp"
#include "fckit/weights_io.hpp"

namespace fckit {

/// Expression class ids.
enum Expression : int { Neutral = 0, Anger, Disgust, Fear, Happiness, Sadness, Surprise };

inline const std::vector<std::string>& expression_names() {
  static const std::vector<std::string> names{"Neutral", "Anger",   "Disgust", "Fear",
                                              "Happiness", "Sadness", "Surprise"};
  return names;
}

inline std::string class_name(int k) {
  const auto& n = expression_names();
  return k >= 0 && k < static_cast<int>(n.size()) ? n[static_cast<std::size_t>(k)] : "class" + std::to_string(k);
}

/// One manifest row. Absent labels are empty optionals; an augmented row
/// refers to its source through path, video and frame.
struct Sample {
  std::string path;
  std::string video;
  std::uint64_t frame = 0;
  std::optional<double> valence;
  std::optional<double> arousal;
  std::optional<int> expression;
  std::optional<AugmentRecipe> augment;

  bool augmented() const { return augment.has_value(); }
  friend bool operator==(const Sample&, const Sample&) = default;
};

inline const std::vector<std::string>& manifest_columns() {
  static const std::vector<std::string> cols{"path", "video", "frame", "valence", "arousal", "expression"};
  return cols;
}

namespace detail {

inline std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    const auto comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline std::string shortest(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

}  // namespace detail

/// Parses manifest text. Header `path,video,frame,valence,arousal,expression`
/// (any column order) plus an optional `augment` column. Empty label fields
/// mean unlabeled. Values containing commas are not supported.
inline std::vector<Sample> parse_manifest_text(std::string_view text, const std::string& origin = "<manifest>",
                                               int num_classes = kDefaultClasses) {
  std::vector<std::string_view> lines;
  for (std::size_t start = 0; start < text.size();) {
    auto nl = text.find('\n', start);
    if (nl == std::string_view::npos) nl = text.size();
    lines.push_back(text.substr(start, nl - start));
    start = nl + 1;
  }
  if (lines.empty() || detail::trim(lines[0]).empty()) fail(Errc::missing_column, origin + ": missing header row");

  std::map<std::string, std::size_t> index;
  const auto header = detail::split_csv(lines[0]);
  for (std::size_t i = 0; i < header.size(); ++i) index[std::string(detail::trim(header[i]))] = i;
  for (const auto& col : manifest_columns())
    if (!index.count(col)) fail(Errc::missing_column, origin + ": header lacks column '" + col + "'");
  const std::optional<std::size_t> augment_col =
      index.count("augment") ? std::optional(index.at("augment")) : std::nullopt;

  std::vector<Sample> samples;
  std::map<std::pair<std::string, std::uint64_t>, std::size_t> first_line;
  for (std::size_t ln = 1; ln < lines.size(); ++ln) {
    if (detail::trim(lines[ln]).empty()) continue;
    const auto line_no = ln + 1;
    const auto where = origin + ":" + std::to_string(line_no);
    const auto fields = detail::split_csv(lines[ln]);
    if (fields.size() != header.size())
      fail(Errc::parse_error, where + ": expected " + std::to_string(header.size()) + " fields, got " +
                                  std::to_string(fields.size()));
    auto field = [&](const std::string& col) { return detail::trim(fields[index.at(col)]); };
    auto number = [&](const std::string& col) -> std::optional<double> {
      const auto f = field(col);
      if (f.empty()) return std::nullopt;
      double v = 0;
      const auto [ptr, ec] = std::from_chars(f.data(), f.data() + f.size(), v);
      if (ec != std::errc() || ptr != f.data() + f.size())
        fail(Errc::parse_error, where + ": column '" + col + "' is not a number: '" + std::string(f) + "'");
      return v;
    };

    Sample s;
    s.path = std::string(field("path"));
    s.video = std::string(field("video"));
    if (s.path.empty()) fail(Errc::parse_error, where + ": empty path");
    if (s.video.empty()) fail(Errc::parse_error, where + ": empty video id");
    const auto frame = field("frame");
    const auto [fptr, fec] = std::from_chars(frame.data(), frame.data() + frame.size(), s.frame);
    if (frame.empty() || fec != std::errc() || fptr != frame.data() + frame.size())
      fail(Errc::parse_error, where + ": frame must be a non-negative integer, got '" + std::string(frame) + "'");
    s.valence = number("valence");
    s.arousal = number("arousal");
    if (const auto e = field("expression"); !e.empty()) {
      int k = -1;
      const auto [eptr, eec] = std::from_chars(e.data(), e.data() + e.size(), k);
      if (eec != std::errc() || eptr != e.data() + e.size() || k < 0 || k >= num_classes)
        fail(Errc::parse_error, where + ": expression must be a class id in [0," + std::to_string(num_classes) +
                                    "), got '" + std::string(e) + "'");
      s.expression = k;
    }
    if (augment_col) {
      if (const auto a = detail::trim(fields[*augment_col]); !a.empty()) {
        try {
          s.augment = parse_recipe(a);
        } catch (const Error& err) {
          fail(Errc::parse_error, where + ": " + err.what());
        }
      }
    }
    if (!s.augmented()) {
      const auto [it, inserted] = first_line.emplace(std::pair{s.video, s.frame}, line_no);
      if (!inserted)
        fail(Errc::duplicate_sample, origin + ": (" + s.video + "," + std::to_string(s.frame) + ") appears on lines " +
                                         std::to_string(it->second) + " and " + std::to_string(line_no));
    }
    samples.push_back(std::move(s));
  }
  return samples;
}

inline std::vector<Sample> parse_manifest(const std::string& path, int num_classes = kDefaultClasses) {
  return parse_manifest_text(detail::read_file_bytes(path), path, num_classes);
}

/// Serializes samples; the augment column is written only when some row is augmented.
inline std::string format_manifest(const std::vector<Sample>& samples) {
  const bool with_augment = std::any_of(samples.begin(), samples.end(), [](const Sample& s) { return s.augmented(); });
  std::string out = "path,video,frame,valence,arousal,expression";
  out += with_augment ? ",augment\n" : "\n";
  for (const auto& s : samples) {
    out += s.path + "," + s.video + "," + std::to_string(s.frame) + ",";
    out += (s.valence ? detail::shortest(*s.valence) : "") + ",";
    out += (s.arousal ? detail::shortest(*s.arousal) : "") + ",";
    out += s.expression ? std::to_string(*s.expression) : "";
    if (with_augment) out += "," + (s.augment ? to_string(*s.augment) : "");
    out += "\n";
  }
  return out;
}

inline void write_manifest(const std::string& path, const std::vector<Sample>& samples) {
  detail::write_file_bytes(path, format_manifest(samples));
}

// ---------------------------------------------------------------------------
// Coherence filter

enum class FilterRule : int { invalid_range = 0, happy_negative, sad_positive, neutral_extreme };
inline constexpr std::size_t kFilterRules = 4;

inline std::string to_string(FilterRule r) {
  switch (r) {
    case FilterRule::invalid_range: return "invalid-range";
    case FilterRule::happy_negative: return "happy-negative";
    case FilterRule::sad_positive: return "sad-positive";
    case FilterRule::neutral_extreme: return "neutral-extreme";
  }
  return "?";
}

struct FilterThresholds {
  double neutral_threshold = 0.5;
  bool neutral_requires_both = true;  // AND over |valence|, |arousal|; false gives OR
  int neutral = Neutral;
  int happiness = Happiness;
  int sadness = Sadness;
};

struct FilterReport {
  std::size_t input = 0;
  std::size_t kept = 0;
  std::array<std::size_t, kFilterRules> removed{};

  std::size_t removed_total() const { return removed[0] + removed[1] + removed[2] + removed[3]; }
  std::size_t removed_by(FilterRule r) const { return removed[static_cast<std::size_t>(r)]; }
};

struct FilterResult {
  std::vector<Sample> kept;
  FilterReport report;
};

/// First matching rule for a sample, or nullopt when it is kept.
inline std::optional<FilterRule> filter_rule(const Sample& s, const FilterThresholds& t = {}) {
  auto invalid = [](const std::optional<double>& v) { return v && !(*v >= -1.0 && *v <= 1.0); };
  if (invalid(s.valence) || invalid(s.arousal)) return FilterRule::invalid_range;
  if (!s.expression) return std::nullopt;
  const int e = *s.expression;
  if (e == t.happiness && s.valence && *s.valence < 0) return FilterRule::happy_negative;
  if (e == t.sadness && s.valence && *s.valence > 0) return FilterRule::sad_positive;
  if (e == t.neutral) {
    const bool v_hi = s.valence && std::abs(*s.valence) > t.neutral_threshold;
    const bool a_hi = s.arousal && std::abs(*s.arousal) > t.neutral_threshold;
    if (t.neutral_requires_both ? (v_hi && a_hi) : (v_hi || a_hi)) return FilterRule::neutral_extreme;
  }
  return std::nullopt;
}

inline FilterResult filter_coherence(const std::vector<Sample>& samples, const FilterThresholds& t = {}) {
  FilterResult r;
  r.report.input = samples.size();
  for (const auto& s : samples) {
    if (const auto rule = filter_rule(s, t))
      ++r.report.removed[static_cast<std::size_t>(*rule)];
    else
      r.kept.push_back(s);
  }
  r.report.kept = r.kept.size();
  return r;
}

inline std::string format_filter_report(const FilterReport& r) {
  std::ostringstream os;
  os << "input    " << r.input << "\n";
  os << "kept     " << r.kept << "\n";
  for (std::size_t i = 0; i < kFilterRules; ++i) {
    char line[64];
    std::snprintf(line, sizeof line, "removed  %-16s %zu\n", to_string(static_cast<FilterRule>(i)).c_str(), r.removed[i]);
    os << line;
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Binning and balancing

inline constexpr int kValenceBins = 21;

/// Bin index round((v + 1) * 10), half away from zero; bins centred at -1.0, -0.9, ..., 1.0.
inline int bin_valence(double v) {
  require(v >= -1.0 && v <= 1.0, Errc::invalid_argument, "bin_valence: value " + std::to_string(v) + " outside [-1,1]");
  return std::clamp(static_cast<int>(std::round((v + 1.0) * 10.0)), 0, kValenceBins - 1);
}

inline double bin_center(int bin) { return -1.0 + 0.1 * bin; }

namespace detail {

// Appends augmented copies so that every group reaches the largest group's
// size. Groups are visited in ascending key order; sources cycle round-robin
// over each group's non-augmented members in input order.
inline std::vector<Sample> equalize(const std::vector<Sample>& samples, const std::vector<std::optional<int>>& keys,
                                    std::uint64_t seed) {
  std::map<int, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < samples.size(); ++i)
    if (keys[i]) groups[*keys[i]].push_back(i);
  std::size_t target = 0;
  for (const auto& [k, members] : groups) target = std::max(target, members.size());

  std::vector<Sample> out = samples;
  std::mt19937_64 rng(seed);
  for (const auto& [k, members] : groups) {
    std::vector<std::size_t> sources;
    for (auto i : members)
      if (!samples[i].augmented()) sources.push_back(i);
    if (sources.empty()) sources = members;
    for (std::size_t n = members.size(), j = 0; n < target; ++n, ++j) {
      Sample dup = samples[sources[j % sources.size()]];
      dup.augment = draw_recipe(rng);
      out.push_back(std::move(dup));
    }
  }
  return out;
}

}  // namespace detail

/// Oversamples every expression class up to the largest class count.
/// Unlabeled samples pass through untouched.
inline std::vector<Sample> balance_categorical(const std::vector<Sample>& samples, std::uint64_t seed,
                                               int num_classes = kDefaultClasses) {
  std::vector<std::size_t> counts(static_cast<std::size_t>(num_classes), 0);
  std::vector<std::optional<int>> keys;
  keys.reserve(samples.size());
  for (const auto& s : samples) {
    if (s.expression) {
      require(*s.expression >= 0 && *s.expression < num_classes, Errc::invalid_argument,
              "balance: class " + std::to_string(*s.expression) + " outside [0," + std::to_string(num_classes) + ")");
      ++counts[static_cast<std::size_t>(*s.expression)];
    }
    keys.push_back(s.expression);
  }
  std::string empty;
  for (int k = 0; k < num_classes; ++k)
    if (!counts[static_cast<std::size_t>(k)]) empty += (empty.empty() ? "" : ", ") + class_name(k);
  if (!empty.empty()) fail(Errc::empty_class, "balance: no samples for class(es) " + empty);
  return detail::equalize(samples, keys, seed);
}

/// Oversamples occupied valence bins up to the fullest bin; empty bins are
/// skipped and samples without valence pass through.
inline std::vector<Sample> balance_dimensional(const std::vector<Sample>& samples, std::uint64_t seed) {
  std::vector<std::optional<int>> keys;
  keys.reserve(samples.size());
  for (const auto& s : samples) keys.push_back(s.valence ? std::optional(bin_valence(*s.valence)) : std::nullopt);
  return detail::equalize(samples, keys, seed);
}

// ---------------------------------------------------------------------------
// Clips

struct Clip {
  std::vector<Sample> frames;

  const Sample& label() const { return frames.back(); }
};

/// Non-overlapping windows of strictly consecutive frames within each video.
/// Augmented rows are ignored; input order does not matter.
inline std::vector<Clip> window_sequences(const std::vector<Sample>& samples, std::size_t length = kClipLength,
                                          std::size_t stride = kClipLength) {
  require(length >= 1 && stride >= 1, Errc::invalid_argument, "window: length and stride must be positive");
  std::vector<const Sample*> order;
  for (const auto& s : samples)
    if (!s.augmented()) order.push_back(&s);
  std::stable_sort(order.begin(), order.end(), [](const Sample* a, const Sample* b) {
    return std::tie(a->video, a->frame) < std::tie(b->video, b->frame);
  });
  std::vector<Clip> clips;
  for (std::size_t run = 0; run < order.size();) {
    std::size_t end = run + 1;
    while (end < order.size() && order[end]->video == order[run]->video && order[end]->frame == order[end - 1]->frame + 1)
      ++end;
    for (std::size_t start = run; start + length <= end; start += stride) {
      Clip c;
      for (std::size_t i = start; i < start + length; ++i) c.frames.push_back(*order[i]);
      clips.push_back(std::move(c));
    }
    run = end;
  }
  return clips;
}

// ---------------------------------------------------------------------------
// Label distribution

struct DistributionReport {
  std::vector<std::size_t> class_counts;
  std::size_t unlabeled_expression = 0;
  std::array<std::size_t, kValenceBins> valence{};
  std::array<std::size_t, kValenceBins> arousal{};
  std::size_t valence_invalid = 0, arousal_invalid = 0;
  std::size_t valence_unlabeled = 0, arousal_unlabeled = 0;
  std::size_t total = 0;
};

inline DistributionReport stats(const std::vector<Sample>& samples, int num_classes = kDefaultClasses) {
  DistributionReport r;
  r.class_counts.assign(static_cast<std::size_t>(num_classes), 0);
  r.total = samples.size();
  auto tally = [](const std::optional<double>& v, auto& hist, std::size_t& invalid, std::size_t& unlabeled) {
    if (!v)
      ++unlabeled;
    else if (*v >= -1.0 && *v <= 1.0)
      ++hist[static_cast<std::size_t>(bin_valence(*v))];
    else
      ++invalid;
  };
  for (const auto& s : samples) {
    if (s.expression && *s.expression >= 0 && *s.expression < num_classes)
      ++r.class_counts[static_cast<std::size_t>(*s.expression)];
    else
      ++r.unlabeled_expression;
    tally(s.valence, r.valence, r.valence_invalid, r.valence_unlabeled);
    tally(s.arousal, r.arousal, r.arousal_invalid, r.arousal_unlabeled);
  }
  return r;
}

/// `label,count` rows; the unlabeled row appears only when nonzero.
inline std::string class_counts_csv(const DistributionReport& r) {
  std::string out = "label,count\n";
  for (std::size_t k = 0; k < r.class_counts.size(); ++k)
    out += class_name(static_cast<int>(k)) + "," + std::to_string(r.class_counts[k]) + "\n";
  if (r.unlabeled_expression) out += "unlabeled," + std::to_string(r.unlabeled_expression) + "\n";
  return out;
}

/// `bin_center,valence_count,arousal_count` rows; invalid and unlabeled rows
/// appear only when nonzero.
inline std::string histogram_csv(const DistributionReport& r) {
  std::string out = "bin_center,valence_count,arousal_count\n";
  char buf[64];
  for (int b = 0; b < kValenceBins; ++b) {
    std::snprintf(buf, sizeof buf, "%.1f,%zu,%zu\n", bin_center(b) + 0.0, r.valence[static_cast<std::size_t>(b)],
                  r.arousal[static_cast<std::size_t>(b)]);
    out += buf;
  }
  if (r.valence_invalid || r.arousal_invalid)
    out += "invalid," + std::to_string(r.valence_invalid) + "," + std::to_string(r.arousal_invalid) + "\n";
  if (r.valence_unlabeled || r.arousal_unlabeled)
    out += "unlabeled," + std::to_string(r.valence_unlabeled) + "," + std::to_string(r.arousal_unlabeled) + "\n";
  return out;
}

inline std::string format_stats(const DistributionReport& r) {
  std::ostringstream os;
  char buf[96];
  std::size_t peak = 1;
  for (auto c : r.class_counts) peak = std::max(peak, c);
  os << "samples " << r.total << "\n\nexpression\n";
  auto bar = [](std::size_t n, std::size_t max) { return std::string(max ? n * 40 / max : 0, '#'); };
  for (std::size_t k = 0; k < r.class_counts.size(); ++k) {
    std::snprintf(buf, sizeof buf, "  %-10s %8zu ", class_name(static_cast<int>(k)).c_str(), r.class_counts[k]);
    os << buf << bar(r.class_counts[k], peak) << "\n";
  }
  if (r.unlabeled_expression) {
    std::snprintf(buf, sizeof buf, "  %-10s %8zu\n", "unlabeled", r.unlabeled_expression);
    os << buf;
  }
  os << "\n  bin     valence  arousal\n";
  for (int b = 0; b < kValenceBins; ++b) {
    std::snprintf(buf, sizeof buf, "  %+4.1f  %8zu %8zu\n", bin_center(b) + 0.0, r.valence[static_cast<std::size_t>(b)],
                  r.arousal[static_cast<std::size_t>(b)]);
    os << buf;
  }
  if (r.valence_invalid || r.arousal_invalid) {
    std::snprintf(buf, sizeof buf, "  %-5s %8zu %8zu\n", "inv", r.valence_invalid, r.arousal_invalid);
    os << buf;
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Loading

/// Relative paths resolve against base_dir (usually the manifest's directory).
inline std::string resolve_path(const std::string& base_dir, const std::string& path) {
  const std::filesystem::path p(path);
  if (p.is_absolute() || base_dir.empty()) return path;
  return (std::filesystem::path(base_dir) / p).string();
}

inline std::string manifest_dir(const std::string& manifest_path) {
  return std::filesystem::path(manifest_path).parent_path().string();
}

inline Tensorf load_sample_image(const Sample& s, const std::string& base_dir) {
  auto img = decode_image(resolve_path(base_dir, s.path));
  return s.augment ? augment(img, *s.augment) : img;
}

/// Decodes (and augments) images into a [N,120,120,3] batch. Decoding runs on
/// worker threads; placement is by index, so the result is order-stable.
inline Tensorf load_batch(const std::vector<const Sample*>& samples, const std::string& base_dir) {
  require(!samples.empty(), Errc::empty_dataset, "load_batch: no samples");
  Tensorf batch({samples.size(), kImageSize, kImageSize, kImageChannels});
  parallel_for(samples.size(), [&](std::size_t i) {
    const auto img = load_sample_image(*samples[i], base_dir);
    std::copy(img.values().begin(), img.values().end(), batch.data() + i * kImageValues);
  });
  return batch;
}

/// Decodes clips into a [N,10,120,120,3] batch.
inline Tensorf load_clip_batch(const std::vector<const Clip*>& clips, const std::string& base_dir) {
  require(!clips.empty(), Errc::empty_dataset, "load_clip_batch: no clips");
  const std::size_t steps = clips.front()->frames.size();
  Tensorf batch({clips.size(), steps, kImageSize, kImageSize, kImageChannels});
  parallel_for(clips.size() * steps, [&](std::size_t i) {
    const auto& clip = *clips[i / steps];
    require(clip.frames.size() == steps, Errc::shape_mismatch, "load_clip_batch: clips differ in length");
    const auto img = load_sample_image(clip.frames[i % steps], base_dir);
    std::copy(img.values().begin(), img.values().end(), batch.data() + i * kImageValues);
  });
  return batch;
}

}  // namespace fckit
