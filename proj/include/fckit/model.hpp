#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "fckit/error.hpp"
#include "fckit/ops.hpp"
#include "fckit/tensor.hpp"

namespace fckit {

inline constexpr std::size_t kImageSize = 120;
inline constexpr std::size_t kImageChannels = 3;
inline constexpr std::size_t kTrunkWidth = 500;
inline constexpr std::size_t kLstmUnits = 100;
inline constexpr std::size_t kSequenceDenseUnits = 100;
inline constexpr std::size_t kClipLength = 10;
inline constexpr int kDefaultClasses = 7;

/// Convolution widths per pooling block.
inline const std::vector<std::vector<std::size_t>>& channel_plan() {
  static const std::vector<std::vector<std::size_t>> plan{{16, 16}, {32, 32}, {64, 64, 64}, {80, 80, 80}};
  return plan;
}

enum class Variant { frame, sequence };
enum class FcsWiring { sequential, concat };
enum class FcsMode { fine_tune, freeze_trunk };
enum class LayerKind { conv, pool, flatten, dense, lstm, head };
enum class Activation { none, relu, tanh, softmax };

inline const char* to_string(LayerKind k) {
  switch (k) {
    case LayerKind::conv: return "conv3x3";
    case LayerKind::pool: return "maxpool2";
    case LayerKind::flatten: return "flatten";
    case LayerKind::dense: return "dense";
    case LayerKind::lstm: return "lstm";
    case LayerKind::head: return "head";
  }
  return "?";
}

inline const char* to_string(Activation a) {
  switch (a) {
    case Activation::none: return "-";
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
    case Activation::softmax: return "softmax";
  }
  return "?";
}

struct LayerDesc {
  LayerKind kind;
  std::string name;
  Shape output;  // per sample (per frame for the trunk)
  Activation activation = Activation::none;
  std::vector<std::string> params;
};

template <typename T>
struct ParamTensor {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool trainable = true;
};

/// Ordered layer list plus named parameters for either network variant.
template <typename T>
class BasicModelGraph {
 public:
  BasicModelGraph() = default;
  BasicModelGraph(Variant variant, int num_classes, FcsWiring wiring = FcsWiring::sequential)
      : variant_(variant), num_classes_(num_classes), wiring_(wiring) {}

  Variant variant() const noexcept { return variant_; }
  int num_classes() const noexcept { return num_classes_; }
  FcsWiring wiring() const noexcept { return wiring_; }

  const std::vector<LayerDesc>& layers() const noexcept { return layers_; }
  std::vector<ParamTensor<T>>& params() noexcept { return params_; }
  const std::vector<ParamTensor<T>>& params() const noexcept { return params_; }

  bool has_param(const std::string& name) const { return index_.contains(name); }

  ParamTensor<T>& param(const std::string& name) {
    auto it = index_.find(name);
    require(it != index_.end(), Errc::unknown_tensor, "no parameter named '" + name + "'");
    return params_[it->second];
  }
  const ParamTensor<T>& param(const std::string& name) const { return const_cast<BasicModelGraph*>(this)->param(name); }

  ParamTensor<T>& add_param(const std::string& name, Shape shape) {
    require(!index_.contains(name), Errc::invariant, "duplicate parameter name '" + name + "'");
    index_.emplace(name, params_.size());
    Tensor<T> zeros(shape);
    params_.push_back({name, zeros, zeros, true});
    return params_.back();
  }

  void add_layer(LayerDesc d) { layers_.push_back(std::move(d)); }

  std::size_t count_layers(LayerKind kind) const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += (l.kind == kind);
    return n;
  }

  void zero_grads() {
    for (auto& p : params_) p.grad.fill(T{0});
  }

 private:
  Variant variant_ = Variant::frame;
  int num_classes_ = kDefaultClasses;
  FcsWiring wiring_ = FcsWiring::sequential;
  std::vector<LayerDesc> layers_;
  std::vector<ParamTensor<T>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

using ModelGraph = BasicModelGraph<float>;

/// Converts every parameter to another scalar type (e.g. double for checks).
template <typename U, typename T>
BasicModelGraph<U> model_cast(const BasicModelGraph<T>& m) {
  BasicModelGraph<U> out(m.variant(), m.num_classes(), m.wiring());
  for (const auto& l : m.layers()) out.add_layer(l);
  for (const auto& p : m.params()) {
    auto& q = out.add_param(p.name, p.value.shape());
    q.value = p.value.template cast<U>();
    q.trainable = p.trainable;
  }
  return out;
}

template <typename T>
std::size_t count_params(const BasicModelGraph<T>& m) {
  std::size_t n = 0;
  for (const auto& p : m.params()) n += p.value.size();
  return n;
}

template <typename T>
std::size_t count_trainable_params(const BasicModelGraph<T>& m) {
  std::size_t n = 0;
  for (const auto& p : m.params())
    if (p.trainable) n += p.value.size();
  return n;
}

inline std::string conv_name(std::size_t i) { return "conv" + std::to_string(i); }

inline bool is_trunk_param(const std::string& name) {
  return name.rfind("conv", 0) == 0 || name.rfind("trunk.", 0) == 0;
}

inline const std::array<std::string, 3>& head_names() {
  static const std::array<std::string, 3> names{"head.arousal", "head.valence", "head.expression"};
  return names;
}

namespace detail {

// Uniform in +-sqrt(gain / fan_in); gain 6 ahead of ReLU, 3 otherwise.
inline void init_uniform(Tensorf& t, std::size_t fan_in, double gain, std::mt19937_64& rng) {
  const double limit = std::sqrt(gain / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> d(-limit, limit);
  for (auto& v : t.values()) v = static_cast<float>(d(rng));
}

inline void add_heads(ModelGraph& m, std::size_t in, std::mt19937_64& rng) {
  const auto K = static_cast<std::size_t>(m.num_classes());
  const std::array<std::size_t, 3> widths{1, 1, K};
  const std::array<Activation, 3> acts{Activation::tanh, Activation::tanh, Activation::softmax};
  for (std::size_t h = 0; h < 3; ++h) {
    const auto& name = head_names()[h];
    auto& w = m.add_param(name + ".w", {in, widths[h]});
    init_uniform(w.value, in, 3.0, rng);
    m.add_param(name + ".b", {widths[h]});
    m.add_layer({LayerKind::head, name, {widths[h]}, acts[h], {name + ".w", name + ".b"}});
  }
}

inline void add_trunk(ModelGraph& m, std::mt19937_64& rng) {
  std::size_t in_ch = kImageChannels, size = kImageSize, idx = 1;
  for (std::size_t block = 0; block < channel_plan().size(); ++block) {
    for (std::size_t out_ch : channel_plan()[block]) {
      const auto name = conv_name(idx++);
      auto& w = m.add_param(name + ".w", {3, 3, in_ch, out_ch});
      init_uniform(w.value, 9 * in_ch, 6.0, rng);
      m.add_param(name + ".b", {out_ch});
      m.add_layer({LayerKind::conv, name, {size, size, out_ch}, Activation::relu, {name + ".w", name + ".b"}});
      in_ch = out_ch;
    }
    size /= 2;
    m.add_layer({LayerKind::pool, "pool" + std::to_string(block + 1), {size, size, in_ch}, Activation::none, {}});
  }
  const std::size_t flat = size * size * in_ch;
  m.add_layer({LayerKind::flatten, "flatten", {flat}, Activation::none, {}});
  auto& w = m.add_param("trunk.w", {flat, kTrunkWidth});
  init_uniform(w.value, flat, 6.0, rng);
  m.add_param("trunk.b", {kTrunkWidth});
  m.add_layer({LayerKind::dense, "trunk", {kTrunkWidth}, Activation::relu, {"trunk.w", "trunk.b"}});
}

inline const std::array<const char*, 4>& gate_suffix() {
  static const std::array<const char*, 4> s{"i", "f", "g", "o"};
  return s;
}

}  // namespace detail

/// Frame-level network: ten 3x3 convolutions in four pooled blocks, a
/// 500-unit ReLU trunk, and arousal / valence / expression heads.
inline ModelGraph build_facechannel(int num_classes = kDefaultClasses, std::uint64_t seed = 1) {
  require(num_classes >= 2, Errc::invalid_argument, "class count must be >= 2");
  std::mt19937_64 rng(seed);
  ModelGraph m(Variant::frame, num_classes);
  detail::add_trunk(m, rng);
  detail::add_heads(m, kTrunkWidth, rng);
  return m;
}

/// Sequence network built on a frame network: the trunk is copied from `base`,
/// then LSTM(100) over the 10 per-frame trunk vectors, dense(100, ReLU) and
/// freshly initialized heads.
inline ModelGraph build_facechannels(const ModelGraph& base, FcsMode mode = FcsMode::fine_tune, std::uint64_t seed = 2,
                                     FcsWiring wiring = FcsWiring::sequential) {
  require(base.variant() == Variant::frame, Errc::invalid_argument, "FC-S must be built from a frame (FC) model");
  std::mt19937_64 rng(seed);
  ModelGraph m(Variant::sequence, base.num_classes(), wiring);
  for (const auto& l : base.layers())
    if (l.kind != LayerKind::head) m.add_layer(l);
  for (const auto& p : base.params()) {
    if (!is_trunk_param(p.name)) continue;
    auto& q = m.add_param(p.name, p.value.shape());
    q.value = p.value;
    q.trainable = (mode == FcsMode::fine_tune);
  }
  std::vector<std::string> lstm_params;
  for (const char* g : detail::gate_suffix()) {
    auto& w = m.add_param(std::string("lstm.w_") + g, {kTrunkWidth + kLstmUnits, kLstmUnits});
    detail::init_uniform(w.value, kTrunkWidth + kLstmUnits, 3.0, rng);
    lstm_params.push_back(w.name);
  }
  for (const char* g : detail::gate_suffix()) {
    auto& b = m.add_param(std::string("lstm.b_") + g, {kLstmUnits});
    if (std::string(g) == "f") b.value.fill(1.0f);
    lstm_params.push_back(b.name);
  }
  m.add_layer({LayerKind::lstm, "lstm", {kLstmUnits}, Activation::none, lstm_params});
  auto& w = m.add_param("seq.w", {kLstmUnits, kSequenceDenseUnits});
  detail::init_uniform(w.value, kLstmUnits, 6.0, rng);
  m.add_param("seq.b", {kSequenceDenseUnits});
  m.add_layer({LayerKind::dense, "seq", {kSequenceDenseUnits}, Activation::relu, {"seq.w", "seq.b"}});
  const std::size_t head_in = wiring == FcsWiring::concat ? kLstmUnits + kSequenceDenseUnits : kSequenceDenseUnits;
  detail::add_heads(m, head_in, rng);
  return m;
}

// ---------------------------------------------------------------------------
// forward / backward

template <typename T>
struct Predictions {
  Tensor<T> arousal;  // (B,1), tanh
  Tensor<T> valence;  // (B,1), tanh
  Tensor<T> classes;  // (B,K), softmax

  std::size_t batch() const { return arousal.empty() ? 0 : arousal.dim(0); }
};

struct PredictionTriple {
  float arousal = 0.0f;
  float valence = 0.0f;
  std::vector<float> class_distribution;

  int predicted_class() const {
    return static_cast<int>(std::max_element(class_distribution.begin(), class_distribution.end()) -
                            class_distribution.begin());
  }
};

template <typename T>
std::vector<PredictionTriple> to_triples(const Predictions<T>& p) {
  const std::size_t B = p.batch(), K = p.classes.dim(1);
  std::vector<PredictionTriple> out(B);
  for (std::size_t b = 0; b < B; ++b) {
    out[b].arousal = static_cast<float>(p.arousal[b]);
    out[b].valence = static_cast<float>(p.valence[b]);
    out[b].class_distribution.assign(p.classes.data() + b * K, p.classes.data() + (b + 1) * K);
  }
  return out;
}

/// Activations kept for the backward pass.
template <typename T>
struct ForwardCache {
  std::size_t batch = 0;
  std::vector<Tensor<T>> conv_inputs;   // per conv layer
  std::vector<Tensor<T>> conv_outputs;  // post-ReLU
  std::vector<Shape> pool_input_shapes;
  std::vector<std::vector<std::uint32_t>> pool_argmax;
  Tensor<T> flat;       // (F, 3920) with F = frames
  Tensor<T> trunk_out;  // (F, 500) post-ReLU
  // sequence part
  std::vector<ops::LstmStepCache<T>> lstm_steps;
  Tensor<T> seq_out;   // (B,100) post-ReLU
  Tensor<T> head_in;   // (B, head width)
  Predictions<T> outputs;
};

namespace detail {

template <typename T>
Tensor<T> trunk_forward(const BasicModelGraph<T>& m, Tensor<T> x, ForwardCache<T>* cache) {
  std::size_t conv_idx = 1;
  for (const auto& block : channel_plan()) {
    for (std::size_t i = 0; i < block.size(); ++i) {
      const auto name = conv_name(conv_idx++);
      auto y = ops::relu(ops::conv2d(x, m.param(name + ".w").value, m.param(name + ".b").value));
      if (cache) {
        cache->conv_inputs.push_back(std::move(x));
        cache->conv_outputs.push_back(y);
      }
      x = std::move(y);
    }
    auto pooled = ops::maxpool2(x);
    if (cache) {
      cache->pool_input_shapes.push_back(x.shape());
      cache->pool_argmax.push_back(std::move(pooled.argmax));
    }
    x = std::move(pooled.output);
  }
  const std::size_t frames = x.dim(0);
  x.reshape({frames, x.size() / frames});
  auto trunk = ops::relu(ops::dense(x, m.param("trunk.w").value, m.param("trunk.b").value));
  if (cache) {
    cache->flat = std::move(x);
    cache->trunk_out = trunk;
  }
  return trunk;
}

template <typename T>
Predictions<T> heads_forward(const BasicModelGraph<T>& m, const Tensor<T>& features) {
  Predictions<T> p;
  p.arousal = ops::tanh_act(ops::dense(features, m.param("head.arousal.w").value, m.param("head.arousal.b").value));
  p.valence = ops::tanh_act(ops::dense(features, m.param("head.valence.w").value, m.param("head.valence.b").value));
  p.classes =
      ops::softmax(ops::dense(features, m.param("head.expression.w").value, m.param("head.expression.b").value));
  return p;
}

template <typename T>
ops::LstmParamsRef<T> lstm_params(const BasicModelGraph<T>& m) {
  ops::LstmParamsRef<T> ref;
  for (std::size_t k = 0; k < 4; ++k) {
    ref.weight[k] = &m.param(std::string("lstm.w_") + gate_suffix()[k]).value;
    ref.bias[k] = &m.param(std::string("lstm.b_") + gate_suffix()[k]).value;
  }
  return ref;
}

template <typename T>
void check_frames(const Tensor<T>& x, std::size_t rank_expected) {
  require(x.rank() == rank_expected, Errc::shape_mismatch, "unexpected input rank " + shape_str(x.shape()));
  const auto& s = x.shape();
  const std::size_t r = s.size();
  require(s[r - 3] == kImageSize && s[r - 2] == kImageSize && s[r - 1] == kImageChannels, Errc::shape_mismatch,
          "frames must be 120x120x3, got " + shape_str(s));
}

template <typename T>
Tensor<T> concat_columns(const Tensor<T>& a, const Tensor<T>& b) {
  const std::size_t B = a.dim(0), na = a.dim(1), nb = b.dim(1);
  Tensor<T> out({B, na + nb});
  for (std::size_t r = 0; r < B; ++r) {
    std::copy(a.data() + r * na, a.data() + (r + 1) * na, out.data() + r * (na + nb));
    std::copy(b.data() + r * nb, b.data() + (r + 1) * nb, out.data() + r * (na + nb) + na);
  }
  return out;
}

}  // namespace detail

/// Forward pass on a (B,120,120,3) batch. Pass a cache to enable backward.
template <typename T>
Predictions<T> forward_frame(const BasicModelGraph<T>& m, const Tensor<T>& batch, ForwardCache<T>* cache = nullptr) {
  require(m.variant() == Variant::frame, Errc::invalid_argument, "forward_frame needs a frame (FC) model");
  detail::check_frames(batch, 4);
  if (cache) *cache = ForwardCache<T>{};
  auto features = detail::trunk_forward(m, batch, cache);
  auto p = detail::heads_forward(m, features);
  if (cache) {
    cache->batch = batch.dim(0);
    cache->head_in = std::move(features);
    cache->outputs = p;
  }
  return p;
}

/// Forward pass on (B,10,120,120,3) clips. Trunk weights are shared across
/// frames and the heads read the final LSTM step.
template <typename T>
Predictions<T> forward_sequence(const BasicModelGraph<T>& m, const Tensor<T>& clips, ForwardCache<T>* cache = nullptr) {
  require(m.variant() == Variant::sequence, Errc::invalid_argument, "forward_sequence needs a sequence (FC-S) model");
  detail::check_frames(clips, 5);
  require(clips.dim(1) == kClipLength, Errc::shape_mismatch,
          "clips must hold exactly 10 frames, got " + std::to_string(clips.dim(1)));
  if (cache) *cache = ForwardCache<T>{};
  const std::size_t B = clips.dim(0), steps = kClipLength;
  auto trunk = detail::trunk_forward(m, clips.reshaped({B * steps, kImageSize, kImageSize, kImageChannels}), cache);

  const auto params = detail::lstm_params(m);
  Tensor<T> h({B, kLstmUnits}), c({B, kLstmUnits});
  for (std::size_t t = 0; t < steps; ++t) {
    Tensor<T> x({B, kTrunkWidth});
    for (std::size_t b = 0; b < B; ++b)
      std::copy_n(trunk.data() + (b * steps + t) * kTrunkWidth, kTrunkWidth, x.data() + b * kTrunkWidth);
    auto step = ops::lstm_step(x, h, c, params);
    h = step.h_next;
    c = step.c_next;
    if (cache) cache->lstm_steps.push_back(std::move(step));
  }
  auto seq = ops::relu(ops::dense(h, m.param("seq.w").value, m.param("seq.b").value));
  auto head_in = m.wiring() == FcsWiring::concat ? detail::concat_columns(h, seq) : seq;
  auto p = detail::heads_forward(m, head_in);
  if (cache) {
    cache->batch = B;
    cache->seq_out = std::move(seq);
    cache->head_in = std::move(head_in);
    cache->outputs = p;
  }
  return p;
}

template <typename T>
Predictions<T> forward(const BasicModelGraph<T>& m, const Tensor<T>& input, ForwardCache<T>* cache = nullptr) {
  return m.variant() == Variant::frame ? forward_frame(m, input, cache) : forward_sequence(m, input, cache);
}

/// Gradients of the loss with respect to the three head outputs. An empty
/// tensor marks a head that receives no gradient.
template <typename T>
struct OutputGrads {
  Tensor<T> arousal;
  Tensor<T> valence;
  Tensor<T> classes;
};

struct BackwardOptions {
  bool trunk = true;  // false skips everything below the heads' inputs that is trunk
};

namespace detail {

template <typename T>
void accumulate(ParamTensor<T>& p, const Tensor<T>& g) {
  for (std::size_t i = 0; i < g.size(); ++i) p.grad[i] += g[i];
}

template <typename T>
void trunk_backward(BasicModelGraph<T>& m, ForwardCache<T>& cache, Tensor<T> grad_trunk) {
  grad_trunk = ops::relu_backward(cache.trunk_out, std::move(grad_trunk));
  auto dg = ops::dense_backward(cache.flat, m.param("trunk.w").value, grad_trunk);
  accumulate(m.param("trunk.w"), dg.weight);
  accumulate(m.param("trunk.b"), dg.bias);
  Tensor<T> g = std::move(dg.input);
  std::size_t conv_idx = cache.conv_inputs.size();
  const auto& plan = channel_plan();
  for (std::size_t block = plan.size(); block-- > 0;) {
    const auto& pool_shape = cache.pool_input_shapes[block];
    const std::size_t frames = pool_shape[0];
    g.reshape({frames, pool_shape[1] / 2, pool_shape[2] / 2, pool_shape[3]});
    g = ops::maxpool2_backward(pool_shape, cache.pool_argmax[block], g);
    for (std::size_t i = plan[block].size(); i-- > 0;) {
      --conv_idx;
      const auto name = conv_name(conv_idx + 1);
      g = ops::relu_backward(cache.conv_outputs[conv_idx], std::move(g));
      auto cg = ops::conv2d_backward(cache.conv_inputs[conv_idx], m.param(name + ".w").value, g, conv_idx > 0);
      accumulate(m.param(name + ".w"), cg.kernels);
      accumulate(m.param(name + ".b"), cg.bias);
      g = std::move(cg.input);
    }
  }
}

}  // namespace detail

/// Reverse pass from head-output gradients; parameter gradients accumulate
/// into ParamTensor::grad. Heads with empty gradients are skipped entirely.
template <typename T>
void backward(BasicModelGraph<T>& m, ForwardCache<T>& cache, const OutputGrads<T>& grads, BackwardOptions opts = {}) {
  const std::size_t B = cache.batch;
  Tensor<T> d_features(cache.head_in.shape());
  const std::array<const Tensor<T>*, 3> upstream{&grads.arousal, &grads.valence, &grads.classes};
  const std::array<const Tensor<T>*, 3> outputs{&cache.outputs.arousal, &cache.outputs.valence, &cache.outputs.classes};
  bool any = false;
  for (std::size_t h = 0; h < 3; ++h) {
    if (upstream[h]->empty()) continue;
    any = true;
    const auto& name = head_names()[h];
    auto pre = h < 2 ? ops::tanh_backward(*outputs[h], *upstream[h]) : ops::softmax_backward(*outputs[h], *upstream[h]);
    auto dg = ops::dense_backward(cache.head_in, m.param(name + ".w").value, pre);
    detail::accumulate(m.param(name + ".w"), dg.weight);
    detail::accumulate(m.param(name + ".b"), dg.bias);
    for (std::size_t i = 0; i < d_features.size(); ++i) d_features[i] += dg.input[i];
  }
  if (!any) return;

  if (m.variant() == Variant::frame) {
    if (opts.trunk) detail::trunk_backward(m, cache, std::move(d_features));
    return;
  }

  // sequence: split head-input gradient into LSTM state and seq-dense parts
  Tensor<T> dh({B, kLstmUnits});
  Tensor<T> dseq({B, kSequenceDenseUnits});
  if (m.wiring() == FcsWiring::concat) {
    const std::size_t w = kLstmUnits + kSequenceDenseUnits;
    for (std::size_t b = 0; b < B; ++b) {
      std::copy_n(d_features.data() + b * w, kLstmUnits, dh.data() + b * kLstmUnits);
      std::copy_n(d_features.data() + b * w + kLstmUnits, kSequenceDenseUnits, dseq.data() + b * kSequenceDenseUnits);
    }
  } else {
    dseq = std::move(d_features);
  }
  dseq = ops::relu_backward(cache.seq_out, std::move(dseq));
  const auto& h_last = cache.lstm_steps.back().h_next;
  auto sg = ops::dense_backward(h_last, m.param("seq.w").value, dseq);
  detail::accumulate(m.param("seq.w"), sg.weight);
  detail::accumulate(m.param("seq.b"), sg.bias);
  for (std::size_t i = 0; i < dh.size(); ++i) dh[i] += sg.input[i];

  const auto params = detail::lstm_params(m);
  auto lg = ops::LstmGrads<T>::zeros(kTrunkWidth, kLstmUnits);
  Tensor<T> dc({B, kLstmUnits});
  const std::size_t steps = cache.lstm_steps.size();
  Tensor<T> d_trunk({B * steps, kTrunkWidth});
  for (std::size_t t = steps; t-- > 0;) {
    auto back = ops::lstm_step_backward(cache.lstm_steps[t], params, dh, dc, lg);
    for (std::size_t b = 0; b < B; ++b)
      std::copy_n(back.x.data() + b * kTrunkWidth, kTrunkWidth, d_trunk.data() + (b * steps + t) * kTrunkWidth);
    dh = std::move(back.h);
    dc = std::move(back.c);
  }
  for (std::size_t k = 0; k < 4; ++k) {
    detail::accumulate(m.param(std::string("lstm.w_") + detail::gate_suffix()[k]), lg.weight[k]);
    detail::accumulate(m.param(std::string("lstm.b_") + detail::gate_suffix()[k]), lg.bias[k]);
  }
  if (opts.trunk) detail::trunk_backward(m, cache, std::move(d_trunk));
}

}  // namespace fckit
