#pragma once

// MRF layers. A linear MRF layer computes softmax(C + W * R) where W holds
// log clique potentials W[k, l, dy, dx] (class k at the centre, class l at
// offset (dy, dx)). The centre tap of every MRF filter is structurally zero,
// so the update at pixel i never reads R at i.
//
// The nonlinear variant replaces W * R with
//   MRF filter (K -> F) -> leaky ReLU -> [1x1 (F -> F) -> leaky ReLU]* -> 1x1 (F -> K)
// Only the first layer has spatial extent.

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "mrfnet/error.hpp"
#include "mrfnet/tensor.hpp"

namespace mrfnet {

enum class Mode { generative, postprocess };
enum class Variant { linear, nonlinear };

inline const char* to_string(Mode m) { return m == Mode::generative ? "generative" : "postprocess"; }
inline const char* to_string(Variant v) { return v == Variant::linear ? "linear" : "nonlinear"; }

struct ModelConfig {
  std::size_t classes = 2;
  std::size_t features = 16;
  std::size_t kernel_size = 3;
  std::size_t hidden_layers = 1;
  double alpha = 0.1;
  Mode mode = Mode::generative;
  Variant variant = Variant::linear;
  bool bias_trainable = false;  // linear model only

  void validate() const {
    if (classes < 1) throw ConfigError("model: need at least one class");
    if (kernel_size % 2 == 0) throw ConfigError("model: kernel size must be odd");
    if (variant == Variant::nonlinear && features < 1) throw ConfigError("model: need at least one feature");
    if (!(alpha >= 0.0 && alpha < 1.0)) throw ConfigError("model: leaky ReLU slope must lie in [0, 1)");
  }

  std::vector<std::string> warnings() const {
    std::vector<std::string> w;
    if (variant == Variant::nonlinear && features < classes) {
      w.push_back("feature count " + std::to_string(features) + " is below the class count " +
                  std::to_string(classes));
    }
    return w;
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Convolution kernel whose centre tap is held at exactly zero.
class MrfFilterBank {
 public:
  MrfFilterBank() = default;
  MrfFilterBank(std::size_t kernel_size, std::size_t in_channels, std::size_t out_channels)
      : kernel_(kernel_size, kernel_size, in_channels, out_channels) {}

  /// Rejects kernels whose centre taps are not exactly zero.
  static MrfFilterBank from_kernel(Kernel k) {
    MrfFilterBank b;
    b.kernel_ = std::move(k);
    if (!b.center_is_zero()) throw ContractError("MRF filter has a nonzero centre tap");
    return b;
  }

  const Kernel& kernel() const noexcept { return kernel_; }
  std::span<double> weights() noexcept { return kernel_.weights(); }
  std::span<const double> weights() const noexcept { return kernel_.weights(); }
  std::size_t in_channels() const noexcept { return kernel_.in_channels(); }
  std::size_t out_channels() const noexcept { return kernel_.out_channels(); }
  std::size_t neighbours() const noexcept { return kernel_.taps() - 1; }

  double operator()(std::size_t o, std::size_t i, std::size_t ky, std::size_t kx) const {
    return kernel_(o, i, ky, kx);
  }
  void set(std::size_t o, std::size_t i, std::size_t ky, std::size_t kx, double v) {
    require(!is_center(ky, kx), "MRF filter: the centre tap cannot be set");
    kernel_(o, i, ky, kx) = v;
  }
  bool is_center(std::size_t ky, std::size_t kx) const noexcept {
    return ky == kernel_.center_y() && kx == kernel_.center_x();
  }

  void project_center() noexcept { project_center(kernel_); }
  static void project_center(Kernel& k) noexcept {
    for (std::size_t o = 0; o < k.out_channels(); ++o)
      for (std::size_t i = 0; i < k.in_channels(); ++i) k(o, i, k.center_y(), k.center_x()) = 0.0;
  }
  // Bitwise check: -0.0 does not count as zero here.
  bool center_is_zero() const noexcept {
    for (std::size_t o = 0; o < kernel_.out_channels(); ++o)
      for (std::size_t i = 0; i < kernel_.in_channels(); ++i) {
        const double v = kernel_(o, i, kernel_.center_y(), kernel_.center_x());
        if (v != 0.0 || std::signbit(v)) return false;
      }
    return true;
  }

  friend bool operator==(const MrfFilterBank&, const MrfFilterBank&) = default;

 private:
  Kernel kernel_;
};

/// 1x1 convolution with bias.
struct PointwiseLayer {
  Kernel kernel;
  std::vector<double> bias;

  PointwiseLayer() = default;
  PointwiseLayer(std::size_t in, std::size_t out) : kernel(1, 1, in, out), bias(out, 0.0) {}

  friend bool operator==(const PointwiseLayer&, const PointwiseLayer&) = default;
};

struct LinearMrfModel {
  MrfFilterBank filters;  // K -> K
  std::vector<double> bias;

  friend bool operator==(const LinearMrfModel&, const LinearMrfModel&) = default;
};

struct NonlinearMrfNet {
  MrfFilterBank first;  // K -> F
  std::vector<PointwiseLayer> hidden;
  PointwiseLayer final;  // F -> K
  double alpha = 0.1;

  friend bool operator==(const NonlinearMrfNet&, const NonlinearMrfNet&) = default;
};

/// A named, trainable parameter block.
struct ParamGroup {
  std::string name;
  std::span<double> values;
  bool mrf_filter = false;
};

class MrfModel {
 public:
  MrfModel() = default;

  /// All-zero parameters (the identity refinement softmax(C)).
  static MrfModel zeros(const ModelConfig& cfg) {
    cfg.validate();
    MrfModel m;
    m.config_ = cfg;
    const std::size_t k = cfg.classes;
    if (cfg.variant == Variant::linear) {
      m.net_ = LinearMrfModel{MrfFilterBank(cfg.kernel_size, k, k), std::vector<double>(k, 0.0)};
    } else {
      NonlinearMrfNet net;
      net.first = MrfFilterBank(cfg.kernel_size, k, cfg.features);
      for (std::size_t h = 0; h < cfg.hidden_layers; ++h) net.hidden.emplace_back(cfg.features, cfg.features);
      net.final = PointwiseLayer(cfg.features, k);
      net.alpha = cfg.alpha;
      m.net_ = std::move(net);
    }
    return m;
  }

  /// Default initialisation: uniform(-s, s) fan-in scaling for every layer
  /// except the last, which starts at zero.
  static MrfModel initialize(const ModelConfig& cfg, std::uint64_t seed) {
    MrfModel m = zeros(cfg);
    if (cfg.variant == Variant::linear) return m;
    std::mt19937_64 rng(seed);
    auto& net = std::get<NonlinearMrfNet>(m.net_);
    const double s1 = 1.0 / std::sqrt(static_cast<double>(net.first.neighbours() * cfg.classes));
    std::uniform_real_distribution<double> u1(-s1, s1);
    for (double& w : net.first.weights()) w = u1(rng);
    net.first.project_center();
    const double sh = 1.0 / std::sqrt(static_cast<double>(cfg.features));
    std::uniform_real_distribution<double> uh(-sh, sh);
    for (auto& layer : net.hidden)
      for (double& w : layer.kernel.weights()) w = uh(rng);
    return m;
  }

  const ModelConfig& config() const noexcept { return config_; }
  /// The mode only decides whether C enters the logits; the weights are shared.
  void set_mode(Mode m) noexcept { config_.mode = m; }
  std::size_t classes() const noexcept { return config_.classes; }
  bool is_linear() const noexcept { return std::holds_alternative<LinearMrfModel>(net_); }

  LinearMrfModel& linear() { return std::get<LinearMrfModel>(net_); }
  const LinearMrfModel& linear() const { return std::get<LinearMrfModel>(net_); }
  NonlinearMrfNet& nonlinear() { return std::get<NonlinearMrfNet>(net_); }
  const NonlinearMrfNet& nonlinear() const { return std::get<NonlinearMrfNet>(net_); }

  /// The spatial (first) MRF filter of either variant.
  const MrfFilterBank& mrf_filter() const {
    return is_linear() ? linear().filters : nonlinear().first;
  }
  MrfFilterBank& mrf_filter() { return is_linear() ? linear().filters : nonlinear().first; }

  /// Trainable parameter blocks in a fixed order (also the serialisation order).
  std::vector<ParamGroup> parameters() {
    std::vector<ParamGroup> out;
    if (is_linear()) {
      auto& lin = linear();
      out.push_back({"filters", lin.filters.weights(), true});
      if (config_.bias_trainable) out.push_back({"bias", lin.bias, false});
      return out;
    }
    auto& net = nonlinear();
    out.push_back({"first", net.first.weights(), true});
    for (std::size_t h = 0; h < net.hidden.size(); ++h) {
      out.push_back({"hidden" + std::to_string(h) + ".weight", net.hidden[h].kernel.weights(), false});
      out.push_back({"hidden" + std::to_string(h) + ".bias", net.hidden[h].bias, false});
    }
    out.push_back({"final.weight", net.final.kernel.weights(), false});
    out.push_back({"final.bias", net.final.bias, false});
    return out;
  }

  MrfModel zeros_like() const { return zeros(config_); }

  void project_center() noexcept { mrf_filter().project_center(); }
  bool center_is_zero() const noexcept { return mrf_filter().center_is_zero(); }

  friend bool operator==(const MrfModel&, const MrfModel&) = default;

 private:
  ModelConfig config_;
  std::variant<LinearMrfModel, NonlinearMrfNet> net_;
};

/// Activations recorded by a forward pass, consumed by model_backward.
struct ForwardCache {
  bool valid = false;
  Grid2D input;
  std::vector<Grid2D> pre;  // pre-activations of the first and hidden layers
  std::vector<Grid2D> act;  // their leaky-ReLU outputs
};

namespace detail {

inline Grid2D pointwise(const Grid2D& in, const PointwiseLayer& layer) {
  Grid2D out = conv2d(in, layer.kernel);
  for (std::size_t p = 0; p < out.pixels(); ++p) {
    auto o = out.pixel(p);
    for (std::size_t c = 0; c < o.size(); ++c) o[c] += layer.bias[c];
  }
  return out;
}

inline void check_input(const ResponsibilityField& r, std::size_t classes) {
  require(r.channels() == classes, "MRF layer: field has " + std::to_string(r.channels()) +
                                       " channels, model expects " + std::to_string(classes));
}

}  // namespace detail

/// W * R + bias for the linear model, with R padded by the uniform distribution.
inline Grid2D mrf_logits_linear(const ResponsibilityField& r, const LinearMrfModel& model) {
  detail::check_input(r, model.filters.in_channels());
  Grid2D out = conv2d(r, model.filters.kernel(), Padding::uniform(r.channels()));
  for (std::size_t p = 0; p < out.pixels(); ++p) {
    auto o = out.pixel(p);
    for (std::size_t c = 0; c < o.size(); ++c) o[c] += model.bias[c];
  }
  return out;
}

inline Grid2D mrf_logits_nonlinear(const ResponsibilityField& r, const NonlinearMrfNet& net,
                                   ForwardCache* cache = nullptr) {
  detail::check_input(r, net.first.in_channels());
  Grid2D z = conv2d(r, net.first.kernel(), Padding::uniform(r.channels()));
  Grid2D a = leaky_relu(z, net.alpha);
  if (cache != nullptr) {
    cache->pre.push_back(z);
    cache->act.push_back(a);
  }
  for (const auto& layer : net.hidden) {
    z = detail::pointwise(a, layer);
    a = leaky_relu(z, net.alpha);
    if (cache != nullptr) {
      cache->pre.push_back(z);
      cache->act.push_back(a);
    }
  }
  return detail::pointwise(a, net.final);
}

/// MRF contribution to the logits; fills `cache` for a later model_backward.
inline Grid2D mrf_logits(const ResponsibilityField& r, const MrfModel& model,
                         ForwardCache* cache = nullptr) {
  if (cache != nullptr) {
    *cache = ForwardCache{};
    cache->input = r;
  }
  Grid2D out = model.is_linear() ? mrf_logits_linear(r, model.linear())
                                 : mrf_logits_nonlinear(r, model.nonlinear(), cache);
  if (cache != nullptr) cache->valid = true;
  return out;
}

inline void check_mode(const MrfModel& model, Mode mode, const LogLikelihoodField* c) {
  if (mode == Mode::generative) {
    require(c != nullptr, "generative mode requires a log-likelihood field");
  } else {
    require(c == nullptr, "postprocess mode takes no log-likelihood field");
  }
  (void)model;
}

/// C + mrf_logits(R) (generative) or mrf_logits(R) (postprocess).
inline Grid2D total_logits(const ResponsibilityField& r, const LogLikelihoodField* c,
                           const MrfModel& model, Mode mode, ForwardCache* cache = nullptr) {
  check_mode(model, mode, c);
  Grid2D logits = mrf_logits(r, model, cache);
  if (c != nullptr) {
    require(c->same_shape(logits), "log-likelihood field shape does not match the responsibilities");
    logits = add(*c, logits);
  }
  return logits;
}

/// One mean-field update of the whole field.
inline ResponsibilityField apply_model(const ResponsibilityField& r, const LogLikelihoodField* c,
                                       const MrfModel& model, Mode mode) {
  return softmax_channels(total_logits(r, c, model, mode));
}
inline ResponsibilityField apply_model(const ResponsibilityField& r, const LogLikelihoodField* c,
                                       const MrfModel& model) {
  return apply_model(r, c, model, model.config().mode);
}

struct ModelGradients {
  MrfModel params;  // same layout as the model
  Grid2D input;     // d loss / d R
};

namespace detail {

// Accumulates the 1x1 layer's parameter gradients and returns d loss / d input.
inline Grid2D pointwise_backward(const Grid2D& in, const PointwiseLayer& layer, const Grid2D& grad_out,
                                 PointwiseLayer& grad) {
  ConvGradients g = conv2d_backward(in, layer.kernel, grad_out);
  grad.kernel = std::move(g.kernel);
  grad.bias.assign(layer.bias.size(), 0.0);
  for (std::size_t p = 0; p < grad_out.pixels(); ++p) {
    const auto go = grad_out.pixel(p);
    for (std::size_t c = 0; c < go.size(); ++c) grad.bias[c] += go[c];
  }
  return std::move(g.input);
}

inline void copy_kernel_grad(MrfFilterBank& dst, const Kernel& src) {
  auto w = dst.weights();
  const auto s = src.weights();
  std::copy(s.begin(), s.end(), w.begin());
  dst.project_center();
}

}  // namespace detail

/// Reverse pass through mrf_logits given d loss / d logits. The gradient of the
/// MRF filter's centre taps is projected to zero.
inline ModelGradients model_backward(const MrfModel& model, const ForwardCache& cache,
                                     const Grid2D& grad_logits) {
  require(cache.valid, "model_backward: forward cache is missing");
  require(grad_logits.same_extent(cache.input.height(), cache.input.width()) &&
              grad_logits.channels() == model.classes(),
          "model_backward: gradient shape does not match the forward pass");
  ModelGradients out{model.zeros_like(), Grid2D{}};
  const Padding pad = Padding::uniform(model.classes());

  if (model.is_linear()) {
    const auto& lin = model.linear();
    ConvGradients g = conv2d_backward(cache.input, lin.filters.kernel(), grad_logits, pad);
    auto& glin = out.params.linear();
    detail::copy_kernel_grad(glin.filters, g.kernel);
    if (model.config().bias_trainable) {
      for (std::size_t p = 0; p < grad_logits.pixels(); ++p) {
        const auto go = grad_logits.pixel(p);
        for (std::size_t c = 0; c < go.size(); ++c) glin.bias[c] += go[c];
      }
    }
    out.input = std::move(g.input);
    return out;
  }

  const auto& net = model.nonlinear();
  auto& gnet = out.params.nonlinear();
  require(cache.act.size() == net.hidden.size() + 1, "model_backward: cache does not match the network");
  Grid2D g = detail::pointwise_backward(cache.act.back(), net.final, grad_logits, gnet.final);
  for (std::size_t h = net.hidden.size(); h-- > 0;) {
    g = leaky_relu_backward(cache.pre[h + 1], g, net.alpha);
    g = detail::pointwise_backward(cache.act[h], net.hidden[h], g, gnet.hidden[h]);
  }
  g = leaky_relu_backward(cache.pre[0], g, net.alpha);
  ConvGradients g1 = conv2d_backward(cache.input, net.first.kernel(), g, pad);
  detail::copy_kernel_grad(gnet.first, g1.kernel);
  out.input = std::move(g1.input);
  return out;
}

/// Canonical representative of a K x K MRF filter under the transformations
/// that leave the linear layer's output unchanged (uniform padding, fixed bias):
///   W[k, l, d] + a[l, d]              (constant across the output class k)
///   W[k, l, d] + e[k, d]              when sum_d e[k, d] does not depend on k
/// The result has zero mean over k for every (l, d), and its mean over l is
/// the same at every neighbour offset d.
inline Kernel canonical_gauge(const MrfFilterBank& bank) {
  Kernel w = bank.kernel();
  const std::size_t K = w.out_channels();
  require(w.in_channels() == K, "canonical_gauge: filter must be K x K");
  const double inv_k = 1.0 / static_cast<double>(K);
  for (std::size_t l = 0; l < K; ++l)
    for (std::size_t ky = 0; ky < w.kh(); ++ky)
      for (std::size_t kx = 0; kx < w.kw(); ++kx) {
        double m = 0.0;
        for (std::size_t k = 0; k < K; ++k) m += w(k, l, ky, kx);
        for (std::size_t k = 0; k < K; ++k) w(k, l, ky, kx) -= m * inv_k;
      }
  const double inv_n = 1.0 / static_cast<double>(bank.neighbours());
  for (std::size_t k = 0; k < K; ++k) {
    std::vector<double> e(w.taps(), 0.0);
    double e_bar = 0.0;
    for (std::size_t ky = 0; ky < w.kh(); ++ky)
      for (std::size_t kx = 0; kx < w.kw(); ++kx) {
        if (bank.is_center(ky, kx)) continue;
        double m = 0.0;
        for (std::size_t l = 0; l < K; ++l) m += w(k, l, ky, kx);
        e[ky * w.kw() + kx] = m * inv_k;
        e_bar += m * inv_k * inv_n;
      }
    for (std::size_t ky = 0; ky < w.kh(); ++ky)
      for (std::size_t kx = 0; kx < w.kw(); ++kx) {
        if (bank.is_center(ky, kx)) continue;
        for (std::size_t l = 0; l < K; ++l) w(k, l, ky, kx) += e_bar - e[ky * w.kw() + kx];
      }
  }
  return w;
}

/// dst += scale * src over every trainable parameter block.
inline void accumulate(MrfModel& dst, MrfModel& src, double scale = 1.0) {
  auto d = dst.parameters();
  auto s = src.parameters();
  require(d.size() == s.size(), "accumulate: parameter layout mismatch");
  for (std::size_t g = 0; g < d.size(); ++g) {
    require(d[g].values.size() == s[g].values.size(), "accumulate: block size mismatch");
    for (std::size_t j = 0; j < d[g].values.size(); ++j) d[g].values[j] += scale * s[g].values[j];
  }
}

}  // namespace mrfnet
