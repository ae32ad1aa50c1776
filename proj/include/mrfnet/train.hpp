#pragma once

// Maximum-likelihood training of MRF models: minimise the categorical
// cross-entropy of the refined responsibilities against hard target labels.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mrfnet/augment.hpp"
#include "mrfnet/error.hpp"
#include "mrfnet/layers.hpp"
#include "mrfnet/parallel.hpp"
#include "mrfnet/tensor.hpp"

namespace mrfnet {

struct TrainConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::size_t batch_size = 4;
  std::size_t epochs = 10;
  std::uint64_t seed = 0;
  bool flip = false;
  bool affine = false;
  AffineSamplerConfig affine_sampler = AffineSamplerConfig::defaults();
  Mode mode = Mode::generative;
  std::size_t sweeps = 1;  // >1 backpropagates through recurrent Jacobi sweeps

  void validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("train: learning rate must be positive");
    if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) {
      throw ConfigError("train: Adam betas must lie in (0, 1)");
    }
    if (!(epsilon > 0.0)) throw ConfigError("train: epsilon must be positive");
    if (batch_size < 1) throw ConfigError("train: batch size must be at least 1");
    if (sweeps < 1) throw ConfigError("train: need at least one sweep per forward pass");
    if (affine) (void)affine_sampler.factor();
  }
};

struct AdamState {
  std::vector<std::vector<double>> m, v;
  std::uint64_t step = 0;
};

struct Sample {
  ResponsibilityField r;
  std::optional<LogLikelihoodField> c;
  LabelField target;

  void validate(std::size_t classes) const {
    require(r.channels() == classes, "sample: responsibilities have the wrong class count");
    require(target.same_extent(r.height(), r.width()), "sample: target shape does not match R");
    if (c) require(c->same_shape(r), "sample: log-likelihood shape does not match R");
    for (int l : target.data()) {
      if (l < 0 || static_cast<std::size_t>(l) >= classes) {
        throw ContractError("sample: target label " + std::to_string(l) + " outside [0, " +
                            std::to_string(classes) + ")");
      }
    }
  }
};

namespace detail {
inline void check_labels(const Grid2D& logits, const LabelField& target) {
  require(target.same_extent(logits.height(), logits.width()), "cross_entropy: shape mismatch");
  for (int l : target.data()) {
    if (l < 0 || static_cast<std::size_t>(l) >= logits.channels()) {
      throw ContractError("cross_entropy: label " + std::to_string(l) + " out of range");
    }
  }
}
}  // namespace detail

/// Mean per-pixel cross-entropy -(1/I) sum_i ln softmax(logits_i)[target_i],
/// evaluated as a log-sum-exp so no stored probability is ever logged.
inline double cross_entropy(const Grid2D& logits, const LabelField& target) {
  detail::check_labels(logits, target);
  double total = 0.0;
  for (std::size_t p = 0; p < logits.pixels(); ++p) {
    const auto z = logits.pixel(p);
    const double m = *std::max_element(z.begin(), z.end());
    double s = 0.0;
    for (double v : z) s += std::exp(v - m);
    total += m + std::log(s) - z[static_cast<std::size_t>(target[p])];
  }
  return total / static_cast<double>(logits.pixels());
}

/// d cross_entropy / d logits = (softmax(logits) - onehot(target)) / I.
inline Grid2D cross_entropy_grad(const Grid2D& logits, const LabelField& target) {
  detail::check_labels(logits, target);
  Grid2D g = softmax_channels(logits);
  const double inv = 1.0 / static_cast<double>(logits.pixels());
  for (std::size_t p = 0; p < g.pixels(); ++p) {
    auto gp = g.pixel(p);
    gp[static_cast<std::size_t>(target[p])] -= 1.0;
    for (double& v : gp) v *= inv;
  }
  return g;
}

/// One bias-corrected Adam update, followed by projecting the MRF filter's centre taps to zero.
inline void adam_step(MrfModel& model, MrfModel& grads, AdamState& state, const TrainConfig& cfg) {
  auto params = model.parameters();
  auto gs = grads.parameters();
  require(params.size() == gs.size(), "adam_step: parameter/gradient layout mismatch");
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.values.size(), 0.0);
      state.v.emplace_back(p.values.size(), 0.0);
    }
  }
  require(state.m.size() == params.size(), "adam_step: optimiser state does not match the model");
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t g = 0; g < params.size(); ++g) {
    auto& m = state.m[g];
    auto& v = state.v[g];
    require(m.size() == params[g].values.size() && gs[g].values.size() == m.size(),
            "adam_step: block size mismatch in " + params[g].name);
    for (std::size_t j = 0; j < m.size(); ++j) {
      const double gj = gs[g].values[j];
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      params[g].values[j] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.epsilon);
    }
  }
  model.project_center();
}

/// Forward `sweeps` recurrent applications and return the final total logits.
inline Grid2D forward_logits(const MrfModel& model, const Sample& s, Mode mode, std::size_t sweeps,
                             std::vector<ForwardCache>* caches = nullptr,
                             std::vector<ResponsibilityField>* states = nullptr) {
  const LogLikelihoodField* c = s.c ? &*s.c : nullptr;
  if (mode == Mode::postprocess) c = nullptr;
  ResponsibilityField r = s.r;
  Grid2D logits;
  for (std::size_t t = 0; t < sweeps; ++t) {
    ForwardCache* cache = nullptr;
    if (caches != nullptr) cache = &caches->emplace_back();
    if (states != nullptr) states->push_back(r);
    logits = total_logits(r, c, model, mode, cache);
    if (t + 1 < sweeps) r = softmax_channels(logits);
  }
  return logits;
}

/// Loss of one sample and (optionally) its parameter gradient.
inline double sample_loss(const MrfModel& model, const Sample& s, Mode mode, std::size_t sweeps,
                          MrfModel* grad = nullptr) {
  std::vector<ForwardCache> caches;
  std::vector<ResponsibilityField> states;
  const bool want_grad = grad != nullptr;
  const Grid2D logits =
      forward_logits(model, s, mode, sweeps, want_grad ? &caches : nullptr, want_grad ? &states : nullptr);
  const double loss = cross_entropy(logits, s.target);
  if (!want_grad) return loss;

  *grad = model.zeros_like();
  Grid2D g = cross_entropy_grad(logits, s.target);
  for (std::size_t t = sweeps; t-- > 0;) {
    ModelGradients mg = model_backward(model, caches[t], g);
    accumulate(*grad, mg.params);
    if (t > 0) g = softmax_backward(states[t], mg.input);
  }
  grad->project_center();
  return loss;
}

inline double mean_loss(const MrfModel& model, const std::vector<Sample>& data, Mode mode, std::size_t sweeps = 1) {
  require(!data.empty(), "mean_loss: empty dataset");
  std::vector<double> losses(data.size());
  parallel_for(data.size(), [&](std::size_t i) { losses[i] = sample_loss(model, data[i], mode, sweeps); });
  return std::accumulate(losses.begin(), losses.end(), 0.0) / static_cast<double>(data.size());
}

/// Applies flip and/or an affine warp identically to R, C and the target.
inline Sample augment_sample(const Sample& s, bool flip, const std::optional<Matrix3>& warp) {
  Sample out = s;
  if (flip) {
    out.r = flip_lr(out.r);
    if (out.c) out.c = flip_lr(*out.c);
    out.target = flip_lr(out.target);
  }
  if (warp) {
    const std::vector<double> uniform(out.r.channels(), 1.0 / static_cast<double>(out.r.channels()));
    out.r = warp_nearest(out.r, *warp, uniform);
    if (out.c) out.c = warp_nearest(*out.c, *warp, std::vector<double>(out.c->channels(), 0.0));
    out.target = warp_nearest(out.target, *warp, 0);
  }
  return out;
}

struct TrainResult {
  MrfModel model;
  std::vector<double> loss_curve;  // mean training loss per epoch
};

/// Called after every epoch with (1-based epoch, model, epoch loss).
using EpochCallback = std::function<void(std::size_t, const MrfModel&, double)>;

inline TrainResult train(const std::vector<Sample>& dataset, MrfModel model, const TrainConfig& cfg,
                         const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (dataset.empty()) throw ContractError("train: dataset is empty");
  for (const auto& s : dataset) {
    s.validate(model.classes());
    if (cfg.mode == Mode::generative) require(s.c.has_value(), "train: generative mode needs C for every sample");
  }
  TrainResult res{std::move(model), {}};
  AdamState state;
  std::vector<std::size_t> order(dataset.size());

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::seed_seq shuffle_seed{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32),
                               static_cast<std::uint32_t>(epoch), 0x5eedu};
    std::mt19937_64 shuffle_rng(shuffle_seed);
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t n = std::min(cfg.batch_size, order.size() - start);
      std::vector<MrfModel> grads(n);
      std::vector<double> losses(n);
      parallel_for(n, [&](std::size_t b) {
        const std::size_t idx = order[start + b];
        const Sample* s = &dataset[idx];
        Sample augmented;
        if (cfg.flip || cfg.affine) {
          // Per-sample stream keyed by (seed, epoch, sample) keeps results independent of thread count.
          std::seed_seq ss{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32),
                           static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(idx)};
          std::mt19937_64 rng(ss);
          const bool flip = cfg.flip && std::bernoulli_distribution(0.5)(rng);
          std::optional<Matrix3> warp;
          if (cfg.affine) warp = sample_affine(cfg.affine_sampler, rng);
          augmented = augment_sample(*s, flip, warp);
          s = &augmented;
        }
        losses[b] = sample_loss(res.model, *s, cfg.mode, cfg.sweeps, &grads[b]);
      });
      MrfModel batch_grad = res.model.zeros_like();
      for (std::size_t b = 0; b < n; ++b) {
        accumulate(batch_grad, grads[b], 1.0 / static_cast<double>(n));
        epoch_loss += losses[b];
      }
      adam_step(res.model, batch_grad, state, cfg);
    }
    epoch_loss /= static_cast<double>(dataset.size());
    res.loss_curve.push_back(epoch_loss);
    if (on_epoch) on_epoch(epoch + 1, res.model, epoch_loss);
  }
  return res;
}

}  // namespace mrfnet
