#pragma once

// Ground-truth machinery for checking the MRF layers: Gibbs sampling from a
// known prior, Gaussian synthetic likelihoods, a scalar-loop mean-field update
// and brute-force enumeration of the exact posterior on tiny grids.
//
// These routines deliberately avoid conv2d and the layer code so they can act
// as independent references.
//
// Joint convention (shared with elbo_linear): for a labelling z,
//   ln p~(z) = sum_i C[i, z_i]
//            + s * sum_i sum_{d: i+d inside} W[z_i, z_{i+d}, d]
//            + sum_i sum_{d: i+d outside} (1/K) sum_l W[z_i, l, d]
// with s = 1/2 for symmetric potentials and 1 otherwise.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "mrfnet/error.hpp"
#include "mrfnet/inference.hpp"
#include "mrfnet/layers.hpp"
#include "mrfnet/tensor.hpp"

namespace mrfnet {

struct SyntheticConfig {
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t classes = 2;
  MrfFilterBank w_true;
  std::vector<double> means{0.0, 1.0};
  double sigma = 1.0;
  std::size_t gibbs_sweeps = 200;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(sigma > 0.0)) throw ConfigError("synthetic: sigma must be positive");
    if (means.size() != classes) throw ConfigError("synthetic: need one mean per class");
    if (w_true.in_channels() != classes || w_true.out_channels() != classes) {
      throw ConfigError("synthetic: teacher weights do not match the class count");
    }
  }
  std::vector<std::string> warnings() const {
    std::vector<std::string> w;
    for (std::size_t a = 0; a < means.size(); ++a)
      for (std::size_t b = a + 1; b < means.size(); ++b)
        if (means[a] == means[b]) w.push_back("class means " + std::to_string(a) + " and " + std::to_string(b) + " coincide");
    return w;
  }
};

/// Potts-style teacher: W[k, k, d] = beta_cross on the 4-neighbour cross and
/// beta_diag on the diagonals of a 3x3 window; off-diagonal class pairs 0.
inline MrfFilterBank potts_filters(std::size_t classes, double beta_cross, double beta_diag) {
  MrfFilterBank w(3, classes, classes);
  for (std::size_t k = 0; k < classes; ++k)
    for (std::size_t ky = 0; ky < 3; ++ky)
      for (std::size_t kx = 0; kx < 3; ++kx) {
        if (w.is_center(ky, kx)) continue;
        const bool cross = ky == 1 || kx == 1;
        w.set(k, k, ky, kx, cross ? beta_cross : beta_diag);
      }
  return w;
}

/// Random potentials with W[k, l, d] == W[l, k, -d] exactly.
template <typename Rng>
MrfFilterBank random_symmetric_filters(std::size_t classes, std::size_t kernel_size, double scale, Rng& rng) {
  MrfFilterBank w(kernel_size, classes, classes);
  std::uniform_real_distribution<double> u(-scale, scale);
  const std::size_t n = kernel_size;
  for (std::size_t k = 0; k < classes; ++k)
    for (std::size_t l = 0; l < classes; ++l)
      for (std::size_t ky = 0; ky < n; ++ky)
        for (std::size_t kx = 0; kx < n; ++kx) {
          if (w.is_center(ky, kx)) continue;
          const std::size_t my = n - 1 - ky, mx = n - 1 - kx;
          // Fill each orbit {(k,l,d), (l,k,-d)} once, from its lexicographically first member.
          const bool first = std::tie(k, l, ky, kx) <= std::tie(l, k, my, mx);
          if (!first) continue;
          const double v = u(rng);
          w.set(k, l, ky, kx, v);
          w.set(l, k, my, mx, v);
        }
  return w;
}

namespace detail {

// Site conditional logits given hard neighbour labels; outside neighbours count as uniform.
inline void gibbs_logits(const LabelField& z, const MrfFilterBank& w, std::size_t y, std::size_t x,
                         std::vector<double>& out) {
  const Kernel& k = w.kernel();
  const std::size_t K = k.out_channels();
  const auto h = static_cast<std::ptrdiff_t>(z.height()), wd = static_cast<std::ptrdiff_t>(z.width());
  std::fill(out.begin(), out.end(), 0.0);
  for (std::size_t ky = 0; ky < k.kh(); ++ky) {
    for (std::size_t kx = 0; kx < k.kw(); ++kx) {
      if (w.is_center(ky, kx)) continue;
      const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + ky) - static_cast<std::ptrdiff_t>(k.center_y());
      const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(x + kx) - static_cast<std::ptrdiff_t>(k.center_x());
      const bool inside = sy >= 0 && sy < h && sx >= 0 && sx < wd;
      for (std::size_t c = 0; c < K; ++c) {
        if (inside) {
          out[c] += k(c, static_cast<std::size_t>(z(static_cast<std::size_t>(sy), static_cast<std::size_t>(sx))), ky, kx);
        } else {
          for (std::size_t l = 0; l < K; ++l) out[c] += k(c, l, ky, kx) / static_cast<double>(K);
        }
      }
    }
  }
}

template <typename Rng>
int draw_categorical(std::span<const double> logits, Rng& rng) {
  double m = logits[0];
  for (double v : logits) m = std::max(m, v);
  std::vector<double> p(logits.size());
  double s = 0.0;
  for (std::size_t k = 0; k < logits.size(); ++k) s += (p[k] = std::exp(logits[k] - m));
  double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng) * s;
  for (std::size_t k = 0; k + 1 < p.size(); ++k) {
    if (u < p[k]) return static_cast<int>(k);
    u -= p[k];
  }
  return static_cast<int>(p.size() - 1);
}

}  // namespace detail

/// One raster-scan single-site Gibbs sweep, in place.
template <typename Rng>
void gibbs_sweep(LabelField& z, const MrfFilterBank& w, Rng& rng) {
  std::vector<double> logits(w.out_channels());
  for (std::size_t y = 0; y < z.height(); ++y)
    for (std::size_t x = 0; x < z.width(); ++x) {
      detail::gibbs_logits(z, w, y, x, logits);
      z(y, x) = detail::draw_categorical(logits, rng);
    }
}

/// Labels after `sweeps` Gibbs sweeps from an i.i.d. uniform start.
template <typename Rng>
LabelField gibbs_sample_labels(const MrfFilterBank& w, std::size_t height, std::size_t width,
                               std::size_t sweeps, Rng& rng) {
  require(sweeps >= 1, "gibbs_sample_labels: need at least one sweep");
  require(w.in_channels() == w.out_channels(), "gibbs_sample_labels: potentials must be K x K");
  const std::size_t K = w.out_channels();
  LabelField z(height, width);
  std::uniform_int_distribution<int> init(0, static_cast<int>(K) - 1);
  for (int& l : z.data()) l = init(rng);
  for (std::size_t s = 0; s < sweeps; ++s) gibbs_sweep(z, w, rng);
  return z;
}

struct SyntheticImage {
  Grid2D x;                   // one channel of intensities
  LogLikelihoodField c;       // ln N(x_i | mean_k, sigma^2)
  ResponsibilityField r0;     // softmax(C)
};

/// Draws x_i ~ N(means[z_i], sigma^2) and returns the class log-densities and their softmax.
template <typename Rng>
SyntheticImage synth_likelihood(const LabelField& labels, std::span<const double> means, double sigma, Rng& rng) {
  require(sigma > 0.0, "synth_likelihood: sigma must be positive");
  const std::size_t K = means.size();
  SyntheticImage img{Grid2D(labels.height(), labels.width(), 1), Grid2D(labels.height(), labels.width(), K), {}};
  std::normal_distribution<double> noise(0.0, 1.0);
  const double log_norm = -std::log(sigma) - 0.5 * std::log(2.0 * std::numbers::pi);
  for (std::size_t p = 0; p < labels.pixels(); ++p) {
    const int z = labels[p];
    require(z >= 0 && static_cast<std::size_t>(z) < K, "synth_likelihood: label outside the class range");
    const double x = means[static_cast<std::size_t>(z)] + sigma * noise(rng);
    img.x.pixel(p)[0] = x;
    auto c = img.c.pixel(p);
    for (std::size_t k = 0; k < K; ++k) {
      const double d = (x - means[k]) / sigma;
      c[k] = -0.5 * d * d + log_norm;
    }
  }
  img.r0 = softmax_channels(img.c);
  return img;
}

/// Deterministic non-log-linear teacher: the new label at i is
/// (majority class among the 8 neighbours + z[i + (0, 1)] + z[i + (1, 0)]) mod K.
/// Majority ties go to the lowest class; out-of-image neighbours read as class 0.
/// For K = 2 this is majority XOR right XOR down. The rule never reads z_i.
inline LabelField nonlinear_relabel(const LabelField& z, std::size_t classes) {
  const auto h = static_cast<std::ptrdiff_t>(z.height()), w = static_cast<std::ptrdiff_t>(z.width());
  auto at = [&](std::ptrdiff_t y, std::ptrdiff_t x) -> int {
    if (y < 0 || y >= h || x < 0 || x >= w) return 0;
    return z(static_cast<std::size_t>(y), static_cast<std::size_t>(x));
  };
  LabelField out(z.height(), z.width());
  std::vector<int> counts(classes);
  for (std::ptrdiff_t y = 0; y < h; ++y) {
    for (std::ptrdiff_t x = 0; x < w; ++x) {
      std::fill(counts.begin(), counts.end(), 0);
      for (std::ptrdiff_t dy = -1; dy <= 1; ++dy)
        for (std::ptrdiff_t dx = -1; dx <= 1; ++dx)
          if (dy != 0 || dx != 0) ++counts[static_cast<std::size_t>(at(y + dy, x + dx))];
      const auto majority = static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
      const int k = static_cast<int>(classes);
      out(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = (majority + at(y, x + 1) + at(y + 1, x)) % k;
    }
  }
  return out;
}

struct NeighbourResponsibility {
  int dy = 0, dx = 0;
  std::vector<double> r;
};

/// Mean-field update of a single pixel written as explicit scalar loops:
///   r*_k  proportional to  exp(c_k + sum_d sum_l r_{d,l} W[k, l, d]).
inline std::vector<double> scalar_meanfield_update(std::span<const NeighbourResponsibility> neighbours,
                                                   std::span<const double> c, const MrfFilterBank& w) {
  const Kernel& k = w.kernel();
  const std::size_t K = c.size();
  require(k.out_channels() == K && k.in_channels() == K, "scalar_meanfield_update: class count mismatch");
  std::vector<double> logit(c.begin(), c.end());
  for (const auto& nb : neighbours) {
    require(nb.r.size() == K, "scalar_meanfield_update: neighbour has the wrong class count");
    require(nb.dy != 0 || nb.dx != 0, "scalar_meanfield_update: the centre is not a neighbour");
    const auto ky = static_cast<std::size_t>(nb.dy + static_cast<int>(k.center_y()));
    const auto kx = static_cast<std::size_t>(nb.dx + static_cast<int>(k.center_x()));
    require(ky < k.kh() && kx < k.kw(), "scalar_meanfield_update: offset outside the kernel window");
    for (std::size_t a = 0; a < K; ++a)
      for (std::size_t l = 0; l < K; ++l) logit[a] += nb.r[l] * k(a, l, ky, kx);
  }
  double m = logit[0];
  for (double v : logit) m = std::max(m, v);
  double s = 0.0;
  for (double& v : logit) s += (v = std::exp(v - m));
  for (double& v : logit) v /= s;
  return logit;
}

/// Exact posterior over all K^I labellings of a tiny grid.
class ExactPosterior {
 public:
  static constexpr std::uint64_t max_states = std::uint64_t{1} << 24;

  /// `c` may be null (prior only). `bias` is added per class (may be empty).
  ExactPosterior(const LogLikelihoodField* c, const MrfFilterBank& w, std::span<const double> bias,
                 std::size_t height, std::size_t width)
      : h_(height), w_(width), K_(w.out_channels()) {
    require(w.in_channels() == K_, "ExactPosterior: potentials must be K x K");
    if (c != nullptr) require(c->same_extent(height, width) && c->channels() == K_, "ExactPosterior: C shape mismatch");
    const std::size_t n = h_ * w_;
    states_ = 1;
    for (std::size_t i = 0; i < n; ++i) {
      states_ *= K_;
      if (states_ > max_states) {
        throw ContractError("exact posterior refused: " + std::to_string(K_) + "^" + std::to_string(n) +
                            " states exceeds 2^24");
      }
    }
    const double pair_scale = symmetric_potentials(w) ? 0.5 : 1.0;
    const Kernel& k = w.kernel();
    log_joint_.resize(states_);
    std::vector<int> z(n);
    for (std::uint64_t s = 0; s < states_; ++s) {
      decode(s, z);
      double score = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t y = i / w_, x = i % w_;
        const auto zi = static_cast<std::size_t>(z[i]);
        if (c != nullptr) score += (*c)(y, x, zi);
        if (!bias.empty()) score += bias[zi];
        for (std::size_t ky = 0; ky < k.kh(); ++ky)
          for (std::size_t kx = 0; kx < k.kw(); ++kx) {
            if (w.is_center(ky, kx)) continue;
            const long sy = static_cast<long>(y + ky) - static_cast<long>(k.center_y());
            const long sx = static_cast<long>(x + kx) - static_cast<long>(k.center_x());
            if (sy >= 0 && sy < static_cast<long>(h_) && sx >= 0 && sx < static_cast<long>(w_)) {
              score += pair_scale * k(zi, static_cast<std::size_t>(z[static_cast<std::size_t>(sy) * w_ + static_cast<std::size_t>(sx)]), ky, kx);
            } else {
              for (std::size_t l = 0; l < K_; ++l) score += k(zi, l, ky, kx) / static_cast<double>(K_);
            }
          }
      }
      log_joint_[s] = score;
    }
    double m = log_joint_[0];
    for (double v : log_joint_) m = std::max(m, v);
    double total = 0.0;
    for (double v : log_joint_) total += std::exp(v - m);
    log_partition_ = m + std::log(total);

    marginals_ = Grid2D(h_, w_, K_);
    for (std::uint64_t s = 0; s < states_; ++s) {
      decode(s, z);
      const double p = std::exp(log_joint_[s] - log_partition_);
      for (std::size_t i = 0; i < n; ++i) marginals_.pixel(i)[static_cast<std::size_t>(z[i])] += p;
    }
  }

  const Grid2D& marginals() const noexcept { return marginals_; }
  double log_partition() const noexcept { return log_partition_; }
  std::uint64_t states() const noexcept { return states_; }
  /// ln p(z) for the labelling with index `s` (pixel 0 is the least significant digit).
  double log_probability(std::uint64_t s) const { return log_joint_.at(s) - log_partition_; }
  std::uint64_t encode(const LabelField& z) const {
    std::uint64_t s = 0;
    for (std::size_t i = z.pixels(); i-- > 0;) s = s * K_ + static_cast<std::uint64_t>(z[i]);
    return s;
  }

  /// KL(q || p) for the factorised q with responsibilities `q`, by enumeration.
  double kl(const ResponsibilityField& q) const {
    require(q.same_extent(h_, w_) && q.channels() == K_, "ExactPosterior::kl: shape mismatch");
    const std::size_t n = h_ * w_;
    std::vector<int> z(n);
    double kl = 0.0;
    for (std::uint64_t s = 0; s < states_; ++s) {
      decode(s, z);
      double lq = 0.0;
      bool zero = false;
      for (std::size_t i = 0; i < n; ++i) {
        const double r = q.pixel(i)[static_cast<std::size_t>(z[i])];
        if (r <= 0.0) {
          zero = true;
          break;
        }
        lq += std::log(r);
      }
      if (zero) continue;
      kl += std::exp(lq) * (lq - log_probability(s));
    }
    return kl;
  }

 private:
  void decode(std::uint64_t s, std::vector<int>& z) const {
    for (auto& zi : z) {
      zi = static_cast<int>(s % K_);
      s /= K_;
    }
  }

  std::size_t h_, w_, K_;
  std::uint64_t states_ = 0;
  std::vector<double> log_joint_;
  double log_partition_ = 0.0;
  Grid2D marginals_;
};

inline ExactPosterior exact_posterior_marginals(const LogLikelihoodField* c, const MrfModel& model,
                                                std::size_t height, std::size_t width) {
  if (!model.is_linear()) throw ContractError("exact posterior: only defined for the linear model");
  return ExactPosterior(c, model.linear().filters, model.linear().bias, height, width);
}

}  // namespace mrfnet
