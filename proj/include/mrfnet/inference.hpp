#pragma once

// Iterated mean-field updates.
//
// Jacobi: every pixel is updated from the previous field (the MRF layer made
// recurrent). Colored: pixels are partitioned into colour classes such that no
// two pixels of one class are neighbours; classes are updated in turn, each
// reading the freshest values, which is exact coordinate ascent.
//
// Colourings: 2 colours is the checkerboard (y + x) mod 2, valid only for the
// 4-neighbour cross footprint. m*m colours (m >= 2) is the m x m block
// colouring (y mod m) * m + (x mod m); 4 colours covers any 3x3 footprint.

#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "mrfnet/error.hpp"
#include "mrfnet/layers.hpp"
#include "mrfnet/tensor.hpp"

namespace mrfnet {

enum class ScheduleKind { jacobi, colored };

struct Schedule {
  ScheduleKind kind = ScheduleKind::jacobi;
  std::size_t colors = 4;
  std::size_t sweeps = 10;
  std::optional<double> tolerance;
  double damping = 1.0;  // Jacobi only: R <- (1 - damping) R + damping R*

  static Schedule jacobi(std::size_t sweeps) { return {ScheduleKind::jacobi, 1, sweeps, {}, 1.0}; }
  static Schedule colored(std::size_t colors, std::size_t sweeps) {
    return {ScheduleKind::colored, colors, sweeps, {}, 1.0};
  }
};

struct InferenceTrace {
  std::vector<double> max_change;
  std::vector<double> elbo;  // NaN where the objective is not defined (nonlinear or postprocess)
};

struct InferenceResult {
  ResponsibilityField field;
  InferenceTrace trace;
};

/// Colour of pixel (y, x) under the scheme described above.
inline std::size_t pixel_color(std::size_t y, std::size_t x, std::size_t colors) {
  if (colors == 1) return 0;
  if (colors == 2) return (y + x) % 2;
  const auto m = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(colors))));
  return (y % m) * m + (x % m);
}

/// Offsets (dy, dx) of non-centre taps carrying any nonzero weight.
inline std::vector<std::pair<int, int>> footprint(const MrfFilterBank& bank) {
  const Kernel& k = bank.kernel();
  std::vector<std::pair<int, int>> out;
  for (std::size_t ky = 0; ky < k.kh(); ++ky) {
    for (std::size_t kx = 0; kx < k.kw(); ++kx) {
      if (bank.is_center(ky, kx)) continue;
      bool any = false;
      for (std::size_t o = 0; o < k.out_channels() && !any; ++o)
        for (std::size_t i = 0; i < k.in_channels() && !any; ++i) any = k(o, i, ky, kx) != 0.0;
      if (any) {
        out.emplace_back(static_cast<int>(ky) - static_cast<int>(k.center_y()),
                         static_cast<int>(kx) - static_cast<int>(k.center_x()));
      }
    }
  }
  return out;
}

/// Throws ContractError unless no two same-coloured pixels are neighbours.
inline void validate_coloring(const MrfFilterBank& bank, std::size_t colors) {
  require(colors >= 1, "coloring: need at least one colour");
  std::size_t m = 0;
  if (colors > 2) {
    m = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(colors))));
    require(m * m == colors, "coloring: colour count must be 1, 2 or a perfect square, got " +
                                 std::to_string(colors));
  }
  for (const auto& [dy, dx] : footprint(bank)) {
    bool clash = false;
    if (colors == 1) {
      clash = true;
    } else if (colors == 2) {
      clash = (std::abs(dy) + std::abs(dx)) % 2 == 0;
    } else {
      const int mi = static_cast<int>(m);
      clash = dy % mi == 0 && dx % mi == 0;
    }
    if (clash) {
      throw ContractError("coloring with " + std::to_string(colors) +
                          " colours is invalid for a footprint containing offset (" +
                          std::to_string(dy) + ", " + std::to_string(dx) + ")");
    }
  }
}

/// True when W[k, l, d] == W[l, k, -d] for all entries (within `tol`).
inline bool symmetric_potentials(const MrfFilterBank& bank, double tol = 0.0) {
  const Kernel& k = bank.kernel();
  if (k.in_channels() != k.out_channels()) return false;
  for (std::size_t a = 0; a < k.out_channels(); ++a)
    for (std::size_t b = 0; b < k.in_channels(); ++b)
      for (std::size_t ky = 0; ky < k.kh(); ++ky)
        for (std::size_t kx = 0; kx < k.kw(); ++kx)
          if (std::abs(k(a, b, ky, kx) - k(b, a, k.kh() - 1 - ky, k.kw() - 1 - kx)) > tol) return false;
  return true;
}

inline double categorical_entropy(std::span<const double> r) {
  double h = 0.0;
  for (double v : r)
    if (v > 0.0) h -= v * std::log(v);
  return h;
}

/// Variational objective of the linear MRF:
///   sum_i sum_k r_ik (C_ik + b_k)
/// + s * sum_i sum_{d: i+d inside} sum_{k,l} r_ik r_{i+d,l} W[k,l,d]
/// + sum_i sum_{d: i+d outside} sum_k r_ik (1/K) sum_l W[k,l,d]
/// + sum_i H(r_i)
/// with s = 1/2 for symmetric potentials (each unordered pair counted once) and
/// s = 1 otherwise. For symmetric potentials the mean-field update is exactly
/// coordinate ascent on this objective. A null `c` drops the data term.
inline double elbo_linear(const ResponsibilityField& r, const LogLikelihoodField* c, const MrfModel& model) {
  if (!model.is_linear()) throw ContractError("elbo_linear: only defined for the linear model");
  const auto& lin = model.linear();
  const Kernel& w = lin.filters.kernel();
  const std::size_t K = model.classes();
  require(r.channels() == K, "elbo_linear: class count mismatch");
  if (c != nullptr) require(c->same_shape(r), "elbo_linear: log-likelihood shape mismatch");
  const double pair_scale = symmetric_potentials(lin.filters) ? 0.5 : 1.0;
  const auto h = static_cast<std::ptrdiff_t>(r.height()), wd = static_cast<std::ptrdiff_t>(r.width());
  const auto cy = static_cast<std::ptrdiff_t>(w.center_y()), cx = static_cast<std::ptrdiff_t>(w.center_x());

  double unary = 0.0, inside = 0.0, outside = 0.0, entropy = 0.0;
  for (std::ptrdiff_t y = 0; y < h; ++y) {
    for (std::ptrdiff_t x = 0; x < wd; ++x) {
      const auto ri = r.pixel(static_cast<std::size_t>(y), static_cast<std::size_t>(x));
      for (std::size_t k = 0; k < K; ++k) {
        const double cik = c != nullptr ? (*c)(static_cast<std::size_t>(y), static_cast<std::size_t>(x), k) : 0.0;
        unary += ri[k] * (cik + lin.bias[k]);
      }
      entropy += categorical_entropy(ri);
      for (std::size_t ky = 0; ky < w.kh(); ++ky) {
        for (std::size_t kx = 0; kx < w.kw(); ++kx) {
          if (lin.filters.is_center(ky, kx)) continue;
          const std::ptrdiff_t sy = y + static_cast<std::ptrdiff_t>(ky) - cy;
          const std::ptrdiff_t sx = x + static_cast<std::ptrdiff_t>(kx) - cx;
          const bool in = sy >= 0 && sy < h && sx >= 0 && sx < wd;
          for (std::size_t k = 0; k < K; ++k) {
            for (std::size_t l = 0; l < K; ++l) {
              const double wv = w(k, l, ky, kx);
              if (in) {
                inside += ri[k] * r(static_cast<std::size_t>(sy), static_cast<std::size_t>(sx), l) * wv;
              } else {
                outside += ri[k] * wv / static_cast<double>(K);
              }
            }
          }
        }
      }
    }
  }
  return unary + pair_scale * inside + outside + entropy;
}

inline double max_abs_difference(const Grid2D& a, const Grid2D& b) {
  require(a.same_shape(b), "max_abs_difference: shape mismatch");
  double m = 0.0;
  const auto as = a.data(), bs = b.data();
  for (std::size_t j = 0; j < as.size(); ++j) m = std::max(m, std::abs(as[j] - bs[j]));
  return m;
}

/// Called after every colour-group update (colored) or every sweep (Jacobi).
using GroupObserver = std::function<void(const ResponsibilityField&)>;

inline InferenceResult meanfield_run(const ResponsibilityField& r0, const LogLikelihoodField* c,
                                     const MrfModel& model, const Schedule& schedule,
                                     const GroupObserver& observer = {}) {
  const Mode mode = model.config().mode;
  check_mode(model, mode, c);
  validate_responsibilities(r0);
  require(schedule.sweeps >= 1, "meanfield_run: need at least one sweep");
  require(schedule.damping > 0.0 && schedule.damping <= 1.0, "meanfield_run: damping must lie in (0, 1]");
  if (schedule.kind == ScheduleKind::colored) validate_coloring(model.mrf_filter(), schedule.colors);

  const bool has_elbo = model.is_linear() && mode == Mode::generative;
  InferenceResult res{r0, {}};
  ResponsibilityField& r = res.field;
  for (std::size_t sweep = 0; sweep < schedule.sweeps; ++sweep) {
    const ResponsibilityField before = r;
    if (schedule.kind == ScheduleKind::jacobi) {
      ResponsibilityField next = apply_model(r, c, model, mode);
      if (schedule.damping != 1.0) {
        auto n = next.data();
        const auto o = r.data();
        for (std::size_t j = 0; j < n.size(); ++j)
          n[j] = (1.0 - schedule.damping) * o[j] + schedule.damping * n[j];
      }
      r = std::move(next);
      if (observer) observer(r);
    } else {
      for (std::size_t color = 0; color < schedule.colors; ++color) {
        const Grid2D logits = total_logits(r, c, model, mode);
        for (std::size_t y = 0; y < r.height(); ++y) {
          for (std::size_t x = 0; x < r.width(); ++x) {
            if (pixel_color(y, x, schedule.colors) != color) continue;
            const auto lg = logits.pixel(y, x);
            auto out = r.pixel(y, x);
            const double m = *std::max_element(lg.begin(), lg.end());
            double s = 0.0;
            for (std::size_t k = 0; k < lg.size(); ++k) s += (out[k] = std::exp(lg[k] - m));
            for (double& v : out) v /= s;
          }
        }
        if (observer) observer(r);
      }
    }
    const double change = max_abs_difference(before, r);
    res.trace.max_change.push_back(change);
    res.trace.elbo.push_back(has_elbo ? elbo_linear(r, c, model) : std::numeric_limits<double>::quiet_NaN());
    if (schedule.tolerance && change < *schedule.tolerance) break;
  }
  return res;
}

}  // namespace mrfnet
