#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include <boost/math/special_functions/beta.hpp>

#include "mrfnet/error.hpp"
#include "mrfnet/tensor.hpp"

namespace mrfnet {

/// Dice overlap 2|P n T| / (|P| + |T|) for class k. Both sets empty gives 1.
inline double dice(const LabelField& pred, const LabelField& truth, int k) {
  require(pred.same_extent(truth.height(), truth.width()), "dice: shape mismatch");
  std::size_t p = 0, t = 0, both = 0;
  for (std::size_t i = 0; i < pred.pixels(); ++i) {
    const bool in_p = pred[i] == k, in_t = truth[i] == k;
    p += in_p;
    t += in_t;
    both += in_p && in_t;
  }
  if (p + t == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(p + t);
}

struct DiceReport {
  std::vector<std::vector<double>> per_subject;  // [subject][class]
  std::vector<double> class_means;
};

inline DiceReport dice_report(std::span<const LabelField> preds, std::span<const LabelField> truths,
                              std::size_t classes) {
  require(preds.size() == truths.size(), "dice_report: subject count mismatch");
  DiceReport r;
  r.class_means.assign(classes, 0.0);
  for (std::size_t s = 0; s < preds.size(); ++s) {
    auto& row = r.per_subject.emplace_back(classes);
    for (std::size_t k = 0; k < classes; ++k) {
      row[k] = dice(preds[s], truths[s], static_cast<int>(k));
      r.class_means[k] += row[k];
    }
  }
  if (!preds.empty())
    for (double& m : r.class_means) m /= static_cast<double>(preds.size());
  return r;
}

struct TTestResult {
  double t = 0.0;
  double df = 0.0;
  double p = 1.0;  // two-sided
};

/// Two-sided Student-t tail probability P(|T| >= |t|) with `df` degrees of freedom.
inline double student_t_two_sided(double t, double df) {
  if (t == 0.0) return 1.0;
  return boost::math::ibeta(df / 2.0, 0.5, df / (df + t * t));
}

namespace detail {
inline void mean_var(std::span<const double> a, double& mean, double& var) {
  mean = 0.0;
  for (double v : a) mean += v;
  mean /= static_cast<double>(a.size());
  var = 0.0;
  for (double v : a) var += (v - mean) * (v - mean);
  var /= static_cast<double>(a.size() - 1);
}
}  // namespace detail

/// Welch's unequal-variance t-test with Welch-Satterthwaite degrees of freedom.
inline TTestResult welch_t(std::span<const double> a, std::span<const double> b) {
  if (a.size() < 2 || b.size() < 2) throw NumericError("welch_t: each sample needs at least two values");
  double ma, va, mb, vb;
  detail::mean_var(a, ma, va);
  detail::mean_var(b, mb, vb);
  const double sa = va / static_cast<double>(a.size());
  const double sb = vb / static_cast<double>(b.size());
  const double se2 = sa + sb;
  TTestResult r;
  if (!(se2 > 0.0)) {
    // Two constant samples: equal constants carry no evidence of a difference.
    if (ma == mb) return {0.0, static_cast<double>(a.size() + b.size() - 2), 1.0};
    throw NumericError("welch_t: both samples have zero variance");
  }
  r.t = (ma - mb) / std::sqrt(se2);
  r.df = se2 * se2 /
         (sa * sa / static_cast<double>(a.size() - 1) + sb * sb / static_cast<double>(b.size() - 1));
  r.p = student_t_two_sided(r.t, r.df);
  return r;
}

/// Paired Student t-test on the differences a_i - b_i.
inline TTestResult paired_t(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw NumericError("paired_t: samples must have equal length");
  if (a.size() < 2) throw NumericError("paired_t: need at least two pairs");
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
  double m, v;
  detail::mean_var(d, m, v);
  TTestResult r;
  r.df = static_cast<double>(d.size() - 1);
  if (!(v > 0.0)) {
    if (m == 0.0) return r;  // identical pairs: t = 0, p = 1
    throw NumericError("paired_t: differences have zero variance");
  }
  r.t = m / std::sqrt(v / static_cast<double>(d.size()));
  r.p = student_t_two_sided(r.t, r.df);
  return r;
}

/// min(1, p * m) elementwise.
inline std::vector<double> bonferroni(std::span<const double> p_values, std::size_t m) {
  if (m < p_values.size()) throw ContractError("bonferroni: comparison count below the number of p-values");
  std::vector<double> out;
  out.reserve(p_values.size());
  for (double p : p_values) {
    if (!(p >= 0.0 && p <= 1.0)) throw ContractError("bonferroni: p-value outside [0, 1]");
    out.push_back(std::min(1.0, p * static_cast<double>(m)));
  }
  return out;
}

/// "*" for p < 0.05, "**" < 0.01, "***" < 0.001, "****" < 0.0001, otherwise "ns".
inline std::string significance_stars(double p) {
  if (p < 1e-4) return "****";
  if (p < 1e-3) return "***";
  if (p < 1e-2) return "**";
  if (p < 5e-2) return "*";
  return "ns";
}

}  // namespace mrfnet
