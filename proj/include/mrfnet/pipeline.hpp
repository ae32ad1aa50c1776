#pragma once

// Experiment-level building blocks shared by the CLI and the test suites:
// synthetic dataset generation, finite-difference gradient checks, the
// single-pixel oracle comparison and Dice evaluation.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "mrfnet/error.hpp"
#include "mrfnet/inference.hpp"
#include "mrfnet/io.hpp"
#include "mrfnet/layers.hpp"
#include "mrfnet/metrics.hpp"
#include "mrfnet/oracle.hpp"
#include "mrfnet/parallel.hpp"
#include "mrfnet/tensor.hpp"
#include "mrfnet/train.hpp"

namespace mrfnet {

/// Shortest decimal text that reads back to the same double.
inline std::string format_double(double v) {
  char buf[32];
  for (int precision = 1; precision <= 17; ++precision) {
    std::snprintf(buf, sizeof buf, "%.*g", precision, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

// ---------------------------------------------------------------------------
// Synthetic data

enum class Teacher { linear, nonlinear };

struct SynthOptions {
  std::size_t grid = 64;
  std::size_t classes = 2;
  Teacher teacher = Teacher::linear;
  std::size_t n_train = 200;
  std::size_t n_test = 50;
  std::uint64_t seed = 0;
  double sigma = 1.0;
  std::vector<double> means;  // empty: 0, 1, ..., K-1
  std::size_t gibbs_sweeps = 200;
  double beta_cross = 0.4;
  double beta_diag = 0.15;

  std::vector<double> resolved_means() const {
    if (!means.empty()) return means;
    std::vector<double> m(classes);
    for (std::size_t k = 0; k < classes; ++k) m[k] = static_cast<double>(k);
    return m;
  }
  void validate() const {
    if (grid < 1) throw ConfigError("synth: grid must be at least 1");
    if (classes < 2) throw ConfigError("synth: need at least two classes");
    if (n_train + n_test < 1) throw ConfigError("synth: no images requested");
    if (!(sigma > 0.0)) throw ConfigError("synth: sigma must be positive");
    if (!means.empty() && means.size() != classes) throw ConfigError("synth: need one mean per class");
    if (gibbs_sweeps < 1) throw ConfigError("synth: need at least one Gibbs sweep");
  }
};

struct SyntheticItem {
  std::string id;
  std::string split;
  LabelField z;          // Gibbs sample from the teacher prior
  SyntheticImage image;  // intensities, C and softmax(C)
  LabelField target;     // z (linear teacher) or its nonlinear relabelling
};

struct SyntheticSet {
  MrfFilterBank w_true;
  std::vector<double> means;
  std::vector<SyntheticItem> items;
};

/// Every image draws from its own stream seeded by (seed, split, index), so
/// the output does not depend on the thread count.
inline SyntheticSet generate_synthetic(const SynthOptions& opt) {
  opt.validate();
  SyntheticSet set;
  set.w_true = potts_filters(opt.classes, opt.beta_cross, opt.beta_diag);
  set.means = opt.resolved_means();
  const std::size_t n = opt.n_train + opt.n_test;
  set.items.resize(n);
  parallel_for(n, [&](std::size_t j) {
    const bool train = j < opt.n_train;
    const std::size_t idx = train ? j : j - opt.n_train;
    SyntheticItem& it = set.items[j];
    it.split = train ? "train" : "test";
    char name[32];
    std::snprintf(name, sizeof name, "%s_%04zu", it.split.c_str(), idx);
    it.id = name;
    std::seed_seq ss{static_cast<std::uint32_t>(opt.seed), static_cast<std::uint32_t>(opt.seed >> 32),
                     train ? 1u : 2u, static_cast<std::uint32_t>(idx)};
    std::mt19937_64 rng(ss);
    it.z = gibbs_sample_labels(set.w_true, opt.grid, opt.grid, opt.gibbs_sweeps, rng);
    it.image = synth_likelihood(it.z, set.means, opt.sigma, rng);
    it.target = opt.teacher == Teacher::linear ? it.z : nonlinear_relabel(it.z, opt.classes);
  });
  return set;
}

/// Training samples from a synthetic split. `onehot` feeds the true labels z
/// as R; `soft` feeds softmax(C).
inline std::vector<Sample> synthetic_samples(const SyntheticSet& set, const std::string& split, InputKind input) {
  std::vector<Sample> out;
  for (const auto& it : set.items) {
    if (it.split != split) continue;
    Sample s;
    s.r = input == InputKind::soft ? it.image.r0 : one_hot(it.z, set.w_true.out_channels());
    s.c = it.image.c;
    s.target = it.target;
    out.push_back(std::move(s));
  }
  return out;
}

/// Writes the dataset directory: manifest.json, w_true.mrft and one
/// sub-directory per split holding r, c, x and target tensors.
inline DatasetManifest write_synthetic(const SyntheticSet& set, const SynthOptions& opt, const fs::path& dir,
                                       DType dtype = DType::f32) {
  DatasetManifest m;
  m.root = dir;
  m.classes = opt.classes;
  m.height = m.width = opt.grid;
  {
    const Kernel& w = set.w_true.kernel();
    // The teacher is stored in double precision regardless of the payload flag.
    write_tensor(dir / "w_true.mrft",
                 RawTensor{{w.out_channels(), w.in_channels(), w.kh(), w.kw()},
                           {w.weights().begin(), w.weights().end()}, DType::f64});
  }
  for (const auto& it : set.items) {
    ManifestEntry e;
    e.id = it.id;
    e.split = it.split;
    const std::string base = it.split + "/" + it.id;
    e.r = base + "_r.mrft";
    e.c = base + "_c.mrft";
    e.x = base + "_x.mrft";
    e.target = base + "_target.mrft";
    write_grid(dir / e.r, it.image.r0, dtype);
    write_grid(dir / *e.c, it.image.c, dtype);
    write_grid(dir / *e.x, it.image.x, dtype);
    write_labels(dir / e.target, it.target);
    m.samples.push_back(std::move(e));
  }
  nlohmann::json prov;
  prov["generator"] = "gibbs+gaussian";
  prov["seed"] = opt.seed;
  prov["teacher"] = opt.teacher == Teacher::linear ? "linear" : "nonlinear";
  prov["w_true"] = "w_true.mrft";
  prov["beta_cross"] = opt.beta_cross;
  prov["beta_diag"] = opt.beta_diag;
  prov["means"] = set.means;
  prov["sigma"] = opt.sigma;
  prov["gibbs_sweeps"] = opt.gibbs_sweeps;
  prov["n_train"] = opt.n_train;
  prov["n_test"] = opt.n_test;
  prov["image_seed_rule"] = "seed_seq(seed_lo, seed_hi, split(train=1,test=2), index)";
  m.provenance = prov;
  write_manifest(dir / "manifest.json", m);
  return m;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check

struct GradcheckGroup {
  std::string label;  // which model / mode / sweep configuration
  std::string group;  // parameter block name
  std::size_t count = 0;
  double rel_error = 0.0;  // ||analytic - numeric|| / max(||analytic||, ||numeric||)
};

/// Central differences with step `h` on every trainable parameter except the
/// structurally absent MRF centre taps.
inline std::vector<GradcheckGroup> gradcheck_model(MrfModel model, const Sample& s, Mode mode, std::size_t sweeps,
                                                   double h, const std::string& label) {
  MrfModel grad;
  sample_loss(model, s, mode, sweeps, &grad);
  auto params = model.parameters();
  auto grads = grad.parameters();
  const Kernel& k = model.mrf_filter().kernel();
  const std::size_t taps = k.taps();
  const std::size_t center = k.center_y() * k.kw() + k.center_x();

  std::vector<GradcheckGroup> out;
  for (std::size_t g = 0; g < params.size(); ++g) {
    GradcheckGroup r{label, params[g].name, 0, 0.0};
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    for (std::size_t j = 0; j < params[g].values.size(); ++j) {
      if (params[g].mrf_filter && j % taps == center) continue;
      double& p = params[g].values[j];
      const double saved = p;
      p = saved + h;
      const double up = sample_loss(model, s, mode, sweeps);
      p = saved - h;
      const double down = sample_loss(model, s, mode, sweeps);
      p = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = grads[g].values[j];
      diff2 += (analytic - numeric) * (analytic - numeric);
      a2 += analytic * analytic;
      n2 += numeric * numeric;
      ++r.count;
    }
    const double denom = std::sqrt(std::max(a2, n2));
    r.rel_error = denom > 0.0 ? std::sqrt(diff2) / denom : 0.0;
    out.push_back(r);
  }
  return out;
}

struct GradcheckOptions {
  std::uint64_t seed = 0;
  std::size_t grid = 6;
  std::size_t classes = 3;
  std::size_t features = 16;
  std::size_t kernel_size = 3;
  double alpha = 0.1;
  double step = 1e-6;
};

namespace detail {
template <typename Rng>
void randomize(MrfModel& m, double scale, Rng& rng) {
  std::uniform_real_distribution<double> u(-scale, scale);
  for (auto& g : m.parameters())
    for (double& v : g.values) v = u(rng);
  m.project_center();
}
}  // namespace detail

/// Linear model (trainable bias) and nonlinear net, generative and
/// postprocess, one and three recurrent sweeps, on a random problem.
inline std::vector<GradcheckGroup> gradcheck_suite(const GradcheckOptions& opt) {
  std::mt19937_64 rng(opt.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Sample s;
  Grid2D c(opt.grid, opt.grid, opt.classes);
  for (double& v : c.data()) v = 1.5 * normal(rng);
  s.c = c;
  s.r = softmax_channels(c);
  s.target = LabelField(opt.grid, opt.grid);
  std::uniform_int_distribution<int> label(0, static_cast<int>(opt.classes) - 1);
  for (int& l : s.target.data()) l = label(rng);

  ModelConfig lin_cfg;
  lin_cfg.classes = opt.classes;
  lin_cfg.kernel_size = opt.kernel_size;
  lin_cfg.bias_trainable = true;
  MrfModel lin = MrfModel::zeros(lin_cfg);
  detail::randomize(lin, 0.5, rng);

  ModelConfig nl_cfg = lin_cfg;
  nl_cfg.variant = Variant::nonlinear;
  nl_cfg.features = opt.features;
  nl_cfg.alpha = opt.alpha;
  nl_cfg.bias_trainable = false;
  MrfModel nl = MrfModel::zeros(nl_cfg);
  detail::randomize(nl, 0.5, rng);

  std::vector<GradcheckGroup> out;
  for (const auto* m : {&lin, &nl}) {
    for (Mode mode : {Mode::generative, Mode::postprocess}) {
      for (std::size_t sweeps : {std::size_t{1}, std::size_t{3}}) {
        const std::string label = std::string(m->is_linear() ? "linear" : "nonlinear") + "/" + to_string(mode) +
                                  "/sweeps=" + std::to_string(sweeps);
        auto part = gradcheck_model(*m, s, mode, sweeps, opt.step, label);
        out.insert(out.end(), part.begin(), part.end());
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Single-pixel oracle comparison

struct OracleCheckResult {
  std::size_t instances = 0;
  double max_abs_error = 0.0;
};

/// Random 3x3 neighbourhoods with K in {2, 3, 4}: the centre pixel of
/// apply_model must agree with scalar_meanfield_update.
inline OracleCheckResult oracle_check(std::uint64_t seed, std::size_t instances) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> pick_k(2, 4);
  OracleCheckResult res;
  for (std::size_t n = 0; n < instances; ++n) {
    const std::size_t K = pick_k(rng);
    ModelConfig cfg;
    cfg.classes = K;
    MrfModel model = MrfModel::zeros(cfg);
    for (double& w : model.linear().filters.weights()) w = normal(rng);
    model.project_center();

    Grid2D logits(3, 3, K);
    for (double& v : logits.data()) v = 2.0 * normal(rng);
    const Grid2D r = softmax_channels(logits);
    Grid2D c(3, 3, K);
    for (double& v : c.data()) v = normal(rng);

    const Grid2D out = apply_model(r, &c, model, Mode::generative);

    std::vector<NeighbourResponsibility> nbs;
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        if (dy == 0 && dx == 0) continue;
        const auto px = r.pixel(static_cast<std::size_t>(1 + dy), static_cast<std::size_t>(1 + dx));
        nbs.push_back({dy, dx, {px.begin(), px.end()}});
      }
    const auto ref = scalar_meanfield_update(nbs, c.pixel(1, 1), model.linear().filters);
    for (std::size_t k = 0; k < K; ++k) res.max_abs_error = std::max(res.max_abs_error, std::abs(out(1, 1, k) - ref[k]));
    ++res.instances;
  }
  return res;
}

// ---------------------------------------------------------------------------
// Dice evaluation

struct EvalRow {
  std::string subject;
  std::size_t cls = 0;
  double dice_baseline = 0.0;
  double dice_refined = 0.0;
};

struct ClassSummary {
  std::size_t cls = 0;
  double mean_baseline = 0.0;
  double mean_refined = 0.0;
  TTestResult welch;
  double welch_p_adjusted = 1.0;
  TTestResult paired;  // refined - baseline
  double paired_p_adjusted = 1.0;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  std::vector<ClassSummary> classes;
  std::size_t comparisons = 0;
};

/// Per-class refined-vs-baseline comparison; Bonferroni m = `comparisons`
/// (0 means one comparison per class).
inline EvalReport evaluate_dice(const std::vector<std::string>& subjects, const std::vector<LabelField>& baseline,
                                const std::vector<LabelField>& refined, const std::vector<LabelField>& truth,
                                std::size_t classes, std::size_t comparisons = 0) {
  require(baseline.size() == subjects.size() && refined.size() == subjects.size() && truth.size() == subjects.size(),
          "evaluate_dice: subject count mismatch");
  EvalReport rep;
  rep.comparisons = comparisons == 0 ? classes : comparisons;
  const DiceReport base = dice_report(baseline, truth, classes);
  const DiceReport ref = dice_report(refined, truth, classes);
  for (std::size_t s = 0; s < subjects.size(); ++s)
    for (std::size_t k = 0; k < classes; ++k)
      rep.rows.push_back({subjects[s], k, base.per_subject[s][k], ref.per_subject[s][k]});

  std::vector<double> welch_p, paired_p;
  for (std::size_t k = 0; k < classes; ++k) {
    ClassSummary cs;
    cs.cls = k;
    cs.mean_baseline = base.class_means[k];
    cs.mean_refined = ref.class_means[k];
    std::vector<double> a, b;
    for (std::size_t s = 0; s < subjects.size(); ++s) {
      a.push_back(ref.per_subject[s][k]);
      b.push_back(base.per_subject[s][k]);
    }
    cs.welch = welch_t(a, b);
    cs.paired = paired_t(a, b);
    welch_p.push_back(cs.welch.p);
    paired_p.push_back(cs.paired.p);
    rep.classes.push_back(cs);
  }
  const auto wa = bonferroni(welch_p, rep.comparisons);
  const auto pa = bonferroni(paired_p, rep.comparisons);
  for (std::size_t k = 0; k < classes; ++k) {
    rep.classes[k].welch_p_adjusted = wa[k];
    rep.classes[k].paired_p_adjusted = pa[k];
  }
  return rep;
}

inline std::string eval_csv(const EvalReport& rep) {
  std::string out = "subject,class,dice_baseline,dice_refined\n";
  for (const auto& r : rep.rows) {
    out += r.subject + "," + std::to_string(r.cls) + "," + format_double(r.dice_baseline) + "," +
           format_double(r.dice_refined) + "\n";
  }
  out += "\n# summary (refined vs baseline, bonferroni m=" + std::to_string(rep.comparisons) + ")\n";
  out +=
      "class,mean_baseline,mean_refined,welch_t,welch_df,welch_p,welch_p_adj,welch_stars,"
      "paired_t,paired_p,paired_p_adj,paired_stars\n";
  for (const auto& c : rep.classes) {
    out += std::to_string(c.cls) + "," + format_double(c.mean_baseline) + "," + format_double(c.mean_refined) + "," +
           format_double(c.welch.t) + "," + format_double(c.welch.df) + "," + format_double(c.welch.p) + "," +
           format_double(c.welch_p_adjusted) + "," + significance_stars(c.welch_p_adjusted) + "," +
           format_double(c.paired.t) + "," + format_double(c.paired.p) + "," + format_double(c.paired_p_adjusted) +
           "," + significance_stars(c.paired_p_adjusted) + "\n";
  }
  return out;
}

inline std::string trace_csv(const InferenceTrace& t) {
  std::string out = "sweep,max_change,elbo\n";
  for (std::size_t i = 0; i < t.max_change.size(); ++i) {
    out += std::to_string(i + 1) + "," + format_double(t.max_change[i]) + "," +
           (std::isnan(t.elbo[i]) ? std::string("nan") : format_double(t.elbo[i])) + "\n";
  }
  return out;
}

}  // namespace mrfnet
