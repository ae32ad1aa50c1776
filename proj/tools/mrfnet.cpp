// mrfnet command-line front end.
//
// Exit codes follow mrfnet::ErrorCategory: 0 success, 1 internal, 2 usage,
// 3 io, 4 format, 5 contract, 6 config, 7 check failed, 8 numeric.
// Failures print a single line to stderr:
//   error: category=<name> message=<text>

#include <cstdio>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mrfnet/mrfnet.hpp"

namespace {

using namespace mrfnet;

class CheckFailed : public Error {
 public:
  explicit CheckFailed(const std::string& what) : Error(ErrorCategory::check_failed, what) {}
};

std::vector<double> parse_list(const std::string& text, const std::string& what) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (item.find_first_not_of(" \t", used) != std::string::npos) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError(what + ": cannot parse '" + item + "' as a number");
    }
  }
  return out;
}

Mode parse_mode(const std::string& s) { return s == "generative" ? Mode::generative : Mode::postprocess; }
Variant parse_variant(const std::string& s) { return s == "linear" ? Variant::linear : Variant::nonlinear; }

struct Globals {
  int threads = 1;
  bool f64_io = false;
  std::string config;
  DType dtype() const { return f64_io ? DType::f64 : DType::f32; }
};

// ---------------------------------------------------------------------------

struct SynthArgs {
  std::string out;
  std::size_t grid = 64, classes = 2, n_train = 200, n_test = 50, gibbs_sweeps = 200;
  std::string teacher = "linear", means;
  std::uint64_t seed = 0;
  double sigma = 1.0, beta_cross = 0.4, beta_diag = 0.15;
};

int run_synth(const SynthArgs& a, const Globals& g) {
  SynthOptions opt;
  opt.grid = a.grid;
  opt.classes = a.classes;
  opt.teacher = a.teacher == "linear" ? Teacher::linear : Teacher::nonlinear;
  opt.n_train = a.n_train;
  opt.n_test = a.n_test;
  opt.seed = a.seed;
  opt.sigma = a.sigma;
  if (!a.means.empty()) opt.means = parse_list(a.means, "--means");
  opt.gibbs_sweeps = a.gibbs_sweeps;
  opt.beta_cross = a.beta_cross;
  opt.beta_diag = a.beta_diag;
  opt.validate();
  SyntheticConfig check{opt.grid, opt.grid, opt.classes, potts_filters(opt.classes, opt.beta_cross, opt.beta_diag),
                        opt.resolved_means(), opt.sigma, opt.gibbs_sweeps, opt.seed};
  for (const auto& w : check.warnings()) std::cerr << "warning: " << w << "\n";
  const SyntheticSet set = generate_synthetic(opt);
  const DatasetManifest m = write_synthetic(set, opt, a.out, g.dtype());
  std::cout << "wrote " << m.samples.size() << " samples to " << a.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string dataset, split = "train", out, variant = "linear", mode = "generative", input = "soft";
  std::size_t features = 16, kernel = 3, hidden = 1, batch = 4, epochs = 10, sweeps = 1, checkpoint_every = 0;
  double alpha = 0.1, lr = 1e-3, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  bool bias_trainable = false, flip = false, affine = false;
  std::string affine_mean, affine_cov, loss_csv, checkpoint_dir;
  std::uint64_t seed = 0;
};

int run_train(const TrainArgs& a, const Globals& g) {
  const DatasetManifest m = read_manifest(a.dataset);
  ModelConfig mc;
  mc.classes = m.classes;
  mc.features = a.features;
  mc.kernel_size = a.kernel;
  mc.hidden_layers = a.hidden;
  mc.alpha = a.alpha;
  mc.mode = parse_mode(a.mode);
  mc.variant = parse_variant(a.variant);
  mc.bias_trainable = a.bias_trainable;
  mc.validate();
  for (const auto& w : mc.warnings()) std::cerr << "warning: " << w << "\n";

  TrainConfig tc;
  tc.learning_rate = a.lr;
  tc.beta1 = a.beta1;
  tc.beta2 = a.beta2;
  tc.epsilon = a.eps;
  tc.batch_size = a.batch;
  tc.epochs = a.epochs;
  tc.seed = a.seed;
  tc.flip = a.flip;
  tc.affine = a.affine;
  tc.mode = mc.mode;
  tc.sweeps = a.sweeps;
  if (!a.affine_mean.empty()) {
    const auto v = parse_list(a.affine_mean, "--affine-mean");
    if (v.size() != 6) throw ConfigError("--affine-mean needs 6 values");
    for (int j = 0; j < 6; ++j) tc.affine_sampler.mean[j] = v[static_cast<std::size_t>(j)];
  }
  if (!a.affine_cov.empty()) {
    const auto v = parse_list(a.affine_cov, "--affine-cov");
    if (v.size() == 6) {
      tc.affine_sampler.covariance.setZero();
      for (int j = 0; j < 6; ++j) tc.affine_sampler.covariance(j, j) = v[static_cast<std::size_t>(j)];
    } else if (v.size() == 36) {
      for (int j = 0; j < 36; ++j) tc.affine_sampler.covariance(j / 6, j % 6) = v[static_cast<std::size_t>(j)];
    } else {
      throw ConfigError("--affine-cov needs 6 (diagonal) or 36 (row-major) values");
    }
  }
  tc.validate();

  const auto samples = load_samples(m, a.split, a.input == "onehot" ? InputKind::onehot : InputKind::soft);
  if (samples.empty()) throw ContractError("split '" + a.split + "' has no samples");

  std::string loss_csv = "epoch,loss\n";
  auto on_epoch = [&](std::size_t epoch, const MrfModel& model, double loss) {
    std::cout << "epoch=" << epoch << " loss=" << format_double(loss) << "\n";
    loss_csv += std::to_string(epoch) + "," + format_double(loss) + "\n";
    if (a.checkpoint_every > 0 && epoch % a.checkpoint_every == 0) {
      const fs::path dir = a.checkpoint_dir.empty() ? fs::path(a.out).parent_path() : fs::path(a.checkpoint_dir);
      char name[48];
      std::snprintf(name, sizeof name, "checkpoint_%04zu.mrf", epoch);
      save_model(dir / name, model, g.dtype());
    }
  };
  const TrainResult res = train(samples, MrfModel::initialize(mc, a.seed), tc, on_epoch);
  save_model(a.out, res.model, g.dtype());
  if (!a.loss_csv.empty()) write_file_atomic(a.loss_csv, loss_csv);
  return 0;
}

// ---------------------------------------------------------------------------

struct ApplyArgs {
  std::string model, input, c, out, dataset, split = "test", out_dir, mode, schedule = "jacobi", trace;
  std::size_t colors = 4, sweeps = 10;
  double damping = 1.0, tol = 0.0;
  bool pgm = false;
};

int run_apply(const ApplyArgs& a, const Globals& g) {
  MrfModel model = load_model(a.model);
  if (!a.mode.empty()) model.set_mode(parse_mode(a.mode));
  Schedule sched = a.schedule == "jacobi" ? Schedule::jacobi(a.sweeps) : Schedule::colored(a.colors, a.sweeps);
  sched.damping = a.damping;
  if (a.tol > 0.0) sched.tolerance = a.tol;
  const bool generative = model.config().mode == Mode::generative;

  auto refine = [&](const Grid2D& r0, const Grid2D* c, const fs::path& out, const fs::path& trace) {
    const InferenceResult res = meanfield_run(r0, generative ? c : nullptr, model, sched);
    write_grid(out, res.field, g.dtype());
    if (!trace.empty()) write_file_atomic(trace, trace_csv(res.trace));
    if (a.pgm) {
      fs::path p = out;
      p.replace_extension(".pgm");
      export_pgm(argmax_channels(res.field), model.classes(), p);
    }
  };

  if (!a.dataset.empty()) {
    if (a.out_dir.empty()) throw ConfigError("apply --dataset needs --out-dir");
    const DatasetManifest m = read_manifest(a.dataset);
    for (const auto* e : m.split(a.split)) {
      const Sample s = load_sample(m, *e);
      if (generative && !s.c) throw ContractError("sample " + e->id + " has no log-likelihood field");
      const fs::path trace = a.trace.empty() ? fs::path{} : fs::path(a.trace) / (e->id + "_trace.csv");
      refine(s.r, s.c ? &*s.c : nullptr, fs::path(a.out_dir) / (e->id + ".mrft"), trace);
    }
    return 0;
  }
  if (a.input.empty() || a.out.empty()) throw ConfigError("apply needs --input and --out, or --dataset and --out-dir");
  const Grid2D r0 = read_grid(a.input);
  std::optional<Grid2D> c;
  if (!a.c.empty()) c = read_grid(a.c);
  if (generative && !c) throw ContractError("generative mode needs --c");
  refine(r0, c ? &*c : nullptr, a.out, a.trace);
  return 0;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string dataset, split = "test", refined, out, pgm_dir;
  std::size_t comparisons = 0;
};

int run_eval(const EvalArgs& a, const Globals&) {
  const DatasetManifest m = read_manifest(a.dataset);
  std::vector<std::string> ids;
  std::vector<LabelField> base, ref, truth;
  for (const auto* e : m.split(a.split)) {
    const Sample s = load_sample(m, *e);
    const Grid2D refined = read_grid(fs::path(a.refined) / (e->id + ".mrft"));
    if (!refined.same_shape(s.r)) throw ContractError("refined field for " + e->id + " has the wrong shape");
    ids.push_back(e->id);
    base.push_back(argmax_channels(s.c ? *s.c : s.r));
    ref.push_back(argmax_channels(refined));
    truth.push_back(s.target);
    if (!a.pgm_dir.empty()) {
      export_pgm(base.back(), m.classes, fs::path(a.pgm_dir) / (e->id + "_baseline.pgm"));
      export_pgm(ref.back(), m.classes, fs::path(a.pgm_dir) / (e->id + "_refined.pgm"));
      export_pgm(truth.back(), m.classes, fs::path(a.pgm_dir) / (e->id + "_target.pgm"));
    }
  }
  if (ids.size() < 2) throw ContractError("eval needs at least two subjects in split '" + a.split + "'");
  const EvalReport rep = evaluate_dice(ids, base, ref, truth, m.classes, a.comparisons);
  const std::string csv = eval_csv(rep);
  if (!a.out.empty()) write_file_atomic(a.out, csv);
  for (const auto& c : rep.classes) {
    std::cout << "class=" << c.cls << " dice_baseline=" << format_double(c.mean_baseline)
              << " dice_refined=" << format_double(c.mean_refined) << " welch_p_adj=" << format_double(c.welch_p_adjusted)
              << " paired_p_adj=" << format_double(c.paired_p_adjusted) << " "
              << significance_stars(c.paired_p_adjusted) << "\n";
  }
  return 0;
}

// ---------------------------------------------------------------------------

struct GradcheckArgs {
  GradcheckOptions opt;
  double tol = 1e-4;
  std::string out;
};

int run_gradcheck(const GradcheckArgs& a, const Globals&) {
  const auto groups = gradcheck_suite(a.opt);
  std::string csv = "config,group,count,rel_error\n";
  double worst = 0.0;
  for (const auto& gr : groups) {
    std::cout << gr.label << " " << gr.group << " n=" << gr.count << " rel_error=" << format_double(gr.rel_error)
              << (gr.rel_error < a.tol ? "" : "  FAIL") << "\n";
    csv += gr.label + "," + gr.group + "," + std::to_string(gr.count) + "," + format_double(gr.rel_error) + "\n";
    worst = std::max(worst, gr.rel_error);
  }
  if (!a.out.empty()) write_file_atomic(a.out, csv);
  std::cout << "max_rel_error=" << format_double(worst) << "\n";
  if (!(worst < a.tol)) throw CheckFailed("gradient check exceeded tolerance " + format_double(a.tol));
  return 0;
}

struct OracleArgs {
  std::uint64_t seed = 0;
  std::size_t instances = 1000;
  double tol = 1e-12;
};

int run_oracle(const OracleArgs& a, const Globals&) {
  const auto res = oracle_check(a.seed, a.instances);
  std::cout << "instances=" << res.instances << " max_abs_error=" << format_double(res.max_abs_error) << "\n";
  if (!(res.max_abs_error <= a.tol)) throw CheckFailed("oracle mismatch above " + format_double(a.tol));
  return 0;
}

struct ConvertArgs {
  std::string csv, out;
  std::size_t channels = 1;
  bool labels = false;
};

int run_convert(const ConvertArgs& a, const Globals& g) {
  const Grid2D grid = grid_from_csv(detail::read_file(a.csv), a.labels ? 1 : a.channels);
  if (a.labels) {
    write_labels(a.out, labels_from_raw(RawTensor{{grid.height(), grid.width()}, grid.values(), DType::f32}, a.csv));
  } else {
    write_grid(a.out, grid, g.dtype());
  }
  return 0;
}

// ---------------------------------------------------------------------------

// Turns the key=value file named by --config into command-line arguments
// placed ahead of the user's own, so explicit flags take precedence.
std::vector<std::string> expand_config(const std::vector<std::string>& args, CLI::App& app) {
  std::string path;
  for (std::size_t i = 1; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
    if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
  }
  if (path.empty()) return args;
  const auto kv = read_kv_config(path);

  std::size_t sub_at = 0;
  CLI::App* sub = nullptr;
  for (std::size_t i = 1; i < args.size() && sub == nullptr; ++i) {
    for (auto* s : app.get_subcommands([](CLI::App*) { return true; })) {
      if (s->get_name() == args[i]) {
        sub = s;
        sub_at = i;
      }
    }
  }
  std::vector<std::string> global_args, sub_args;
  for (const auto& [key, value] : kv) {
    std::string name = key;
    CLI::App* scope = nullptr;
    if (const auto dot = key.find('.'); dot != std::string::npos) {
      const std::string prefix = key.substr(0, dot);
      name = key.substr(dot + 1);
      if (sub == nullptr || sub->get_name() != prefix) {
        if (app.get_subcommand_no_throw(prefix) == nullptr) throw ConfigError("config: unknown section '" + prefix + "'");
        continue;  // belongs to another subcommand
      }
      scope = sub;
    }
    const std::string flag = "--" + name;
    if (name == "config") throw ConfigError("config: nested config files are not supported");
    if (app.get_option_no_throw(flag) != nullptr && scope == nullptr) {
      global_args.push_back(flag + "=" + value);
    } else if (sub != nullptr && sub->get_option_no_throw(flag) != nullptr) {
      sub_args.push_back(flag + "=" + value);
    } else if (scope != nullptr) {
      throw ConfigError("config: '" + key + "' is not an option of " + sub->get_name());
    } else {
      bool known = false;
      for (auto* s : app.get_subcommands([](CLI::App*) { return true; }))
        known = known || s->get_option_no_throw(flag) != nullptr;
      if (!known) throw ConfigError("config: unknown key '" + key + "'");
    }
  }
  std::vector<std::string> out{args[0]};
  out.insert(out.end(), global_args.begin(), global_args.end());
  if (sub == nullptr) {
    out.insert(out.end(), args.begin() + 1, args.end());
    return out;
  }
  out.insert(out.end(), args.begin() + 1, args.begin() + static_cast<std::ptrdiff_t>(sub_at) + 1);
  out.insert(out.end(), sub_args.begin(), sub_args.end());
  out.insert(out.end(), args.begin() + static_cast<std::ptrdiff_t>(sub_at) + 1, args.end());
  return out;
}

int fail(ErrorCategory cat, std::string msg) {
  for (char& ch : msg)
    if (ch == '\n' || ch == '\r') ch = ' ';
  std::cerr << "error: category=" << category_name(cat) << " message=" << msg << "\n";
  return static_cast<int>(cat);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Markov random field refinement of soft segmentations"};
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.require_subcommand(1);

  Globals g;
  app.add_option("--threads", g.threads, "worker threads (results are identical for any count)")->check(CLI::PositiveNumber);
  app.add_flag("--f64-io", g.f64_io, "write double-precision tensor payloads");
  app.add_option("--config", g.config, "key=value run configuration; explicit flags override it");

  const std::vector<std::string> modes{"generative", "postprocess"};

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset from a Potts teacher");
  synth->add_option("--out", sa.out, "output directory")->required();
  synth->add_option("--grid", sa.grid, "image side length");
  synth->add_option("--k", sa.classes, "number of classes");
  synth->add_option("--teacher", sa.teacher, "target rule")->check(CLI::IsMember({"linear", "nonlinear"}));
  synth->add_option("--n", sa.n_train, "training images");
  synth->add_option("--n-test", sa.n_test, "test images");
  synth->add_option("--seed", sa.seed);
  synth->add_option("--sigma", sa.sigma, "likelihood noise");
  synth->add_option("--means", sa.means, "comma-separated class means (default 0,1,...)");
  synth->add_option("--gibbs-sweeps", sa.gibbs_sweeps);
  synth->add_option("--beta-cross", sa.beta_cross, "teacher potential on the 4-neighbour cross");
  synth->add_option("--beta-diag", sa.beta_diag, "teacher potential on the diagonals");

  TrainArgs ta;
  auto* trn = app.add_subcommand("train", "fit an MRF model by maximum likelihood");
  trn->add_option("--dataset", ta.dataset, "manifest.json")->required();
  trn->add_option("--split", ta.split);
  trn->add_option("--out", ta.out, "model file")->required();
  trn->add_option("--variant", ta.variant)->check(CLI::IsMember({"linear", "nonlinear"}));
  trn->add_option("--mode", ta.mode)->check(CLI::IsMember(modes));
  trn->add_option("--input", ta.input, "soft: stored R; onehot: one-hot target labels")
      ->check(CLI::IsMember({"soft", "onehot"}));
  trn->add_option("--features", ta.features);
  trn->add_option("--kernel", ta.kernel);
  trn->add_option("--hidden", ta.hidden);
  trn->add_option("--alpha", ta.alpha, "leaky ReLU slope");
  trn->add_flag("--bias-trainable", ta.bias_trainable, "train the linear model's class bias");
  trn->add_option("--lr", ta.lr);
  trn->add_option("--beta1", ta.beta1);
  trn->add_option("--beta2", ta.beta2);
  trn->add_option("--eps", ta.eps);
  trn->add_option("--batch", ta.batch);
  trn->add_option("--epochs", ta.epochs);
  trn->add_option("--sweeps", ta.sweeps, "recurrent mean-field sweeps per forward pass");
  trn->add_option("--seed", ta.seed);
  trn->add_flag("--flip", ta.flip, "random left-right reflection");
  trn->add_flag("--affine", ta.affine, "random affine warps");
  trn->add_option("--affine-mean", ta.affine_mean, "6 Lie-algebra means");
  trn->add_option("--affine-cov", ta.affine_cov, "6 diagonal or 36 row-major covariance entries");
  trn->add_option("--loss-csv", ta.loss_csv);
  trn->add_option("--checkpoint-every", ta.checkpoint_every, "epochs between checkpoints (0 = off)");
  trn->add_option("--checkpoint-dir", ta.checkpoint_dir);

  ApplyArgs aa;
  auto* apl = app.add_subcommand("apply", "run mean-field refinement");
  apl->add_option("--model", aa.model)->required();
  apl->add_option("--input", aa.input, "initial responsibilities R");
  apl->add_option("--c", aa.c, "log-likelihood field (generative mode)");
  apl->add_option("--out", aa.out);
  apl->add_option("--dataset", aa.dataset, "refine every sample of a split instead");
  apl->add_option("--split", aa.split);
  apl->add_option("--out-dir", aa.out_dir);
  apl->add_option("--mode", aa.mode, "override the model's mode")->check(CLI::IsMember(modes));
  apl->add_option("--schedule", aa.schedule)->check(CLI::IsMember({"jacobi", "colored"}));
  apl->add_option("--colors", aa.colors);
  apl->add_option("--sweeps", aa.sweeps);
  apl->add_option("--damping", aa.damping);
  apl->add_option("--tol", aa.tol, "stop once the max change drops below this (0 = run all sweeps)");
  apl->add_option("--trace", aa.trace, "trace CSV (a directory with --dataset)");
  apl->add_flag("--pgm", aa.pgm, "also write the argmax labels as PGM");

  EvalArgs ea;
  auto* evl = app.add_subcommand("eval", "Dice of refined versus argmax(C) labels");
  evl->add_option("--dataset", ea.dataset)->required();
  evl->add_option("--split", ea.split);
  evl->add_option("--refined", ea.refined, "directory of <id>.mrft refined fields")->required();
  evl->add_option("--out", ea.out, "CSV report");
  evl->add_option("--comparisons", ea.comparisons, "Bonferroni m (0 = number of classes)");
  evl->add_option("--pgm-dir", ea.pgm_dir);

  GradcheckArgs ga;
  auto* grc = app.add_subcommand("gradcheck", "finite-difference check of every parameter group");
  grc->add_option("--seed", ga.opt.seed);
  grc->add_option("--grid", ga.opt.grid);
  grc->add_option("--classes", ga.opt.classes);
  grc->add_option("--features", ga.opt.features);
  grc->add_option("--step", ga.opt.step);
  grc->add_option("--tol", ga.tol);
  grc->add_option("--out", ga.out);

  OracleArgs oa;
  auto* orc = app.add_subcommand("oracle-check", "compare the layer against the scalar reference update");
  orc->add_option("--seed", oa.seed);
  orc->add_option("--instances", oa.instances);
  orc->add_option("--tol", oa.tol);

  ConvertArgs ca;
  auto* cnv = app.add_subcommand("convert", "CSV grid to tensor file");
  cnv->add_option("--csv", ca.csv)->required();
  cnv->add_option("--out", ca.out)->required();
  cnv->add_option("--channels", ca.channels);
  cnv->add_flag("--labels", ca.labels, "store as an integer label field");

  try {
    std::vector<std::string> args(argv, argv + argc);
    args = expand_config(args, app);
    std::vector<char*> cargs;
    for (auto& s : args) cargs.push_back(s.data());
    try {
      app.parse(static_cast<int>(cargs.size()), cargs.data());
    } catch (const CLI::CallForHelp& e) {
      return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
      return app.exit(e);
    } catch (const CLI::ParseError& e) {
      return fail(ErrorCategory::usage, e.what());
    }
    set_num_threads(g.threads);
    if (*synth) return run_synth(sa, g);
    if (*trn) return run_train(ta, g);
    if (*apl) return run_apply(aa, g);
    if (*evl) return run_eval(ea, g);
    if (*grc) return run_gradcheck(ga, g);
    if (*orc) return run_oracle(oa, g);
    if (*cnv) return run_convert(ca, g);
    return fail(ErrorCategory::usage, "no subcommand");
  } catch (const Error& e) {
    return fail(e.category(), e.what());
  } catch (const fs::filesystem_error& e) {
    return fail(ErrorCategory::io, e.what());
  } catch (const std::exception& e) {
    return fail(ErrorCategory::internal, e.what());
  }
}
