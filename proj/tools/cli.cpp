#include "cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <map>
#include <sstream>

#include "pipeline.hpp"
#include "vem/em.hpp"
#include "vem/io.hpp"
#include "vem/parallel.hpp"
#include "vem/simulate.hpp"
#include "vem/solver.hpp"
#include "vem/version.hpp"

namespace vem::cli {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using Clock = std::chrono::steady_clock;

class UserError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double x) { return format_double(x); }

// Sibling path with `suffix` replacing the extension of `path`.
std::string sibling(const std::string& path, const std::string& suffix) {
  fs::path p(path);
  p.replace_extension();
  return p.string() + suffix;
}

// Everything needed to reproduce a command: arguments, resolved flags,
// seeds, files and timings. Written next to the primary output.
class Manifest {
 public:
  Manifest(std::string command, const std::vector<std::string>& argv, const CLI::App& sub) {
    j_["command"] = std::move(command);
    j_["argv"] = argv;
    json flags = json::object();
    for (const CLI::Option* opt : sub.get_options()) {
      if (opt->get_lnames().empty() || opt->get_lnames()[0] == "help") continue;
      const std::string name = opt->get_lnames()[0];
      if (opt->count() > 0) {
        const auto& r = opt->results();
        std::string joined;
        for (std::size_t i = 0; i < r.size(); ++i) joined += (i ? " " : "") + r[i];
        flags[name] = opt->get_expected_max() == 0 ? std::string("true") : joined;
      } else {
        flags[name] = opt->get_expected_max() == 0 ? std::string("false") : opt->get_default_str();
      }
    }
    j_["flags"] = flags;
    j_["threads"] = num_threads();
    j_["version"] = kVersion;
    j_["seeds"] = json::object();
    j_["inputs"] = json::array();
    j_["outputs"] = json::array();
    j_["timings"] = json::object();
  }
  void seed(const std::string& name, std::uint64_t v) { j_["seeds"][name] = v; }
  void input(const std::string& path) { j_["inputs"].push_back(path); }
  void output(const std::string& path) { j_["outputs"].push_back(path); }
  void timing(const std::string& name, double s) { j_["timings"][name] = s; }
  void note(const std::string& key, const json& v) { j_[key] = v; }
  void write(const std::string& path) const { write_text_file_atomic(path, j_.dump(2) + "\n"); }

 private:
  json j_;
};

// ---- shared option groups ------------------------------------------------------------

struct PlanFlags {
  std::string ordering = "maximin";
  int m = 10;
  std::string plan_file;
  std::string save_plan;

  void add(CLI::App* c) {
    c->add_option("--ordering", ordering, "Ordering: maximin, coordinate or natural")
        ->check(CLI::IsMember({"maximin", "coordinate", "natural"}));
    c->add_option("--m", m, "Conditioning set size (negative: condition on all earlier points)");
    c->add_option("--plan", plan_file, "Reuse a saved conditioning plan instead of building one");
    c->add_option("--save-plan", save_plan, "Write the conditioning plan to this file");
  }

  VecchiaPlan build(const Dataset& data, Manifest& man) const {
    VecchiaPlan plan;
    if (!plan_file.empty()) {
      plan = read_plan(plan_file);
      if (plan.n != data.size()) throw UserError("plan '" + plan_file + "' does not match the dataset size");
      man.input(plan_file);
    } else {
      plan = plan_for(data.locs, ordering, m);
    }
    if (!save_plan.empty()) {
      write_plan(save_plan, plan);
      man.output(save_plan);
    }
    return plan;
  }
};

struct OptFlags {
  std::string method = "newton";
  std::string grad = "dual";
  int max_evals = 500;
  double grad_tol = 1e-6;

  void add(CLI::App* c, const std::string& what) {
    c->add_option("--method", method, "Optimizer for the " + what + ": newton or bfgs")
        ->check(CLI::IsMember({"newton", "bfgs", "newton_trust_region"}));
    c->add_option("--grad", grad, "Derivatives: dual or fd")->check(CLI::IsMember({"dual", "fd", "finite_diff"}));
    c->add_option("--max-evals", max_evals, "Objective evaluation budget per optimization");
    c->add_option("--grad-tol", grad_tol, "Gradient-norm stopping tolerance");
  }

  OptimizerConfig config() const {
    OptimizerConfig c;
    c.method = parse_opt_method(method);
    c.grad_mode = parse_grad_mode(grad);
    c.max_evals = max_evals;
    c.grad_tol = grad_tol;
    return c;
  }
};

struct EMFlags {
  std::string backend = "sparse";
  bool exact_trace = false;
  std::string symmetrize = "on";
  int saa_count = 72;
  std::uint64_t saa_seed = 1;
  int max_iter = 30;
  double tol = 1e-4;
  double cg_tol = 1e-10;
  bool score_dense = false;
  bool no_score = false;

  void add(CLI::App* c) {
    c->add_option("--backend", backend, "Linear algebra for A = Omega + R^-1: dense, sparse or cg")
        ->check(CLI::IsMember({"dense", "sparse", "cg"}));
    c->add_flag("--exact-trace", exact_trace, "Use a dense inverse instead of probes (small n)");
    c->add_option("--symmetrize", symmetrize, "Symmetrized probes: on or off")->check(CLI::IsMember({"on", "off"}));
    c->add_option("--saa-count", saa_count, "Number of Rademacher probe vectors");
    c->add_option("--saa-seed", saa_seed, "Seed of the probe ensemble");
    c->add_option("--max-iter", max_iter, "Maximum EM iterations");
    c->add_option("--tol", tol, "Stop when the EM step in transformed coordinates is below this");
    c->add_option("--cg-tol", cg_tol, "Relative residual for the cg backend");
    c->add_flag("--score-dense", score_dense, "Score iterates by the dense-assembled approximate NLL");
    c->add_flag("--no-score", no_score, "Do not compute the approximate NLL per iteration");
  }

  EMConfig config(const OptimizerConfig& mstep) const {
    EMConfig c;
    c.trace = exact_trace ? TraceMode::exact : symmetrize == "on" ? TraceMode::symmetrized : TraceMode::unsymmetrized;
    c.solver.backend = parse_backend(backend);
    c.solver.cg_tol = cg_tol;
    c.saa_count = saa_count;
    c.saa_seed = saa_seed;
    c.max_iter = max_iter;
    c.tol = tol;
    c.score = !no_score;
    c.score_dense = score_dense;
    c.mstep = mstep;
    c.validate();
    return c;
  }
};

// ---- file helpers --------------------------------------------------------------------------

Dataset load_dataset(const std::string& path, Manifest& man) {
  Dataset d = read_dataset_csv(path);
  man.input(path);
  return d;
}

ModelConfig load_model(const std::string& path, Manifest& man, bool need_noise = true) {
  ModelConfig c = read_config(path);
  if (need_noise && !c.noise) throw UserError("parameter file '" + path + "' has no noise model");
  man.input(path);
  return c;
}

// Tuple shorthand or a parameter file.
ModelConfig model_from_flag(const std::string& text, Manifest& man) {
  if (!text.empty() && text.front() == '(') return parse_iso_tuple(text);
  return load_model(text, man);
}

void check_dims(const ModelConfig& c, const Dataset& d, const std::string& what) {
  if (std::holds_alternative<AnisoKnotParams>(c.kernel) && d.dim() != 2)
    throw UserError(what + ": the anisotropic kernel needs 2-dimensional locations");
}

void write_params(const std::string& path, const EMProblem& p, const Eigen::VectorXd& theta, Manifest& man) {
  write_config(path, ModelConfig{p.kernel_at(theta), p.noise_at(theta)});
  man.output(path);
}

CsvTable opt_trace_table(const std::vector<OptTraceRow>& trace) {
  CsvTable t({"iteration", "evals", "f", "grad_norm", "step_norm"});
  for (const auto& r : trace)
    t.add_row({std::to_string(r.iteration), std::to_string(r.evals), fmt(r.f), fmt(r.grad_norm), fmt(r.step_norm)});
  return t;
}

Locations read_targets(const std::string& path, int dim) {
  const NumericCsv csv = parse_numeric_csv(read_text_file(path));
  if (static_cast<int>(csv.header.size()) < dim) throw UserError("targets file needs columns x1..x" + std::to_string(dim));
  for (int k = 0; k < dim; ++k)
    if (csv.header[k] != "x" + std::to_string(k + 1))
      throw UserError("targets file header must start with x1..x" + std::to_string(dim));
  Locations t(static_cast<Eigen::Index>(csv.rows.size()), dim);
  for (std::size_t i = 0; i < csv.rows.size(); ++i)
    for (int k = 0; k < dim; ++k) t(static_cast<Eigen::Index>(i), k) = csv.rows[i][k];
  return t;
}

// ---- commands ----------------------------------------------------------------------------

struct Global {
  int threads = 1;
  bool force_dense = false;
  std::vector<std::string> argv;
  std::ostream* out = &std::cout;
};

void add_simulate(CLI::App& app, Global& g) {
  auto* c = app.add_subcommand("simulate", "Simulate datasets from a Matern model with a nugget");
  auto o = std::make_shared<std::tuple<int, std::string, std::uint64_t, int, int, std::string, std::string, bool>>(
      2000, "(10, 0.025, 2.25, 0.25)", 1, 1, 2, ".", "data", false);
  auto& [n, params, seed, reps, dim, out, prefix, no_latent] = *o;
  c->add_option("--n", n, "Observations per dataset")->check(CLI::PositiveNumber);
  c->add_option("--params", params, "True parameters: tuple '(sigma2, rho, nu, eta2)' or a parameter file");
  c->add_option("--seed", seed, "Master seed");
  c->add_option("--replicates", reps, "Number of datasets")->check(CLI::PositiveNumber);
  c->add_option("--dim", dim, "Dimension of the unit cube")->check(CLI::PositiveNumber);
  c->add_option("--out", out, "Output directory");
  c->add_option("--prefix", prefix, "Dataset file prefix: <out>/<prefix>-NNN.csv");
  c->add_flag("--no-latent", no_latent, "Omit the latent z column");
  c->callback([c, o, &g] {
    auto& [n, params, seed, reps, dim, out, prefix, no_latent] = *o;
    const auto t0 = Clock::now();
    Manifest man("simulate", g.argv, *c);
    man.seed("master", seed);
    const ModelConfig truth = model_from_flag(params, man);
    if (!truth.noise) throw UserError("simulation needs a noise model");
    if (std::holds_alternative<AnisoKnotParams>(truth.kernel) && dim != 2)
      throw UserError("the anisotropic kernel needs --dim 2");
    std::vector<std::string> files(static_cast<std::size_t>(reps));
    for (int i = 0; i < reps; ++i) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "-%03d.csv", i);
      files[i] = (fs::path(out) / (prefix + buf)).string();
    }
    check_dense_size(n, 2, g.force_dense);
    parallel_for(reps, [&](int i) {
      const Locations locs = sample_locations(n, dim, location_seed(seed, i));
      const GpSample s = sample_gp(truth.kernel, &*truth.noise, locs, sample_seed(seed, i), g.force_dense);
      Dataset d{locs, s.y, std::nullopt};
      if (!no_latent) d.z = s.z;
      write_dataset_csv(files[i], d);
    });
    for (const auto& f : files) man.output(f);
    const std::string truth_path = (fs::path(out) / (prefix + ".truth.params")).string();
    write_config(truth_path, truth);
    man.output(truth_path);
    man.timing("total", seconds_since(t0));
    man.write((fs::path(out) / (prefix + ".manifest.json")).string());
    *g.out << "wrote " << reps << " dataset(s) of n=" << n << " to " << out << "\n";
  });
}

struct FitFlags {
  std::string data, init, out, trace_path;
  int restarts = 1;
  std::uint64_t seed = 1;
  PlanFlags plan;
  OptFlags opt;
};

// Problem with the model shape from --init or the heuristic start.
std::pair<std::shared_ptr<const EMProblem>, Eigen::VectorXd> setup_problem(const FitFlags& f, const Dataset& d,
                                                                            Manifest& man) {
  const ModelConfig init = f.init.empty() ? heuristic_init(d.locs, d.y) : load_model(f.init, man);
  check_dims(init, d, "init");
  VecchiaPlan plan = f.plan.build(d, man);
  auto p = make_em_problem(d.locs, d.y, std::move(plan), init.kernel, *init.noise);
  return {p, pack_theta(init.kernel, *init.noise)};
}

void add_fit_vecchia(CLI::App& app, Global& g) {
  auto* c = app.add_subcommand("fit-vecchia", "Maximum-likelihood fit of the naive Vecchia approximation");
  auto f = std::make_shared<FitFlags>();
  c->add_option("--data", f->data, "Dataset CSV")->required();
  c->add_option("--init", f->init, "Starting parameter file (default: scaled to the data)");
  c->add_option("--out", f->out, "Fitted parameter file (default: <data>.vecchia.params)");
  c->add_option("--trace", f->trace_path, "Optimizer trace CSV (default: <out>.trace.csv)");
  c->add_option("--restarts", f->restarts, "Additional randomly perturbed starts, best kept")->check(CLI::PositiveNumber);
  c->add_option("--seed", f->seed, "Seed for restart perturbations");
  f->plan.add(c);
  f->opt.add(c, "likelihood");
  c->callback([c, f, &g] {
    const auto t0 = Clock::now();
    Manifest man("fit-vecchia", g.argv, *c);
    man.seed("restarts", f->seed);
    const std::string out = f->out.empty() ? sibling(f->data, ".vecchia.params") : f->out;
    const std::string trace = f->trace_path.empty() ? sibling(out, ".trace.csv") : f->trace_path;
    const Dataset d = load_dataset(f->data, man);
    auto [problem, start] = setup_problem(*f, d, man);
    const NaiveFit fit = fit_naive_restarts(problem, start, f->opt.config(), f->restarts, f->seed);
    if (!std::isfinite(fit.nll)) throw std::runtime_error("naive Vecchia fit produced a non-finite likelihood");
    write_params(out, *problem, fit.theta, man);
    opt_trace_table(fit.opt.trace).write(trace);
    man.output(trace);
    man.note("result", {{"nll", fit.nll}, {"status", status_name(fit.opt.status)}, {"iterations", fit.opt.iterations}});
    man.timing("total", seconds_since(t0));
    man.write(sibling(out, ".manifest.json"));
    *g.out << "nll " << fmt(fit.nll) << "\nstatus " << status_name(fit.opt.status) << "\nparams " << out << "\n";
  });
}

struct EmCmdFlags {
  FitFlags fit;
  EMFlags em;
  std::string history;
};

CsvTable history_table(const std::vector<EMHistoryRow>& rows, const EMProblem& p) {
  const ModelConfig shape{p.kernel_shape, p.noise_shape};
  std::vector<std::string> header{"iteration"};
  for (auto& n : p.param_names()) header.push_back(n);
  for (const char* h : {"e_value", "vecchia_nll", "mstep_status", "mstep_iterations"}) header.emplace_back(h);
  CsvTable t(header);
  for (const auto& r : rows) {
    std::vector<std::string> cells{std::to_string(r.iteration)};
    for (double v : natural_values(shape, r.theta)) cells.push_back(fmt(v));
    cells.push_back(fmt(r.e_value));
    cells.push_back(fmt(r.vecchia_nll));
    cells.push_back(csv_safe(r.mstep_status.empty() ? "none" : r.mstep_status));
    cells.push_back(std::to_string(r.mstep_iterations));
    t.add_row(std::move(cells));
  }
  return t;
}

void add_fit_em(CLI::App& app, Global& g) {
  auto* c = app.add_subcommand("fit-em", "Refine parameters by EM with stochastic trace estimation");
  auto f = std::make_shared<EmCmdFlags>();
  c->add_option("--data", f->fit.data, "Dataset CSV")->required();
  c->add_option("--init", f->fit.init, "Starting parameter file (default: naive Vecchia fit)");
  c->add_option("--out", f->fit.out, "Fitted parameter file (default: <data>.em.params)");
  c->add_option("--history", f->history, "Per-iteration history CSV (default: <out>.history.csv)");
  c->add_option("--restarts", f->fit.restarts, "Restarts of the internal naive fit")->check(CLI::PositiveNumber);
  c->add_option("--seed", f->fit.seed, "Seed for restart perturbations");
  f->fit.plan.add(c);
  f->fit.opt.add(c, "M step");
  f->em.add(c);
  c->callback([c, f, &g] {
    const auto t0 = Clock::now();
    Manifest man("fit-em", g.argv, *c);
    man.seed("saa", f->em.saa_seed);
    man.seed("restarts", f->fit.seed);
    const std::string out = f->fit.out.empty() ? sibling(f->fit.data, ".em.params") : f->fit.out;
    const std::string history = f->history.empty() ? sibling(out, ".history.csv") : f->history;
    const EMConfig cfg = f->em.config(f->fit.opt.config());
    if (cfg.trace == TraceMode::exact || cfg.solver.backend == Backend::dense || cfg.score_dense) {
      const Dataset peek = read_dataset_csv(f->fit.data);
      check_dense_size(peek.size(), 2, g.force_dense);
    }
    const Dataset d = load_dataset(f->fit.data, man);
    auto [problem, start] = setup_problem(f->fit, d, man);
    if (f->fit.init.empty()) {
      const auto tn = Clock::now();
      const NaiveFit naive = fit_naive_restarts(problem, start, f->fit.opt.config(), f->fit.restarts, f->fit.seed);
      start = naive.theta;
      const std::string naive_path = sibling(out, ".init.params");
      write_params(naive_path, *problem, start, man);
      man.note("initializer", {{"nll", naive.nll}, {"status", status_name(naive.opt.status)}});
      man.timing("initializer", seconds_since(tn));
    }
    const EMState st = em_fit(problem, start, cfg);
    write_params(out, *problem, st.theta0, man);
    history_table(st.history, *problem).write(history);
    man.output(history);
    man.note("result", {{"status", st.status}, {"iterations", st.iteration}});
    json iter_seconds = json::array();
    for (const auto& r : st.history) iter_seconds.push_back(r.seconds);
    man.note("iteration_seconds", iter_seconds);
    man.timing("total", seconds_since(t0));
    man.write(sibling(out, ".manifest.json"));
    *g.out << "status " << st.status << "\niterations " << st.iteration << "\nparams " << out << "\n";
  });
}

void add_exact_nll(CLI::App& app, Global& g) {
  auto* c = app.add_subcommand("exact-nll", "Exact dense negative log-likelihood of a dataset");
  auto o = std::make_shared<std::tuple<std::string, std::string, std::vector<std::string>, std::string>>();
  auto& [data, params, diff, out] = *o;
  c->add_option("--data", data, "Dataset CSV")->required();
  auto* p = c->add_option("--params", params, "Parameter file");
  auto* dflag = c->add_option("--diff", diff, "Two parameter files A B: report nll(A) - nll(B)")->expected(2);
  p->excludes(dflag);
  c->add_option("--out", out, "Also write the result as JSON to this file");
  c->callback([c, o, &g] {
    auto& [data, params, diff, out] = *o;
    if (params.empty() && diff.empty()) throw UserError("exact-nll needs --params or --diff");
    const auto t0 = Clock::now();
    Manifest man("exact-nll", g.argv, *c);
    const Dataset d = load_dataset(data, man);
    auto nll = [&](const std::string& path) {
      const ModelConfig m = load_model(path, man);
      return exact_nll(m.kernel, *m.noise, d.locs, d.y, g.force_dense);
    };
    json result;
    if (!diff.empty()) {
      const double a = nll(diff[0]), b = nll(diff[1]);
      result = {{"nll_a", a}, {"nll_b", b}, {"diff", a - b}};
      *g.out << "nll_a " << fmt(a) << "\nnll_b " << fmt(b) << "\ndiff " << fmt(a - b) << "\n";
    } else {
      const double v = nll(params);
      result = {{"nll", v}};
      *g.out << "nll " << fmt(v) << "\n";
    }
    if (!out.empty()) {
      write_text_file_atomic(out, result.dump(2) + "\n");
      man.output(out);
      man.timing("total", seconds_since(t0));
      man.write(sibling(out, ".manifest.json"));
    }
  });
}

void add_predict(CLI::App& app, Global& g) {
  auto* c = app.add_subcommand("predict", "Nearest-neighbour kriging of the latent process");
  auto o = std::make_shared<std::tuple<std::string, std::string, std::string, int, std::string, std::string>>(
      "", "", "", 500, "", "");
  auto& [data, params, targets, k, compare, out] = *o;
  c->add_option("--data", data, "Dataset CSV")->required();
  c->add_option("--params", params, "Parameter file")->required();
  c->add_option("--targets", targets, "Target CSV with columns x1..xd (default: center of the bounding box)");
  c->add_option("--k", k, "Number of nearest neighbours")->check(CLI::PositiveNumber);
  c->add_option("--compare", compare, "Second parameter file; adds its mean and |difference|");
  c->add_option("--out", out, "Prediction CSV (default: <data>.pred.csv)");
  c->callback([c, o, &g] {
    auto& [data, params, targets, k, compare, out] = *o;
    const auto t0 = Clock::now();
    Manifest man("predict", g.argv, *c);
    const std::string path = out.empty() ? sibling(data, ".pred.csv") : out;
    const Dataset d = load_dataset(data, man);
    const ModelConfig m = load_model(params, man);
    if (k > d.size()) throw UserError("--k exceeds the number of observations");
    Locations t;
    if (targets.empty()) {
      t = (0.5 * (d.locs.colwise().minCoeff() + d.locs.colwise().maxCoeff())).eval();
    } else {
      t = read_targets(targets, d.dim());
      man.input(targets);
    }
    const auto pred = predict_nn(m.kernel, *m.noise, d.locs, d.y, t, k);
    std::vector<Prediction> other;
    if (!compare.empty()) {
      const ModelConfig m2 = load_model(compare, man);
      other = predict_nn(m2.kernel, *m2.noise, d.locs, d.y, t, k);
    }
    std::vector<std::string> header;
    for (int i = 0; i < d.dim(); ++i) header.push_back("x" + std::to_string(i + 1));
    header.insert(header.end(), {"mean", "var"});
    if (!other.empty()) header.insert(header.end(), {"mean_compare", "abs_diff"});
    CsvTable table(header);
    for (Eigen::Index i = 0; i < t.rows(); ++i) {
      std::vector<std::string> row;
      for (int j = 0; j < d.dim(); ++j) row.push_back(fmt(t(i, j)));
      row.push_back(fmt(pred[i].mean));
      row.push_back(fmt(pred[i].var));
      if (!other.empty()) {
        row.push_back(fmt(other[i].mean));
        row.push_back(fmt(std::fabs(pred[i].mean - other[i].mean)));
      }
      table.add_row(std::move(row));
    }
    table.write(path);
    man.output(path);
    man.timing("total", seconds_since(t0));
    man.write(sibling(path, ".manifest.json"));
    *g.out << "wrote " << t.rows() << " prediction(s) to " << path << "\n";
  });
}

void add_diagnose_saa(CLI::App& app, Global& g) {
  auto* c = app.add_subcommand("diagnose-saa", "Repeat one M step with nested probe sets of growing size");
  struct Flags {
    std::string data, params, out;
    std::vector<int> counts{5, 25, 50, 75, 100, 125};
    PlanFlags plan;
    OptFlags opt;
    EMFlags em;
  };
  auto f = std::make_shared<Flags>();
  c->add_option("--data", f->data, "Dataset CSV")->required();
  c->add_option("--params", f->params, "Parameter file for theta0")->required();
  c->add_option("--counts", f->counts, "Probe counts, comma separated")->delimiter(',');
  c->add_option("--out", f->out, "Table CSV (default: <data>.saa.csv)");
  f->plan.add(c);
  f->opt.add(c, "M step");
  f->em.add(c);
  c->callback([c, f, &g] {
    const auto t0 = Clock::now();
    Manifest man("diagnose-saa", g.argv, *c);
    man.seed("saa", f->em.saa_seed);
    for (int k : f->counts)
      if (k < 1) throw UserError("probe counts must be positive");
    if (f->em.exact_trace) throw UserError("diagnose-saa needs probes; drop --exact-trace");
    const std::string path = f->out.empty() ? sibling(f->data, ".saa.csv") : f->out;
    const Dataset d = load_dataset(f->data, man);
    const ModelConfig m = load_model(f->params, man);
    check_dims(m, d, "params");
    auto problem = make_em_problem(d.locs, d.y, f->plan.build(d, man), m.kernel, *m.noise);
    EMConfig cfg = f->em.config(f->opt.config());
    const auto rows = saa_diagnostic(problem, pack_theta(m.kernel, *m.noise), f->counts, cfg);
    std::vector<std::string> header{"count"};
    for (auto& n : problem->param_names()) header.push_back(n);
    header.insert(header.end(), {"e_value", "status"});
    CsvTable table(header);
    const ModelConfig shape{problem->kernel_shape, problem->noise_shape};
    for (const auto& r : rows) {
      std::vector<std::string> cells{std::to_string(r.count)};
      for (double v : natural_values(shape, r.theta)) cells.push_back(fmt(v));
      cells.push_back(fmt(r.e_value));
      cells.push_back(csv_safe(r.status));
      table.add_row(std::move(cells));
    }
    table.write(path);
    man.output(path);
    man.timing("total", seconds_since(t0));
    man.write(sibling(path, ".manifest.json"));
    *g.out << "wrote " << rows.size() << " row(s) to " << path << "\n";
  });
}

double median(std::vector<double> v) {
  if (v.empty()) return std::nan("");
  std::sort(v.begin(), v.end());
  const std::size_t h = v.size() / 2;
  return v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

void add_study(CLI::App& app, Global& g) {
  auto* c = app.add_subcommand("study", "Simulation study: simulate, naive fit, EM refinement and scoring");
  struct Flags {
    int replicates = 50;
    int n = 2000;
    std::string params = "(10, 0.025, 2.25, 0.25)";
    std::uint64_t seed = 1;
    std::string ordering = "maximin";
    int m = 10;
    int k = 500;
    std::string start = "truth";
    bool no_exact = false;
    std::string out = "study.csv";
    OptFlags opt;
    EMFlags em;
  };
  auto f = std::make_shared<Flags>();
  c->add_option("--replicates", f->replicates, "Number of replicates")->check(CLI::PositiveNumber);
  c->add_option("--n", f->n, "Observations per replicate")->check(CLI::PositiveNumber);
  c->add_option("--params", f->params, "True parameters: tuple or parameter file");
  c->add_option("--seed", f->seed, "Master seed");
  c->add_option("--ordering", f->ordering, "Ordering")->check(CLI::IsMember({"maximin", "coordinate", "natural"}));
  c->add_option("--m", f->m, "Conditioning set size");
  c->add_option("--k", f->k, "Neighbours for the center-point prediction")->check(CLI::PositiveNumber);
  c->add_option("--start", f->start, "Naive optimizer start: truth or heuristic")
      ->check(CLI::IsMember({"truth", "heuristic"}));
  c->add_flag("--no-exact", f->no_exact, "Skip the dense exact NLL scoring");
  c->add_option("--out", f->out, "Per-replicate results CSV");
  f->opt.add(c, "fits");
  f->em.add(c);
  c->callback([c, f, &g] {
    const auto t0 = Clock::now();
    Manifest man("study", g.argv, *c);
    man.seed("master", f->seed);
    man.seed("saa", f->em.saa_seed);
    StudyConfig s;
    s.n = f->n;
    s.truth = model_from_flag(f->params, man);
    if (!s.truth.noise) throw UserError("study truth needs a noise model");
    s.seed = f->seed;
    s.ordering = f->ordering;
    s.m = f->m;
    s.k = f->k;
    s.start_at_truth = f->start == "truth";
    s.exact = !f->no_exact;
    s.force_dense = g.force_dense;
    s.naive = f->opt.config();
    s.em = f->em.config(f->opt.config());
    check_dense_size(s.n, 2, g.force_dense);
    const auto rows = run_study(s, f->replicates, [&](const StudyRow& r) {
      *g.out << "replicate " << r.replicate << " " << r.status << "\n" << std::flush;
    });
    study_table(rows, s.truth).write(f->out);
    man.output(f->out);
    const std::string timings = sibling(f->out, ".timings.csv");
    study_timings_table(rows).write(timings);
    man.output(timings);
    // Summary of the acceptance statistics.
    const auto names = param_names(s.truth);
    const auto nu_it = std::find(names.begin(), names.end(), "nu");
    int ok = 0, em_wins = 0;
    std::vector<double> nu_naive, nu_em;
    for (const auto& r : rows) {
      if (r.status != "ok") continue;
      ++ok;
      if (s.exact && r.exact_em <= r.exact_naive) ++em_wins;
      if (nu_it != names.end()) {
        const auto idx = static_cast<std::size_t>(nu_it - names.begin());
        nu_naive.push_back(natural_values(s.truth, r.naive)[idx]);
        nu_em.push_back(natural_values(s.truth, r.em)[idx]);
      }
    }
    json summary = {{"replicates", f->replicates}, {"succeeded", ok}};
    if (s.exact) summary["em_not_worse_than_naive"] = em_wins;
    if (!nu_em.empty()) {
      summary["median_nu_naive"] = median(nu_naive);
      summary["median_nu_em"] = median(nu_em);
    }
    man.note("summary", summary);
    man.timing("total", seconds_since(t0));
    man.write(sibling(f->out, ".manifest.json"));
    *g.out << summary.dump() << "\n";
  });
}

void add_replay(CLI::App& app, Global& g, std::ostream& err, int& replay_code) {
  auto* c = app.add_subcommand("replay", "Re-run the command recorded in a manifest");
  auto path = std::make_shared<std::string>();
  c->add_option("--manifest", *path, "Manifest JSON written by an earlier command")->required();
  c->callback([path, &g, &err, &replay_code] {
    json j;
    try {
      j = json::parse(read_text_file(*path));
    } catch (const json::exception& e) {
      throw UserError("cannot parse manifest '" + *path + "': " + e.what());
    }
    if (!j.contains("argv") || !j["argv"].is_array()) throw UserError("manifest has no argv");
    const auto argv = j["argv"].get<std::vector<std::string>>();
    if (!argv.empty() && std::find(argv.begin(), argv.end(), "replay") != argv.end())
      throw UserError("refusing to replay a replay");
    std::vector<std::string> args = argv;
    if (j.contains("threads") && std::find(args.begin(), args.end(), "--threads") == args.end()) {
      args.insert(args.begin(), std::to_string(j["threads"].get<int>()));
      args.insert(args.begin(), "--threads");
    }
    replay_code = run(args, *g.out, err);
  });
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Vecchia-approximated Gaussian-process likelihoods, EM refinement and dense oracles"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);
  app.fallthrough();
  app.option_defaults()->always_capture_default();
  Global g;
  g.argv = args;
  g.out = &out;
  app.add_option("--threads", g.threads, "Worker threads (results do not depend on this)")->check(CLI::PositiveNumber);
  app.add_flag("--force-dense", g.force_dense, "Allow dense work above the size guard");
  int replay_code = kExitOk;
  add_simulate(app, g);
  add_fit_vecchia(app, g);
  add_fit_em(app, g);
  add_exact_nll(app, g);
  add_predict(app, g);
  add_diagnose_saa(app, g);
  add_study(app, g);
  add_replay(app, g, err, replay_code);
  app.parse_complete_callback([&g] { set_num_threads(g.threads); });

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUser;
  } catch (const UserError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUser;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return kExitUser;
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUser;
  } catch (const DenseGuardError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUser;
  } catch (const std::exception& e) {
    err << "numerical failure: " << e.what() << "\n";
    return kExitNumeric;
  }
  return replay_code;
}

}  // namespace vem::cli
