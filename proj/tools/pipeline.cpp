#include "pipeline.hpp"

#include <chrono>
#include <cmath>
#include <mutex>
#include <random>

#include "vem/parallel.hpp"
#include "vem/simulate.hpp"
#include "vem/solver.hpp"

namespace vem {

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double x) { return format_double(x); }

}  // namespace

VecchiaPlan plan_for(const Locations& locs, const std::string& ordering, int m) {
  if (m == 0) throw std::invalid_argument("conditioning set size m must be nonzero (negative means full)");
  const ConditioningMode mode = m < 0 ? ConditioningMode::full() : ConditioningMode::nearest(m);
  return build_conditioning(locs, make_order(locs, ordering), mode, ordering);
}

ModelConfig heuristic_init(const Locations& locs, const Eigen::VectorXd& y) {
  const double mean = y.mean();
  double var = (y.array() - mean).square().sum() / std::max<Eigen::Index>(1, y.size() - 1);
  if (!(var > 0.0)) var = 1.0;
  const double width = (locs.colwise().maxCoeff() - locs.colwise().minCoeff()).maxCoeff();
  const double rho = width > 0.0 ? 0.1 * width : 1.0;
  ModelConfig c;
  c.kernel = MaternIsoParams{0.8 * var, rho, 1.0};
  c.noise = ConstNuggetT<double>{0.2 * var};
  return c;
}

NaiveFit fit_naive_restarts(std::shared_ptr<const EMProblem> problem, const Eigen::VectorXd& init,
                            const OptimizerConfig& config, int restarts, std::uint64_t seed) {
  if (restarts < 1) throw std::invalid_argument("restarts must be at least 1");
  NaiveFit best = fit_naive_vecchia(problem, init, config);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 0.5);
  for (int r = 1; r < restarts; ++r) {
    Eigen::VectorXd start = init;
    for (Eigen::Index i = 0; i < start.size(); ++i) start(i) += g(rng);
    NaiveFit fit = fit_naive_vecchia(problem, start, config);
    if (fit.nll < best.nll) best = std::move(fit);
  }
  return best;
}

std::uint64_t location_seed(std::uint64_t master, int replicate) {
  return derive_seed(master, 2 * static_cast<std::uint64_t>(replicate));
}

std::uint64_t sample_seed(std::uint64_t master, int replicate) {
  return derive_seed(master, 2 * static_cast<std::uint64_t>(replicate) + 1);
}

StudyRow run_study_replicate(const StudyConfig& config, int replicate) {
  StudyRow row;
  row.replicate = replicate;
  if (!config.truth.noise) throw std::invalid_argument("study truth needs a noise model");
  const KernelModel& k0 = config.truth.kernel;
  const NoiseModel& r0 = *config.truth.noise;
  row.truth = pack_theta(k0, r0);
  const std::string stage_names[] = {"simulate", "naive fit", "EM", "scoring"};
  int stage = 0;
  try {
    auto t0 = std::chrono::steady_clock::now();
    const Locations locs = sample_locations(config.n, 2, location_seed(config.seed, replicate));
    const GpSample sample = sample_gp(k0, &r0, locs, sample_seed(config.seed, replicate), config.force_dense);
    auto problem = make_em_problem(locs, sample.y, plan_for(locs, config.ordering, config.m), k0, r0);
    row.seconds_sim = seconds_since(t0);

    stage = 1;
    t0 = std::chrono::steady_clock::now();
    const Eigen::VectorXd start = config.start_at_truth ? row.truth : [&] {
      const ModelConfig h = heuristic_init(locs, sample.y);
      return pack_theta(h.kernel, *h.noise);
    }();
    const NaiveFit naive = fit_naive_vecchia(problem, start, config.naive);
    row.naive = naive.theta;
    row.naive_status = status_name(naive.opt.status);
    row.seconds_naive = seconds_since(t0);

    stage = 2;
    t0 = std::chrono::steady_clock::now();
    const EMState em = em_fit(problem, row.naive, config.em);
    row.em = em.theta0;
    row.em_status = em.status;
    row.em_iterations = em.iteration;
    row.seconds_em = seconds_since(t0);

    stage = 3;
    t0 = std::chrono::steady_clock::now();
    row.naive_vecchia_nll = approx_marginal_nll(*problem, row.naive, false);
    row.em_vecchia_nll = em.history.back().vecchia_nll;
    if (config.exact) {
      auto nll = [&](const Eigen::VectorXd& th) {
        return exact_nll(problem->kernel_at(th), problem->noise_at(th), locs, sample.y, config.force_dense);
      };
      row.exact_truth = nll(row.truth);
      row.exact_naive = nll(row.naive);
      row.exact_em = nll(row.em);
    } else {
      row.exact_truth = row.exact_naive = row.exact_em = std::nan("");
    }
    Locations center(1, 2);
    center << 0.5, 0.5;
    const int k = std::min(config.k, config.n);
    auto pred = [&](const Eigen::VectorXd& th) {
      return predict_nn(problem->kernel_at(th), problem->noise_at(th), locs, sample.y, center, k)[0].mean;
    };
    const double zc = pred(row.truth);
    row.pred_naive = std::fabs(zc - pred(row.naive));
    row.pred_em = std::fabs(zc - pred(row.em));
    row.seconds_exact = seconds_since(t0);
  } catch (const std::exception& e) {
    row.status = "failed in " + stage_names[stage] + ": " + e.what();
  }
  return row;
}

std::vector<StudyRow> run_study(const StudyConfig& config, int replicates,
                                const std::function<void(const StudyRow&)>& on_done) {
  if (replicates < 1) throw std::invalid_argument("replicates must be at least 1");
  config.em.validate();
  std::vector<StudyRow> rows(static_cast<std::size_t>(replicates));
  std::mutex mu;
  parallel_for(replicates, [&](int i) {
    rows[static_cast<std::size_t>(i)] = run_study_replicate(config, i);
    if (on_done) {
      std::lock_guard<std::mutex> lock(mu);
      on_done(rows[static_cast<std::size_t>(i)]);
    }
  });
  return rows;
}

std::vector<std::string> param_names(const ModelConfig& shape) {
  auto names = kernel_param_names(shape.kernel);
  if (shape.noise)
    for (auto& n : noise_param_names(*shape.noise)) names.push_back(n);
  return names;
}

std::vector<double> natural_values(const ModelConfig& shape, const Eigen::VectorXd& theta) {
  const int kd = kernel_param_count(shape.kernel);
  const int nd = shape.noise ? noise_param_count(*shape.noise) : 0;
  if (theta.size() != kd + nd) throw std::invalid_argument("parameter vector does not match the model");
  auto out = kernel_natural_values(unpack_kernel(Eigen::VectorXd(theta.head(kd)), shape.kernel));
  if (shape.noise)
    for (double v : noise_natural_values(unpack_noise(Eigen::VectorXd(theta.tail(nd)), *shape.noise)))
      out.push_back(v);
  return out;
}

std::string csv_safe(std::string text) {
  for (char& c : text)
    if (c == ',' || c == '\n' || c == '\r') c = ';';
    else if (c == '"') c = '\'';
  return text;
}

CsvTable study_table(const std::vector<StudyRow>& rows, const ModelConfig& shape) {
  const std::vector<std::string> names = param_names(shape);
  std::vector<std::string> header{"replicate", "status"};
  for (const char* prefix : {"naive_", "em_"})
    for (const auto& n : names) header.push_back(prefix + n);
  for (const char* h : {"naive_status", "em_status", "em_iterations", "naive_vecchia_nll", "em_vecchia_nll",
                        "exact_nll_truth", "exact_nll_naive", "exact_nll_em", "pred_err_naive", "pred_err_em"})
    header.emplace_back(h);
  CsvTable table(header);
  const std::size_t p = names.size();
  for (const StudyRow& r : rows) {
    std::vector<std::string> cells{std::to_string(r.replicate), csv_safe(r.status)};
    for (const Eigen::VectorXd* th : {&r.naive, &r.em}) {
      if (th->size() == static_cast<Eigen::Index>(p))
        for (double v : natural_values(shape, *th)) cells.push_back(fmt(v));
      else
        for (std::size_t i = 0; i < p; ++i) cells.push_back("nan");
    }
    cells.push_back(r.naive_status.empty() ? "none" : csv_safe(r.naive_status));
    cells.push_back(r.em_status.empty() ? "none" : csv_safe(r.em_status));
    cells.push_back(std::to_string(r.em_iterations));
    for (double v : {r.naive_vecchia_nll, r.em_vecchia_nll, r.exact_truth, r.exact_naive, r.exact_em, r.pred_naive,
                     r.pred_em})
      cells.push_back(fmt(v));
    table.add_row(std::move(cells));
  }
  return table;
}

CsvTable study_timings_table(const std::vector<StudyRow>& rows) {
  CsvTable t({"replicate", "seconds_sim", "seconds_naive", "seconds_em", "seconds_score"});
  for (const StudyRow& r : rows)
    t.add_row({std::to_string(r.replicate), fmt(r.seconds_sim), fmt(r.seconds_naive), fmt(r.seconds_em),
               fmt(r.seconds_exact)});
  return t;
}

}  // namespace vem
