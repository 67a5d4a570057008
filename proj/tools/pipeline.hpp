#pragma once

// Fitting pipeline shared by the command-line tool and the acceptance runs:
// plan construction, default starting values, naive fits with restarts and
// one replicate of the simulation study.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "vem/em.hpp"
#include "vem/io.hpp"
#include "vem/kernels.hpp"
#include "vem/vecchia.hpp"

namespace vem {

/// Conditioning plan from a named ordering; m < 0 conditions on all earlier points.
VecchiaPlan plan_for(const Locations& locs, const std::string& ordering, int m);

/// Isotropic Matern with a constant nugget scaled to the data: 80% of the
/// sample variance to the process, 20% to the nugget, range a tenth of the
/// widest side of the bounding box, nu = 1.
ModelConfig heuristic_init(const Locations& locs, const Eigen::VectorXd& y);

/// Naive Vecchia fit from `init` and from restarts - 1 further starts
/// perturbed by N(0, 0.5^2) in transformed coordinates; the lowest NLL wins.
NaiveFit fit_naive_restarts(std::shared_ptr<const EMProblem> problem, const Eigen::VectorXd& init,
                            const OptimizerConfig& config, int restarts, std::uint64_t seed);

/// Seeds for replicate i of a study or a multi-replicate simulation.
std::uint64_t location_seed(std::uint64_t master, int replicate);
std::uint64_t sample_seed(std::uint64_t master, int replicate);

struct StudyConfig {
  int n = 2000;
  ModelConfig truth = parse_iso_tuple("(10, 0.025, 2.25, 0.25)");
  std::uint64_t seed = 1;
  std::string ordering = "maximin";
  int m = 10;
  EMConfig em;
  OptimizerConfig naive;
  bool start_at_truth = true;  // otherwise heuristic_init
  int k = 500;                 // neighbours for the center-point prediction
  bool exact = true;           // score estimates by the dense exact NLL
  bool force_dense = false;
};

struct StudyRow {
  int replicate = 0;
  std::string status = "ok";
  Eigen::VectorXd truth, naive, em;
  std::string naive_status, em_status;
  int em_iterations = 0;
  double naive_vecchia_nll = 0.0;  // approximate marginal NLL of the naive estimate
  double em_vecchia_nll = 0.0;
  double exact_truth = 0.0, exact_naive = 0.0, exact_em = 0.0;
  double pred_naive = 0.0, pred_em = 0.0;  // |zhat_c(truth) - zhat_c(estimate)|
  double seconds_sim = 0.0, seconds_naive = 0.0, seconds_em = 0.0, seconds_exact = 0.0;
};

/// Simulate, fit naive Vecchia, refine by EM and score one replicate.
/// Failures are caught and recorded in `status`.
StudyRow run_study_replicate(const StudyConfig& config, int replicate);

/// All replicates, concurrently over replicates; rows in replicate order.
std::vector<StudyRow> run_study(const StudyConfig& config, int replicates,
                                const std::function<void(const StudyRow&)>& on_done = {});

/// Parameter names and natural-scale values for a model shape.
std::vector<std::string> param_names(const ModelConfig& shape);
std::vector<double> natural_values(const ModelConfig& shape, const Eigen::VectorXd& theta);

/// Free text made safe for a CSV cell (no commas, quotes or newlines).
std::string csv_safe(std::string text);

/// Deterministic per-replicate results; wall-clock timings go to a separate table.
CsvTable study_table(const std::vector<StudyRow>& rows, const ModelConfig& shape);
CsvTable study_timings_table(const std::vector<StudyRow>& rows);

}  // namespace vem
