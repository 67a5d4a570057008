#include <filesystem>
#include <fstream>
#include <sstream>

#include "cli.hpp"
#include "doctest.h"
#include "pipeline.hpp"
#include "vem/em.hpp"
#include "vem/io.hpp"
#include "vem/solver.hpp"

using namespace vem;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    static int counter = 0;
    path = fs::temp_directory_path() / ("vem_cli_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& name) const { return (path / name).string(); }
};

struct Run {
  int code;
  std::string out, err;
};

Run run_cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = vem::cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

// Value printed after `key ` on its own line.
double value_of(const std::string& text, const std::string& key) {
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line))
    if (line.rfind(key + " ", 0) == 0) return parse_double(line.substr(key.size() + 1), key);
  FAIL("missing key " << key << " in output:\n" << text);
  return 0.0;
}

std::string slurp(const std::string& path) { return read_text_file(path); }

int count_lines(const std::string& path) {
  std::istringstream in(slurp(path));
  std::string line;
  int n = 0;
  while (std::getline(in, line)) ++n;
  return n;
}

}  // namespace

TEST_CASE("simulate writes deterministic datasets") {
  TempDir dir;
  Run r = run_cli({"simulate", "--n", "2000", "--params", "(10,0.025,2.25,0.25)", "--seed", "1", "--out", dir / "a"});
  REQUIRE(r.code == 0);
  CHECK(fs::exists(dir / "a/data-000.csv"));
  CHECK(fs::exists(dir / "a/data.truth.params"));
  CHECK(fs::exists(dir / "a/data.manifest.json"));
  CHECK(count_lines(dir / "a/data-000.csv") == 2001);

  REQUIRE(run_cli({"simulate", "--n", "100", "--replicates", "2", "--seed", "1", "--out", dir / "b"}).code == 0);
  REQUIRE(run_cli({"--threads", "2", "simulate", "--n", "100", "--replicates", "2", "--seed", "1", "--out", dir / "c"})
              .code == 0);
  for (const char* f : {"data-000.csv", "data-001.csv", "data.truth.params"})
    CHECK(slurp(dir / (std::string("b/") + f)) == slurp(dir / (std::string("c/") + f)));
  CHECK(slurp(dir / "b/data-000.csv") != slurp(dir / "b/data-001.csv"));

  // Round trip: values reload bit for bit and the dataset feeds a fit.
  const Dataset d = read_dataset_csv(dir / "b/data-000.csv");
  CHECK(format_dataset_csv(d) == slurp(dir / "b/data-000.csv"));
  CHECK(run_cli({"fit-vecchia", "--data", dir / "b/data-000.csv"}).code == 0);
}

TEST_CASE("fit-vecchia accepts the study settings and is deterministic") {
  TempDir dir;
  REQUIRE(run_cli({"simulate", "--n", "300", "--params", "(1,0.1,1.0,0.1)", "--seed", "4", "--out", dir.path.string()})
              .code == 0);
  const std::string data = dir / "data-000.csv";
  const Run a = run_cli({"fit-vecchia", "--data", data, "--ordering", "maximin", "--m", "10", "--out", dir / "a.params"});
  const Run b = run_cli({"--threads", "3", "fit-vecchia", "--data", data, "--ordering", "maximin", "--m", "10", "--out",
                     dir / "b.params"});
  REQUIRE(a.code == 0);
  REQUIRE(b.code == 0);
  CHECK(slurp(dir / "a.params") == slurp(dir / "b.params"));
  CHECK(fs::exists(dir / "a.trace.csv"));
  CHECK(fs::exists(dir / "a.manifest.json"));
  // The reported NLL is the naive Vecchia NLL of the written parameters.
  const ModelConfig m = read_config(dir / "a.params");
  const Dataset d = read_dataset_csv(data);
  auto p = make_em_problem(d.locs, d.y, plan_for(d.locs, "maximin", 10), m.kernel, *m.noise);
  CHECK(value_of(a.out, "nll") == doctest::Approx(naive_vecchia_nll(*p, pack_theta(m.kernel, *m.noise))).epsilon(1e-12));
  CHECK(run_cli({"fit-vecchia", "--data", data, "--ordering", "bogus"}).code == 1);
}

TEST_CASE("fit-em defaults, history and stationarity") {
  TempDir dir;
  REQUIRE(run_cli({"simulate", "--n", "100", "--params", "(1,0.1,1.0,0.1)", "--seed", "2", "--out", dir.path.string()})
              .code == 0);
  const std::string data = dir / "data-000.csv";
  const std::string truth = dir / "data.truth.params";

  // Defaults are the study settings.
  REQUIRE(run_cli({"fit-em", "--data", data, "--init", truth, "--out", dir / "d.params"}).code == 0);
  const std::string man = slurp(dir / "d.manifest.json");
  CHECK(man.find("\"max-iter\": \"30\"") != std::string::npos);
  CHECK(man.find("\"saa-count\": \"72\"") != std::string::npos);
  CHECK(man.find("\"symmetrize\": \"on\"") != std::string::npos);

  // Exact traces: at most 31 history rows with nonincreasing dense-scored NLL.
  REQUIRE(run_cli({"fit-em", "--data", data, "--init", truth, "--backend", "dense", "--exact-trace", "--score-dense",
               "--out", dir / "x.params"})
              .code == 0);
  const NumericCsv h = [&] {
    // The status column is text; keep the numeric prefix of each line.
    std::istringstream in(slurp(dir / "x.history.csv"));
    std::string line, text;
    while (std::getline(in, line)) {
      std::string keep;
      std::istringstream cells(line);
      std::string cell;
      for (int i = 0; i < 7 && std::getline(cells, cell, ','); ++i) keep += (i ? "," : "") + cell;
      text += keep + "\n";
    }
    return parse_numeric_csv(text);
  }();
  CHECK(h.header[6] == "vecchia_nll");
  CHECK(h.rows.size() <= 31);
  CHECK(h.rows.size() >= 2);
  for (std::size_t i = 1; i < h.rows.size(); ++i) CHECK(h.rows[i][6] <= h.rows[i - 1][6] + 1e-9 * std::fabs(h.rows[i][6]));

  // Run to convergence and check stationarity of the approximate likelihood.
  REQUIRE(run_cli({"fit-em", "--data", data, "--init", truth, "--backend", "dense", "--exact-trace", "--max-iter", "5000",
               "--tol", "1e-7", "--no-score", "--out", dir / "s.params"})
              .code == 0);
  const ModelConfig m = read_config(dir / "s.params");
  const Dataset d = read_dataset_csv(data);
  auto p = make_em_problem(d.locs, d.y, plan_for(d.locs, "maximin", 10), m.kernel, *m.noise);
  const Eigen::VectorXd theta = pack_theta(m.kernel, *m.noise);
  const Eigen::VectorXd g = fd_gradient([&](const Eigen::VectorXd& t) { return approx_marginal_nll(*p, t, true); }, theta);
  INFO("gradient " << g.transpose());
  CHECK(g.norm() <= 1e-3);
  CHECK(slurp(dir / "s.manifest.json").find("\"status\": \"converged\"") != std::string::npos);

  // Without --init the naive fit runs first and is saved.
  REQUIRE(run_cli({"fit-em", "--data", data, "--max-iter", "2", "--saa-count", "10", "--out", dir / "n.params"}).code == 0);
  CHECK(fs::exists(dir / "n.init.params"));
  CHECK(run_cli({"fit-em", "--data", data, "--backend", "cg"}).code == 1);
}

TEST_CASE("exact-nll is a thin wrapper with a difference mode") {
  TempDir dir;
  REQUIRE(run_cli({"simulate", "--n", "150", "--params", "(1,0.1,1.0,0.1)", "--seed", "5", "--out", dir.path.string()})
              .code == 0);
  const std::string data = dir / "data-000.csv", truth = dir / "data.truth.params";
  write_config(dir / "other.params", parse_iso_tuple("(2, 0.2, 0.7, 0.3)"));
  const Run a = run_cli({"exact-nll", "--data", data, "--params", truth});
  REQUIRE(a.code == 0);
  const Dataset d = read_dataset_csv(data);
  const ModelConfig m = read_config(truth), o = read_config(dir / "other.params");
  const double want = exact_nll(m.kernel, *m.noise, d.locs, d.y);
  CHECK(value_of(a.out, "nll") == want);
  const Run b = run_cli({"exact-nll", "--data", data, "--diff", truth, dir / "other.params", "--out", dir / "diff.json"});
  REQUIRE(b.code == 0);
  CHECK(value_of(b.out, "diff") == want - exact_nll(o.kernel, *o.noise, d.locs, d.y));
  CHECK(fs::exists(dir / "diff.json"));
  CHECK(run_cli({"exact-nll", "--data", data}).code == 1);
  CHECK(run_cli({"exact-nll", "--data", dir / "missing.csv", "--params", truth}).code == 1);

  // Coincident locations with a vanishing nugget cannot be factored.
  Dataset dup = d;
  dup.locs.row(1) = dup.locs.row(0);
  write_dataset_csv(dir / "dup.csv", dup);
  write_config(dir / "tiny.params", parse_iso_tuple("(1, 0.1, 1.0, 1e-300)"));
  CHECK(run_cli({"exact-nll", "--data", dir / "dup.csv", "--params", dir / "tiny.params"}).code == 2);
}

TEST_CASE("predict matches dense kriging with all neighbours") {
  TempDir dir;
  REQUIRE(run_cli({"simulate", "--n", "80", "--params", "(1,0.2,1.5,0.2)", "--seed", "6", "--out", dir.path.string()})
              .code == 0);
  const std::string data = dir / "data-000.csv", truth = dir / "data.truth.params";
  write_config(dir / "other.params", parse_iso_tuple("(1.5, 0.15, 1.0, 0.3)"));
  write_text_file_atomic(dir / "targets.csv", "x1,x2\n0.5,0.5\n0.1,0.9\n");
  REQUIRE(run_cli({"predict", "--data", data, "--params", truth, "--targets", dir / "targets.csv", "--k", "80",
               "--compare", dir / "other.params", "--out", dir / "p.csv"})
              .code == 0);
  const NumericCsv p = parse_numeric_csv(slurp(dir / "p.csv"));
  CHECK(p.header == std::vector<std::string>{"x1", "x2", "mean", "var", "mean_compare", "abs_diff"});
  REQUIRE(p.rows.size() == 2);
  const Dataset d = read_dataset_csv(data);
  const ModelConfig m = read_config(truth);
  Eigen::MatrixXd c = cov_matrix(m.kernel, d.locs);
  c.diagonal().array() += 0.2;
  Locations t(2, 2);
  t << 0.5, 0.5, 0.1, 0.9;
  const Eigen::MatrixXd k = cov_matrix(m.kernel, d.locs, &t);
  const Eigen::VectorXd mean = k.transpose() * c.ldlt().solve(d.y);
  for (int i = 0; i < 2; ++i) {
    CHECK(p.rows[i][2] == doctest::Approx(mean(i)).epsilon(1e-10));
    CHECK(p.rows[i][5] == doctest::Approx(std::fabs(p.rows[i][2] - p.rows[i][4])).epsilon(1e-14));
  }
  // Default target is the center of the bounding box.
  REQUIRE(run_cli({"predict", "--data", data, "--params", truth, "--k", "20", "--out", dir / "c.csv"}).code == 0);
  CHECK(parse_numeric_csv(slurp(dir / "c.csv")).rows.size() == 1);
  CHECK(run_cli({"predict", "--data", data, "--params", truth, "--k", "81"}).code == 1);
}

TEST_CASE("diagnose-saa uses the supplement's counts") {
  TempDir dir;
  REQUIRE(run_cli({"simulate", "--n", "150", "--params", "(1,0.1,1.0,0.1)", "--seed", "7", "--out", dir.path.string()})
              .code == 0);
  const std::string data = dir / "data-000.csv", truth = dir / "data.truth.params";
  REQUIRE(run_cli({"diagnose-saa", "--data", data, "--params", truth, "--out", dir / "s.csv"}).code == 0);
  std::istringstream in(slurp(dir / "s.csv"));
  std::string line;
  std::getline(in, line);
  CHECK(line == "count,sigma2,rho,nu,eta2,e_value,status");
  std::vector<int> counts;
  while (std::getline(in, line)) counts.push_back(std::stoi(line.substr(0, line.find(','))));
  CHECK(counts == std::vector<int>{5, 25, 50, 75, 100, 125});
  REQUIRE(run_cli({"diagnose-saa", "--data", data, "--params", truth, "--counts", "5,25", "--out", dir / "t.csv"}).code == 0);
  // Nested ensembles: the rows for 5 and 25 probes match the full run.
  std::istringstream a(slurp(dir / "s.csv")), b(slurp(dir / "t.csv"));
  std::string la, lb;
  for (int i = 0; i < 3; ++i) {
    std::getline(a, la);
    std::getline(b, lb);
    CHECK(la == lb);
  }
}

TEST_CASE("study is deterministic with a stable schema") {
  TempDir dir;
  const std::vector<std::string> base{"study", "--replicates", "2", "--n", "150", "--params", "(1,0.1,1.0,0.1)", "--k",
                                      "30", "--max-iter", "3", "--saa-count", "10", "--seed", "3"};
  auto args = base;
  args.insert(args.end(), {"--out", dir / "a.csv"});
  REQUIRE(run_cli(args).code == 0);
  args = base;
  args.insert(args.begin(), {"--threads", "2"});
  args.insert(args.end(), {"--out", dir / "b.csv"});
  REQUIRE(run_cli(args).code == 0);
  CHECK(slurp(dir / "a.csv") == slurp(dir / "b.csv"));
  CHECK(fs::exists(dir / "a.timings.csv"));
  std::istringstream in(slurp(dir / "a.csv"));
  std::string header;
  std::getline(in, header);
  CHECK(header ==
        "replicate,status,naive_sigma2,naive_rho,naive_nu,naive_eta2,em_sigma2,em_rho,em_nu,em_eta2,naive_status,"
        "em_status,em_iterations,naive_vecchia_nll,em_vecchia_nll,exact_nll_truth,exact_nll_naive,exact_nll_em,"
        "pred_err_naive,pred_err_em");
  std::string row;
  int rows = 0;
  while (std::getline(in, row)) {
    ++rows;
    CHECK(row.find(",ok,") != std::string::npos);
  }
  CHECK(rows == 2);
  // The study replicate is the simulate replicate with the same master seed.
  const StudyRow r = [] {
    StudyConfig s;
    s.n = 150;
    s.truth = parse_iso_tuple("(1,0.1,1.0,0.1)");
    s.seed = 3;
    s.k = 30;
    s.em.max_iter = 3;
    s.em.saa_count = 10;
    return run_study_replicate(s, 1);
  }();
  REQUIRE(run_cli({"simulate", "--n", "150", "--params", "(1,0.1,1.0,0.1)", "--seed", "3", "--replicates", "2", "--out",
               dir / "sim"})
              .code == 0);
  const Dataset d = read_dataset_csv(dir / "sim/data-001.csv");
  const ModelConfig m = parse_iso_tuple("(1,0.1,1.0,0.1)");
  CHECK(r.exact_truth == doctest::Approx(exact_nll(m.kernel, *m.noise, d.locs, d.y)).epsilon(1e-12));
}

TEST_CASE("manifests replay to identical outputs") {
  TempDir dir;
  REQUIRE(run_cli({"simulate", "--n", "200", "--params", "(1,0.1,1.0,0.1)", "--seed", "8", "--out", dir.path.string()})
              .code == 0);
  const std::string data = dir / "data-000.csv";
  REQUIRE(run_cli({"--threads", "2", "fit-em", "--data", data, "--max-iter", "3", "--saa-count", "16", "--out",
               dir / "e.params"})
              .code == 0);
  const std::string params = slurp(dir / "e.params"), history = slurp(dir / "e.history.csv");
  fs::remove(dir / "e.params");
  fs::remove(dir / "e.history.csv");
  REQUIRE(run_cli({"replay", "--manifest", dir / "e.manifest.json"}).code == 0);
  CHECK(slurp(dir / "e.params") == params);
  CHECK(slurp(dir / "e.history.csv") == history);
  CHECK(run_cli({"replay", "--manifest", dir / "nope.json"}).code == 1);
  write_text_file_atomic(dir / "bad.json", "{not json");
  CHECK(run_cli({"replay", "--manifest", dir / "bad.json"}).code == 1);
}

TEST_CASE("help, version and usage errors") {
  CHECK(run_cli({"--help"}).code == 0);
  CHECK(run_cli({"--version"}).code == 0);
  CHECK(run_cli({}).code == 1);
  CHECK(run_cli({"simulate", "--n", "-3"}).code == 1);
  CHECK(run_cli({"simulate", "--bogus"}).code == 1);
  const Run h = run_cli({"fit-em", "--help"});
  CHECK(h.code == 0);
  for (const char* flag : {"--exact-trace", "--symmetrize", "--saa-count", "--saa-seed", "--max-iter", "--backend",
                           "--ordering", "--m", "--init", "--restarts"})
    CHECK(h.out.find(flag) != std::string::npos);
}
