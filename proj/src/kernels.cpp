#include "vem/kernels.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <map>
#include <sstream>

#include "vem/io.hpp"

namespace vem {

std::array<double, 3> knot_weights(const KnotSpec& spec, double coord) {
  std::array<double, 3> w{};
  for (int j = 0; j < 3; ++j) {
    const double dist = std::fabs(coord - spec.knots[j]);
    if (dist < 1e-12) {
      w = {0.0, 0.0, 0.0};
      w[j] = 1.0;
      return w;
    }
    w[j] = 1.0 / dist;
  }
  const double total = w[0] + w[1] + w[2];
  for (auto& x : w) x /= total;
  return w;
}

namespace {

void require_positive(double v, const char* name) {
  if (!(v > 0.0) || !std::isfinite(v))
    throw std::invalid_argument(std::string(name) + " must be positive and finite");
}

}  // namespace

void validate(const KernelModel& kernel) {
  std::visit(
      [](const auto& p) {
        using P = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<P, MaternIsoParams>) {
          require_positive(p.sigma2, "sigma2");
          require_positive(p.rho, "rho");
          require_positive(p.nu, "nu");
        } else {
          for (double s : p.sigmas) require_positive(s, "sigmas");
          require_positive(p.W11, "W11");
          require_positive(p.W22, "W22");
          if (!std::isfinite(p.W12)) throw std::invalid_argument("W12 must be finite");
          require_positive(p.nu, "nu");
        }
      },
      kernel);
}

void validate(const NoiseModel& noise) {
  std::visit(
      [](const auto& p) {
        using P = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<P, ConstNuggetT<double>>) {
          require_positive(p.eta2, "eta2");
        } else {
          for (double e : p.etas) require_positive(e, "etas");
        }
      },
      noise);
}

double kernel_eval(const KernelModel& kernel, std::span<const double> x, std::span<const double> x2) {
  if (x.size() != x2.size()) throw std::invalid_argument("kernel_eval: dimension mismatch");
  const KernelEvaluator<double> k(kernel);
  return k(x.data(), x2.data(), static_cast<int>(x.size()));
}

Eigen::MatrixXd cov_matrix(const KernelModel& kernel, const Locations& locs, const Locations* locs2) {
  const KernelEvaluator<double> k(kernel);
  const int dim = static_cast<int>(locs.cols());
  if (locs2 == nullptr) {
    const Eigen::Index n = locs.rows();
    Eigen::MatrixXd S(n, n);
    for (Eigen::Index j = 0; j < n; ++j) {
      S(j, j) = k.diag(locs.row(j).data(), dim);
      for (Eigen::Index i = j + 1; i < n; ++i) {
        const double v = k(locs.row(i).data(), locs.row(j).data(), dim);
        S(i, j) = v;
        S(j, i) = v;
      }
    }
    return S;
  }
  if (locs2->cols() != locs.cols()) throw std::invalid_argument("cov_matrix: dimension mismatch");
  Eigen::MatrixXd S(locs.rows(), locs2->rows());
  for (Eigen::Index j = 0; j < locs2->rows(); ++j)
    for (Eigen::Index i = 0; i < locs.rows(); ++i) S(i, j) = k(locs.row(i).data(), locs2->row(j).data(), dim);
  return S;
}

NoiseDiagonal noise_matrix(const NoiseModel& noise, const Locations& locs) {
  validate(noise);
  const Eigen::Index n = locs.rows();
  const int dim = static_cast<int>(locs.cols());
  NoiseDiagonal out{Eigen::VectorXd(n), Eigen::VectorXd(n), Eigen::VectorXd(n)};
  for (Eigen::Index i = 0; i < n; ++i) {
    const double r = noise_variance(noise, locs.row(i).data(), dim);
    if (!(r > 0.0)) throw std::invalid_argument("noise variance must be positive");
    out.r(i) = r;
    out.r_inv(i) = 1.0 / r;
    out.r_inv_sqrt(i) = 1.0 / std::sqrt(r);
  }
  return out;
}

int kernel_param_count(const KernelModel& kernel) {
  return std::holds_alternative<MaternIsoParams>(kernel) ? 3 : 7;
}

int noise_param_count(const NoiseModel& noise) {
  return std::holds_alternative<ConstNuggetT<double>>(noise) ? 1 : 3;
}

std::vector<std::string> kernel_param_names(const KernelModel& kernel) {
  if (std::holds_alternative<MaternIsoParams>(kernel)) return {"sigma2", "rho", "nu"};
  return {"sigma_1", "sigma_2", "sigma_3", "W11", "W12", "W22", "nu"};
}

std::vector<std::string> noise_param_names(const NoiseModel& noise) {
  if (std::holds_alternative<ConstNuggetT<double>>(noise)) return {"eta2"};
  return {"eta_1", "eta_2", "eta_3"};
}

std::vector<double> kernel_natural_values(const KernelModel& kernel) {
  return std::visit(
      [](const auto& p) -> std::vector<double> {
        using P = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<P, MaternIsoParams>) {
          return {p.sigma2, p.rho, p.nu};
        } else {
          return {p.sigmas[0], p.sigmas[1], p.sigmas[2], p.W11, p.W12, p.W22, p.nu};
        }
      },
      kernel);
}

std::vector<double> noise_natural_values(const NoiseModel& noise) {
  return std::visit(
      [](const auto& p) -> std::vector<double> {
        using P = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<P, ConstNuggetT<double>>) {
          return {p.eta2};
        } else {
          return {p.etas[0], p.etas[1], p.etas[2]};
        }
      },
      noise);
}

Eigen::VectorXd pack_kernel(const KernelModel& kernel) {
  validate(kernel);
  return std::visit(
      [](const auto& p) -> Eigen::VectorXd {
        using P = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<P, MaternIsoParams>) {
          Eigen::VectorXd t(3);
          t << std::log(p.sigma2), std::log(p.rho), std::log(p.nu);
          return t;
        } else {
          Eigen::VectorXd t(7);
          t << std::log(p.sigmas[0]), std::log(p.sigmas[1]), std::log(p.sigmas[2]), std::log(p.W11), p.W12,
              std::log(p.W22), std::log(p.nu);
          return t;
        }
      },
      kernel);
}

Eigen::VectorXd pack_noise(const NoiseModel& noise) {
  validate(noise);
  return std::visit(
      [](const auto& p) -> Eigen::VectorXd {
        using P = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<P, ConstNuggetT<double>>) {
          Eigen::VectorXd t(1);
          t << std::log(p.eta2);
          return t;
        } else {
          Eigen::VectorXd t(3);
          t << std::log(p.etas[0]), std::log(p.etas[1]), std::log(p.etas[2]);
          return t;
        }
      },
      noise);
}

KernelModel unpack_kernel(const Eigen::VectorXd& theta, const KernelModel& shape) {
  return unpack_kernel<double>(std::span<const double>(theta.data(), static_cast<std::size_t>(theta.size())),
                               shape);
}

NoiseModel unpack_noise(const Eigen::VectorXd& theta, const NoiseModel& shape) {
  return unpack_noise<double>(std::span<const double>(theta.data(), static_cast<std::size_t>(theta.size())),
                              shape);
}

// ---- parameter files ---------------------------------------------------------

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<double> parse_list(const std::string& key, const std::string& value) {
  std::vector<double> out;
  std::string item;
  std::stringstream ss(value);
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty() && (item.front() == '(' || item.front() == '[')) item.erase(0, 1);
    if (!item.empty() && (item.back() == ')' || item.back() == ']')) item.pop_back();
    out.push_back(parse_double(trim(item), key));
  }
  return out;
}

std::array<double, 3> parse_triple(const std::string& key, const std::string& value) {
  const auto v = parse_list(key, value);
  if (v.size() != 3) throw std::invalid_argument("parameter '" + key + "' needs exactly 3 values");
  return {v[0], v[1], v[2]};
}

}  // namespace

ModelConfig parse_config(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("parameter file line " + std::to_string(lineno) + ": expected key = value");
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  static const std::vector<std::string> known = {"kind", "sigma2", "rho",  "nu",  "eta2", "sigmas",
                                                 "etas", "knots",  "knot_dim", "W11", "W12", "W22"};
  for (const auto& [k, v] : kv)
    if (std::find(known.begin(), known.end(), k) == known.end())
      throw std::invalid_argument("unknown parameter key '" + k + "'");

  auto get = [&](const std::string& key) -> const std::string& {
    const auto it = kv.find(key);
    if (it == kv.end()) throw std::invalid_argument("missing parameter '" + key + "'");
    return it->second;
  };

  KnotSpec knots;
  if (kv.count("knots")) knots.knots = parse_triple("knots", kv["knots"]);
  if (kv.count("knot_dim")) knots.dim = static_cast<int>(parse_double(kv["knot_dim"], "knot_dim"));

  const std::string kind = kv.count("kind") ? kv["kind"] : std::string("matern_iso");
  ModelConfig cfg;
  if (kind == "matern_iso") {
    cfg.kernel = MaternIsoParams{parse_double(get("sigma2"), "sigma2"), parse_double(get("rho"), "rho"),
                                 parse_double(get("nu"), "nu")};
  } else if (kind == "aniso_knot") {
    cfg.kernel = AnisoKnotParams{parse_triple("sigmas", get("sigmas")), parse_double(get("W11"), "W11"),
                                 parse_double(get("W12"), "W12"),       parse_double(get("W22"), "W22"),
                                 parse_double(get("nu"), "nu"),         knots};
  } else {
    throw std::invalid_argument("unknown kernel kind '" + kind + "'");
  }
  validate(cfg.kernel);

  if (kv.count("eta2") && kv.count("etas"))
    throw std::invalid_argument("give either eta2 or etas, not both");
  if (kv.count("eta2")) {
    cfg.noise = ConstNuggetT<double>{parse_double(kv["eta2"], "eta2")};
  } else if (kv.count("etas")) {
    cfg.noise = KnotNuggetT<double>{parse_triple("etas", kv["etas"]), knots};
  }
  if (cfg.noise) validate(*cfg.noise);
  return cfg;
}

std::string format_config(const ModelConfig& config) {
  std::ostringstream os;
  auto list = [](const std::array<double, 3>& v) {
    return format_double(v[0]) + ", " + format_double(v[1]) + ", " + format_double(v[2]);
  };
  const KnotSpec* knots = nullptr;
  std::visit(
      [&](const auto& p) {
        using P = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<P, MaternIsoParams>) {
          os << "kind = matern_iso\n";
          os << "sigma2 = " << format_double(p.sigma2) << "\n";
          os << "rho = " << format_double(p.rho) << "\n";
          os << "nu = " << format_double(p.nu) << "\n";
        } else {
          os << "kind = aniso_knot\n";
          os << "sigmas = " << list(p.sigmas) << "\n";
          os << "W11 = " << format_double(p.W11) << "\n";
          os << "W12 = " << format_double(p.W12) << "\n";
          os << "W22 = " << format_double(p.W22) << "\n";
          os << "nu = " << format_double(p.nu) << "\n";
          knots = &p.knots;
        }
      },
      config.kernel);
  if (config.noise) {
    std::visit(
        [&](const auto& p) {
          using P = std::decay_t<decltype(p)>;
          if constexpr (std::is_same_v<P, ConstNuggetT<double>>) {
            os << "eta2 = " << format_double(p.eta2) << "\n";
          } else {
            os << "etas = " << list(p.etas) << "\n";
            if (!knots) knots = &p.knots;
          }
        },
        *config.noise);
  }
  if (knots) {
    os << "knots = " << list(knots->knots) << "\n";
    os << "knot_dim = " << knots->dim << "\n";
  }
  return os.str();
}

ModelConfig read_config(const std::string& path) { return parse_config(read_text_file(path)); }

void write_config(const std::string& path, const ModelConfig& config) {
  write_text_file_atomic(path, format_config(config));
}

ModelConfig parse_iso_tuple(const std::string& text) {
  const auto v = parse_list("params", text);
  if (v.size() != 4) throw std::invalid_argument("--params expects (sigma2, rho, nu, eta2)");
  ModelConfig cfg{MaternIsoParams{v[0], v[1], v[2]}, ConstNuggetT<double>{v[3]}};
  validate(cfg.kernel);
  validate(*cfg.noise);
  return cfg;
}

}  // namespace vem
