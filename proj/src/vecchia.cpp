#include "vem/vecchia.hpp"

#include <algorithm>
#include <limits>
#include <numeric>
#include <memory>
#include <queue>
#include <sstream>
#include <unordered_map>

#include "vem/io.hpp"

namespace vem {

namespace {

double sqdist(const Locations& locs, int a, int b) {
  double s = 0.0;
  for (Eigen::Index k = 0; k < locs.cols(); ++k) {
    const double h = locs(a, k) - locs(b, k);
    s += h * h;
  }
  return s;
}

}  // namespace

// ---- orderings -------------------------------------------------------------

std::vector<int> maximin_order(const Locations& locs) {
  const int n = static_cast<int>(locs.rows());
  std::vector<int> order;
  if (n == 0) return order;
  order.reserve(n);
  const Eigen::RowVectorXd centroid = locs.colwise().mean();
  int seed = 0;
  double best = std::numeric_limits<double>::infinity();
  for (int i = 0; i < n; ++i) {
    const double d = (locs.row(i) - centroid).squaredNorm();
    if (d < best) {
      best = d;
      seed = i;
    }
  }
  std::vector<double> mind(n, std::numeric_limits<double>::infinity());
  std::vector<char> taken(n, 0);
  int next = seed;
  for (int step = 0; step < n; ++step) {
    order.push_back(next);
    taken[next] = 1;
    int arg = -1;
    double far = -1.0;
    for (int i = 0; i < n; ++i) {
      if (taken[i]) continue;
      const double d = sqdist(locs, i, next);
      if (d < mind[i]) mind[i] = d;
      if (mind[i] > far) {
        far = mind[i];
        arg = i;
      }
    }
    next = arg;
  }
  return order;
}

std::vector<int> coordinate_order(const Locations& locs) {
  std::vector<int> order(static_cast<std::size_t>(locs.rows()));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    for (Eigen::Index k = 0; k < locs.cols(); ++k) {
      if (locs(a, k) < locs(b, k)) return true;
      if (locs(a, k) > locs(b, k)) return false;
    }
    return false;
  });
  return order;
}

std::vector<int> make_order(const Locations& locs, const std::string& name) {
  if (name == "maximin") return maximin_order(locs);
  if (name == "coordinate") return coordinate_order(locs);
  if (name == "natural") {
    std::vector<int> order(static_cast<std::size_t>(locs.rows()));
    std::iota(order.begin(), order.end(), 0);
    return order;
  }
  throw std::invalid_argument("unknown ordering '" + name + "' (expected maximin, coordinate or natural)");
}

// ---- nearest earlier neighbours ---------------------------------------------

namespace {

struct Candidate {
  double d2;
  int rank;
  bool operator<(const Candidate& o) const { return d2 < o.d2 || (d2 == o.d2 && rank < o.rank); }
};

// Bounded max-heap keeping the k best candidates.
class BestK {
 public:
  explicit BestK(int k) : k_(k) {}
  void offer(Candidate c) {
    if (static_cast<int>(heap_.size()) < k_) {
      heap_.push(c);
    } else if (c < heap_.top()) {
      heap_.pop();
      heap_.push(c);
    }
  }
  bool full() const { return static_cast<int>(heap_.size()) >= k_; }
  double worst() const { return heap_.top().d2; }
  std::vector<Candidate> sorted() {
    std::vector<Candidate> out;
    while (!heap_.empty()) {
      out.push_back(heap_.top());
      heap_.pop();
    }
    std::reverse(out.begin(), out.end());
    return out;
  }

 private:
  int k_;
  std::priority_queue<Candidate> heap_;
};

// Static k-d tree over the points of rank [0, size).
class KdTree {
 public:
  KdTree(const Locations& locs, const std::vector<int>& perm, int size) : locs_(locs), perm_(perm) {
    ranks_.resize(size);
    std::iota(ranks_.begin(), ranks_.end(), 0);
    if (size > 0) build(0, size, 0);
  }

  void query(const double* x, BestK& best) const {
    if (!nodes_.empty()) search(0, x, best);
  }

 private:
  struct Node {
    int lo, hi;         // range in ranks_
    int split_dim = -1; // -1 for a leaf
    double split = 0.0;
    int left = -1, right = -1;
  };
  static constexpr int kLeaf = 16;

  double coord(int rank, int k) const { return locs_(perm_[rank], k); }

  int build(int lo, int hi, int depth) {
    const int id = static_cast<int>(nodes_.size());
    nodes_.push_back({lo, hi});
    if (hi - lo <= kLeaf) return id;
    // Split on the widest coordinate at the median.
    const int dims = static_cast<int>(locs_.cols());
    int best_dim = 0;
    double best_span = -1.0;
    for (int k = 0; k < dims; ++k) {
      double mn = std::numeric_limits<double>::infinity(), mx = -mn;
      for (int i = lo; i < hi; ++i) {
        const double c = coord(ranks_[i], k);
        mn = std::min(mn, c);
        mx = std::max(mx, c);
      }
      if (mx - mn > best_span) {
        best_span = mx - mn;
        best_dim = k;
      }
    }
    const int mid = (lo + hi) / 2;
    std::nth_element(ranks_.begin() + lo, ranks_.begin() + mid, ranks_.begin() + hi,
                     [&](int a, int b) { return coord(a, best_dim) < coord(b, best_dim); });
    const double split = coord(ranks_[mid], best_dim);
    const int left = build(lo, mid, depth + 1);
    const int right = build(mid, hi, depth + 1);
    nodes_[id].split_dim = best_dim;
    nodes_[id].split = split;
    nodes_[id].left = left;
    nodes_[id].right = right;
    return id;
  }

  void search(int id, const double* x, BestK& best) const {
    const Node& nd = nodes_[id];
    if (nd.split_dim < 0) {
      for (int i = nd.lo; i < nd.hi; ++i) {
        const int r = ranks_[i];
        double d2 = 0.0;
        for (Eigen::Index k = 0; k < locs_.cols(); ++k) {
          const double h = x[k] - coord(r, static_cast<int>(k));
          d2 += h * h;
        }
        best.offer({d2, r});
      }
      return;
    }
    const double diff = x[nd.split_dim] - nd.split;
    const int near = diff < 0 ? nd.left : nd.right;
    const int far = diff < 0 ? nd.right : nd.left;
    search(near, x, best);
    // Equality is kept so that equidistant ties can still be resolved by rank.
    if (!best.full() || diff * diff <= best.worst()) search(far, x, best);
  }

  const Locations& locs_;
  const std::vector<int>& perm_;
  std::vector<int> ranks_;
  std::vector<Node> nodes_;
};

std::vector<int> to_ranks(std::vector<Candidate> c) {
  std::vector<int> out;
  out.reserve(c.size());
  for (const auto& x : c) out.push_back(x.rank);
  return out;
}

}  // namespace

std::vector<std::vector<int>> nearest_earlier_bruteforce(const Locations& locs, const std::vector<int>& perm, int k) {
  const int n = static_cast<int>(perm.size());
  std::vector<std::vector<int>> out(n);
  for (int j = 0; j < n; ++j) {
    BestK best(k);
    for (int r = 0; r < j; ++r) best.offer({sqdist(locs, perm[j], perm[r]), r});
    out[j] = to_ranks(best.sorted());
  }
  return out;
}

std::vector<std::vector<int>> nearest_earlier_kdtree(const Locations& locs, const std::vector<int>& perm, int k) {
  const int n = static_cast<int>(perm.size());
  std::vector<std::vector<int>> out(n);
  // The tree covers ranks [0, built); ranks [built, j) are scanned directly.
  const int batch = std::max(256, static_cast<int>(4.0 * std::sqrt(static_cast<double>(n))));
  int built = 0;
  std::unique_ptr<KdTree> tree;
  for (int j = 0; j < n; ++j) {
    if (j - built >= batch) {
      built = j;
      tree = std::make_unique<KdTree>(locs, perm, built);
    }
    BestK best(k);
    const double* x = locs.row(perm[j]).data();
    if (tree) tree->query(x, best);
    for (int r = built; r < j; ++r) best.offer({sqdist(locs, perm[j], perm[r]), r});
    out[j] = to_ranks(best.sorted());
  }
  return out;
}

// ---- plans -----------------------------------------------------------------

std::vector<int> VecchiaPlan::local_indices(int j) const {
  std::vector<int> idx = cond_sets[j];
  for (int r = block_starts[j]; r < block_starts[j + 1]; ++r) idx.push_back(perm[r]);
  return idx;
}

std::size_t VecchiaPlan::factor_nnz_bound() const {
  std::size_t total = 0;
  for (int j = 0; j < num_blocks(); ++j) {
    const auto b = static_cast<std::size_t>(block_size(j));
    total += b * (b + cond_sets[j].size());
  }
  return total;
}

void VecchiaPlan::validate() const {
  if (static_cast<int>(perm.size()) != n) throw std::invalid_argument("plan: perm length differs from n");
  std::vector<int> rank(n, -1);
  for (int r = 0; r < n; ++r) {
    if (perm[r] < 0 || perm[r] >= n || rank[perm[r]] != -1) throw std::invalid_argument("plan: perm is not a bijection");
    rank[perm[r]] = r;
  }
  if (block_starts.size() != cond_sets.size() + 1 || block_starts.front() != 0 || block_starts.back() != n)
    throw std::invalid_argument("plan: block boundaries do not cover 0..n");
  for (int j = 0; j < num_blocks(); ++j) {
    if (block_starts[j + 1] <= block_starts[j]) throw std::invalid_argument("plan: empty block");
    std::vector<int> seen;
    for (int c : cond_sets[j]) {
      if (c < 0 || c >= n) throw std::invalid_argument("plan: conditioning index out of range");
      if (rank[c] >= block_starts[j]) throw std::invalid_argument("plan: conditioning set reaches into the future");
      seen.push_back(c);
    }
    std::sort(seen.begin(), seen.end());
    if (std::adjacent_find(seen.begin(), seen.end()) != seen.end())
      throw std::invalid_argument("plan: duplicate conditioning index");
  }
}

VecchiaPlan build_conditioning(const Locations& locs, const std::vector<int>& perm, ConditioningMode mode,
                               const std::string& ordering_name) {
  const int n = static_cast<int>(locs.rows());
  if (static_cast<int>(perm.size()) != n) throw std::invalid_argument("build_conditioning: perm length differs from n");
  VecchiaPlan plan;
  plan.n = n;
  plan.ordering = ordering_name;
  plan.mode = mode;
  plan.perm = perm;
  if (mode.kind == ConditioningMode::Kind::nearest) {
    if (mode.m == 0) throw std::invalid_argument("nearest-neighbour conditioning needs m >= 1");
    plan.block_starts.resize(n + 1);
    std::iota(plan.block_starts.begin(), plan.block_starts.end(), 0);
    plan.cond_sets.resize(n);
    if (mode.m < 0) {
      for (int j = 0; j < n; ++j) plan.cond_sets[j].assign(perm.begin(), perm.begin() + j);
    } else {
      const auto nbrs = n < 5000 ? nearest_earlier_bruteforce(locs, perm, mode.m)
                                 : nearest_earlier_kdtree(locs, perm, mode.m);
      for (int j = 0; j < n; ++j) {
        // Keep rank order inside the set so the local covariance layout is
        // independent of distance ties.
        std::vector<int> ranks = nbrs[j];
        std::sort(ranks.begin(), ranks.end());
        for (int r : ranks) plan.cond_sets[j].push_back(perm[r]);
      }
    }
  } else {
    if (mode.b < 1 || mode.p < 1) throw std::invalid_argument("chunked conditioning needs b >= 1 and p >= 1");
    for (int s = 0; s < n; s += mode.b) plan.block_starts.push_back(s);
    plan.block_starts.push_back(n);
    const int nb = static_cast<int>(plan.block_starts.size()) - 1;
    plan.cond_sets.resize(nb);
    for (int j = 0; j < nb; ++j) {
      const int first = std::max(0, j - mode.p);
      for (int r = plan.block_starts[first]; r < plan.block_starts[j]; ++r) plan.cond_sets[j].push_back(perm[r]);
    }
  }
  return plan;
}

// Text layout:
//   vecchia_plan 1
//   n <n> ordering <name> mode nearest <m> | mode chunked <b> <p>
//   perm <n indices>
//   blocks <count>
//   <start> <end> <k> <k conditioning indices>   (one line per block)
std::string format_plan(const VecchiaPlan& plan) {
  std::ostringstream os;
  os << "vecchia_plan 1\n";
  os << "n " << plan.n << " ordering " << plan.ordering << " mode ";
  if (plan.mode.kind == ConditioningMode::Kind::nearest)
    os << "nearest " << plan.mode.m << "\n";
  else
    os << "chunked " << plan.mode.b << " " << plan.mode.p << "\n";
  os << "perm";
  for (int p : plan.perm) os << " " << p;
  os << "\nblocks " << plan.num_blocks() << "\n";
  for (int j = 0; j < plan.num_blocks(); ++j) {
    os << plan.block_starts[j] << " " << plan.block_starts[j + 1] << " " << plan.cond_sets[j].size();
    for (int c : plan.cond_sets[j]) os << " " << c;
    os << "\n";
  }
  return os.str();
}

VecchiaPlan parse_plan(const std::string& text) {
  std::istringstream is(text);
  auto expect = [&](const std::string& word) {
    std::string w;
    if (!(is >> w) || w != word) throw std::invalid_argument("plan file: expected '" + word + "'");
  };
  auto read_int = [&](const char* what) {
    long long v;
    if (!(is >> v)) throw std::invalid_argument(std::string("plan file: cannot read ") + what);
    return static_cast<int>(v);
  };
  expect("vecchia_plan");
  if (read_int("version") != 1) throw std::invalid_argument("plan file: unsupported version");
  VecchiaPlan plan;
  expect("n");
  plan.n = read_int("n");
  expect("ordering");
  is >> plan.ordering;
  expect("mode");
  std::string kind;
  is >> kind;
  if (kind == "nearest") {
    plan.mode = ConditioningMode::nearest(read_int("m"));
  } else if (kind == "chunked") {
    const int b = read_int("b");
    plan.mode = ConditioningMode::chunked(b, read_int("p"));
  } else {
    throw std::invalid_argument("plan file: unknown mode '" + kind + "'");
  }
  expect("perm");
  plan.perm.resize(plan.n);
  for (auto& p : plan.perm) p = read_int("perm entry");
  expect("blocks");
  const int nb = read_int("block count");
  plan.cond_sets.resize(nb);
  for (int j = 0; j < nb; ++j) {
    const int start = read_int("block start");
    const int end = read_int("block end");
    if (j == 0) plan.block_starts.push_back(start);
    if (start != plan.block_starts.back()) throw std::invalid_argument("plan file: blocks are not contiguous");
    plan.block_starts.push_back(end);
    const int k = read_int("conditioning size");
    plan.cond_sets[j].resize(k);
    for (auto& c : plan.cond_sets[j]) c = read_int("conditioning index");
  }
  if (nb == 0) plan.block_starts.push_back(0);
  plan.validate();
  return plan;
}

void write_plan(const std::string& path, const VecchiaPlan& plan) { write_text_file_atomic(path, format_plan(plan)); }

VecchiaPlan read_plan(const std::string& path) { return parse_plan(read_text_file(path)); }

// ---- likelihood pieces -----------------------------------------------------

namespace detail {

void report_block_failure(const Locations& locs, const std::vector<int>& idx, int block) {
  for (std::size_t a = 0; a < idx.size(); ++a)
    for (std::size_t c = 0; c < a; ++c)
      if (sqdist(locs, idx[a], idx[c]) == 0.0)
        throw NotPositiveDefinite("coincident locations " + std::to_string(idx[c]) + " and " +
                                  std::to_string(idx[a]) + " in block " + std::to_string(block) +
                                  "; jitter or deduplicate the data");
  throw NotPositiveDefinite("local covariance of block " + std::to_string(block) + " is not positive definite");
}

}  // namespace detail

VecchiaParts<double> vecchia_nll_parts(const KernelModel& kernel, const NoiseModel* nugget, const VecchiaPlan& plan,
                                       const Locations& locs, const Eigen::VectorXd& u) {
  return vecchia_nll_parts<double>(kernel, nugget, plan, locs, u);
}

double vecchia_nll(const KernelModel& kernel, const NoiseModel* nugget, const VecchiaPlan& plan,
                   const Locations& locs, const Eigen::VectorXd& u) {
  const auto parts = vecchia_nll_parts(kernel, nugget, plan, locs, u);
  return 0.5 * (parts.det + parts.qf + plan.n * std::log(2.0 * std::numbers::pi));
}

BlockPairs build_block_pairs(const VecchiaPlan& plan) {
  BlockPairs out;
  std::unordered_map<long long, int> ids;
  out.entries.resize(plan.num_blocks());
  for (int j = 0; j < plan.num_blocks(); ++j) {
    const auto idx = plan.local_indices(j);
    auto& e = out.entries[j];
    e.reserve(idx.size() * (idx.size() - 1) / 2);
    for (std::size_t a = 0; a < idx.size(); ++a) {
      for (std::size_t c = 0; c < a; ++c) {
        const int lo = std::min(idx[a], idx[c]), hi = std::max(idx[a], idx[c]);
        const long long key = static_cast<long long>(lo) * plan.n + hi;
        auto [it, inserted] = ids.try_emplace(key, static_cast<int>(out.pairs.size()));
        if (inserted) out.pairs.emplace_back(idx[a], idx[c]);
        e.push_back(it->second);
      }
    }
  }
  return out;
}

BlockMoments zero_block_moments(const VecchiaPlan& plan) {
  BlockMoments m(plan.num_blocks());
  for (int j = 0; j < plan.num_blocks(); ++j) {
    const auto s = static_cast<Eigen::Index>(plan.cond_sets[j].size() + plan.block_size(j));
    m[j] = Eigen::MatrixXd::Zero(s, s);
  }
  return m;
}

void add_block_moments(const VecchiaPlan& plan, const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, double weight,
                       BlockMoments& moments) {
  if (a.rows() != plan.n || b.rows() != plan.n || a.cols() != b.cols())
    throw std::invalid_argument("add_block_moments: shape mismatch");
  const bool same = &a == &b;
  parallel_for(plan.num_blocks(), [&](int j) {
    const auto idx = plan.local_indices(j);
    const auto s = static_cast<Eigen::Index>(idx.size());
    Eigen::MatrixXd la(s, a.cols()), lb(s, b.cols());
    for (Eigen::Index r = 0; r < s; ++r) {
      la.row(r) = a.row(idx[r]);
      lb.row(r) = b.row(idx[r]);
    }
    if (same) {
      moments[j].noalias() += weight * la * la.transpose();
    } else {
      const Eigen::MatrixXd ab = la * lb.transpose();
      moments[j] += (0.5 * weight) * (ab + ab.transpose());
    }
  });
}

void add_block_submatrices(const VecchiaPlan& plan, const Eigen::MatrixXd& c, double weight, BlockMoments& moments) {
  parallel_for(plan.num_blocks(), [&](int j) {
    const auto idx = plan.local_indices(j);
    const auto s = static_cast<Eigen::Index>(idx.size());
    for (Eigen::Index r = 0; r < s; ++r)
      for (Eigen::Index q = 0; q < s; ++q) moments[j](r, q) += weight * c(idx[r], idx[q]);
  });
}

// ---- factor ----------------------------------------------------------------

double SparsePrecisionFactor::logdet_precision() const {
  double s = 0.0;
  for (double x : block_logdet) s += x;
  return -s;
}

Eigen::SparseMatrix<double> SparsePrecisionFactor::precision() const {
  Eigen::SparseMatrix<double> l = U.transpose();
  Eigen::SparseMatrix<double> u = U;
  Eigen::SparseMatrix<double> omega = l * u;
  omega.makeCompressed();
  return omega;
}

SparsePrecisionFactor assemble_precision_factor(const KernelModel& kernel, const VecchiaPlan& plan,
                                                const Locations& locs) {
  const KernelEvaluator<double> eval(kernel);
  const int nb = plan.num_blocks();
  std::vector<std::vector<Eigen::Triplet<double>>> rows(nb);
  std::vector<double> logdet(nb);
  parallel_for(nb, [&](int j) {
    const auto idx = plan.local_indices(j);
    const int s = static_cast<int>(idx.size());
    const int k = s - plan.block_size(j);
    std::vector<double> chol;
    detail::local_cholesky<double>(eval, nullptr, locs, idx, j, chol);
    std::vector<double> w(s);
    double ld = 0.0;
    for (int r = k; r < s; ++r) {
      ld += 2.0 * std::log(chol[static_cast<std::size_t>(r) * s + r]);
      small::inverse_row(chol, s, r, w);
      const int row = plan.block_starts[j] + (r - k);
      for (int a = 0; a <= r; ++a) rows[j].emplace_back(row, idx[a], w[a]);
    }
    logdet[j] = ld;
  });
  SparsePrecisionFactor f;
  f.n = plan.n;
  std::vector<Eigen::Triplet<double>> all;
  all.reserve(plan.factor_nnz_bound());
  for (auto& r : rows) all.insert(all.end(), r.begin(), r.end());
  f.U.resize(plan.n, plan.n);
  f.U.setFromTriplets(all.begin(), all.end());
  f.U.makeCompressed();
  f.block_logdet = std::move(logdet);
  return f;
}

Eigen::VectorXd precision_matvec(const SparsePrecisionFactor& factor, const Eigen::VectorXd& u) {
  if (u.size() != factor.n) throw std::invalid_argument("precision_matvec: length mismatch");
  const Eigen::VectorXd t = factor.U * u;
  return factor.U.transpose() * t;
}

}  // namespace vem
