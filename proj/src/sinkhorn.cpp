#include "evl/sinkhorn.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "evl/errors.hpp"

namespace evl {

TokenSet TokenSet::normalized(const Tensor& raw, double floor) {
  Tape tape;
  return TokenSet{l2_normalize_rows(tape.constant(raw), floor).value()};
}

CostMatrix cost_matrix(const TokenSet& teacher, const TokenSet& student) {
  Tape tape;
  return CostMatrix{
      sq_distance_matrix(tape.constant(teacher.tokens), tape.constant(student.tokens)).value()};
}

namespace {

struct SinkhornRun {
  Tensor plan;
  // Per executed iteration: row softmax used by the f update and column
  // softmax used by the g update. Kept only for the differentiable solver.
  std::vector<Tensor> row_soft, col_soft;
  int iterations = 0;
  double violation = 0.0;
};

void validate(const Tensor& cost, double epsilon, int max_iter, double tol) {
  if (cost.rank() != 2) throw DimensionError("sinkhorn expects a matrix cost, got " + shape_str(cost.shape()));
  if (!(epsilon > 0.0)) throw ContractError("sinkhorn epsilon must be positive");
  if (max_iter < 1) throw ContractError("sinkhorn max_iter must be at least 1");
  if (!(tol > 0.0)) throw ContractError("sinkhorn tol must be positive");
  if (!cost.all_finite()) throw InputError("sinkhorn cost has non-finite entries");
}

// For every row r of c (rows x cols): lse[r] = LSE_k((pot[k] - c[r][k]) / eps),
// with the row softmax written to soft when given.
void lse_rows(const Tensor& c, const std::vector<double>& pot, double eps, std::vector<double>& lse,
              double* soft) {
  const std::size_t rows = c.rows(), cols = c.cols();
  std::vector<double> buf(cols);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* cr = c.data().data() + r * cols;
    double mx = -INFINITY;
    for (std::size_t k = 0; k < cols; ++k) {
      buf[k] = (pot[k] - cr[k]) / eps;
      mx = std::max(mx, buf[k]);
    }
    double s = 0.0;
    for (std::size_t k = 0; k < cols; ++k) {
      buf[k] = std::exp(buf[k] - mx);
      s += buf[k];
    }
    lse[r] = mx + std::log(s);
    if (soft) {
      double* out = soft + r * cols;
      for (std::size_t k = 0; k < cols; ++k) out[k] = buf[k] / s;
    }
  }
}

// Log-domain iterates carried as absorbed potentials (f0, g0) plus scalings
// (u, v): f = f0 + eps log u, g = g0 + eps log v, with the kernel
// K = exp((f0_i + g0_j - C_ij) / eps). Half-steps run as kernel products
// while the normalizers stay representable and fall back to an exact
// log-sum-exp pass otherwise, so the iterates are those of the plain
// log-domain recursion.
class Solver {
 public:
  Solver(const Tensor& cost, double eps)
      : c_(cost), ct_(cost.transposed()), eps_(eps), m_(cost.rows()), n_(cost.cols()),
        f0_(m_, 0.0), g0_(n_, 0.0), u_(m_, 1.0), v_(n_, 1.0), s_(m_), t_(n_),
        a_(1.0 / static_cast<double>(m_)), b_(1.0 / static_cast<double>(n_)) {
    rebuild();
  }

  // f <- eps log a - eps LSE_j((g_j - C_ij) / eps); soft gets the m x n softmax.
  void update_f(double* soft) {
    if (healthy(s_)) {
      for (std::size_t i = 0; i < m_; ++i) u_[i] = a_ / s_[i];
      if (soft)
        for (std::size_t i = 0; i < m_; ++i)
          for (std::size_t j = 0; j < n_; ++j) soft[i * n_ + j] = k_[i * n_ + j] * v_[j] / s_[i];
      return;
    }
    absorb_g();
    std::vector<double> lse(m_);
    lse_rows(c_, g0_, eps_, lse, soft);
    for (std::size_t i = 0; i < m_; ++i) f0_[i] = eps_ * std::log(a_) - eps_ * lse[i];
    std::fill(u_.begin(), u_.end(), 1.0);
    rebuild();
  }

  // g <- eps log b - eps LSE_i((f_i - C_ij) / eps); soft gets the n x m softmax.
  void update_g(double* soft) {
    std::fill(t_.begin(), t_.end(), 0.0);
    for (std::size_t i = 0; i < m_; ++i)
      for (std::size_t j = 0; j < n_; ++j) t_[j] += k_[i * n_ + j] * u_[i];
    if (healthy(t_)) {
      for (std::size_t j = 0; j < n_; ++j) v_[j] = b_ / t_[j];
      if (soft)
        for (std::size_t j = 0; j < n_; ++j)
          for (std::size_t i = 0; i < m_; ++i) soft[j * m_ + i] = k_[i * n_ + j] * u_[i] / t_[j];
    } else {
      absorb_f();
      std::vector<double> lse(n_);
      lse_rows(ct_, f0_, eps_, lse, soft);
      for (std::size_t j = 0; j < n_; ++j) g0_[j] = eps_ * std::log(b_) - eps_ * lse[j];
      std::fill(v_.begin(), v_.end(), 1.0);
      rebuild();
    }
    if (extreme(u_) || extreme(v_)) {
      absorb_f();
      absorb_g();
      rebuild();
    }
    row_products();
  }

  // L1 deviation of the row sums from a. Column sums equal b up to rounding
  // right after update_g.
  double row_violation() const {
    double viol = 0.0;
    for (std::size_t i = 0; i < m_; ++i) viol += std::abs(u_[i] * s_[i] - a_);
    return viol;
  }

  Tensor plan() const {
    Tensor p({m_, n_});
    for (std::size_t i = 0; i < m_; ++i)
      for (std::size_t j = 0; j < n_; ++j) p(i, j) = u_[i] * k_[i * n_ + j] * v_[j];
    return p;
  }

 private:
  static bool healthy(const std::vector<double>& x) {
    return std::all_of(x.begin(), x.end(), [](double v) { return std::isfinite(v) && v >= 1e-200; });
  }
  static bool extreme(const std::vector<double>& x) {
    return std::any_of(x.begin(), x.end(), [](double v) { return !(v > 1e-50 && v < 1e50); });
  }
  void absorb_f() {
    for (std::size_t i = 0; i < m_; ++i) f0_[i] += eps_ * std::log(u_[i]);
    std::fill(u_.begin(), u_.end(), 1.0);
  }
  void absorb_g() {
    for (std::size_t j = 0; j < n_; ++j) g0_[j] += eps_ * std::log(v_[j]);
    std::fill(v_.begin(), v_.end(), 1.0);
  }
  void rebuild() {
    k_.resize(m_ * n_);
    for (std::size_t i = 0; i < m_; ++i)
      for (std::size_t j = 0; j < n_; ++j) k_[i * n_ + j] = std::exp((f0_[i] + g0_[j] - c_(i, j)) / eps_);
    row_products();
  }
  void row_products() {
    for (std::size_t i = 0; i < m_; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < n_; ++j) acc += k_[i * n_ + j] * v_[j];
      s_[i] = acc;
    }
  }

  const Tensor& c_;
  Tensor ct_;
  double eps_;
  std::size_t m_, n_;
  std::vector<double> f0_, g0_, u_, v_, s_, t_, k_;
  double a_, b_;
};

SinkhornRun run_sinkhorn(const Tensor& cost, double eps, int max_iter, double tol,
                         bool keep_history) {
  validate(cost, eps, max_iter, tol);
  const std::size_t m = cost.rows(), n = cost.cols();
  Solver solver(cost, eps);
  SinkhornRun run;
  for (int it = 1; it <= max_iter; ++it) {
    Tensor rows, cols;
    if (keep_history) {
      rows = Tensor({m, n});
      cols = Tensor({n, m});
    }
    solver.update_f(keep_history ? rows.data().data() : nullptr);
    solver.update_g(keep_history ? cols.data().data() : nullptr);
    if (keep_history) {
      run.row_soft.push_back(std::move(rows));
      run.col_soft.push_back(std::move(cols));
    }
    run.iterations = it;
    if (solver.row_violation() <= tol) break;
  }
  run.plan = solver.plan();
  const double a = 1.0 / static_cast<double>(m), b = 1.0 / static_cast<double>(n);
  std::vector<double> row_sum(m, 0.0), col_sum(n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      row_sum[i] += run.plan(i, j);
      col_sum[j] += run.plan(i, j);
    }
  run.violation = 0.0;
  for (double r : row_sum) run.violation += std::abs(r - a);
  for (double c : col_sum) run.violation += std::abs(c - b);
  return run;
}

}  // namespace

TransportPlan sinkhorn(const CostMatrix& cost, double epsilon, int max_iter, double tol) {
  SinkhornRun run = run_sinkhorn(cost.values, epsilon, max_iter, tol, false);
  return TransportPlan{std::move(run.plan), epsilon, run.iterations, run.violation};
}

double ot_loss(const TokenSet& teacher, const TokenSet& student, const TransportPlan& plan) {
  if (plan.values.rank() != 2 || plan.values.rows() != teacher.count() ||
      plan.values.cols() != student.count()) {
    throw DimensionError("plan shape " + shape_str(plan.values.shape()) + " does not match " +
                         std::to_string(teacher.count()) + " teacher and " +
                         std::to_string(student.count()) + " student tokens");
  }
  const CostMatrix c = cost_matrix(teacher, student);
  double s = 0.0;
  for (std::size_t k = 0; k < c.values.size(); ++k) s += plan.values[k] * c.values[k];
  return s;
}

double plan_entropy(const TransportPlan& plan) {
  double h = 0.0;
  for (double p : plan.values.data())
    if (p > 0.0) h -= p * std::log(p);
  return h;
}

Var sinkhorn_plan(Var cost, const SinkhornOptions& opt) {
  const double eps = opt.epsilon;
  SinkhornRun run = run_sinkhorn(cost.value(), eps, opt.max_iter, opt.tol, true);
  Tensor plan = run.plan;
  return cost.tape().record(
      std::move(plan), {cost},
      [eps, rows = std::move(run.row_soft), cols = std::move(run.col_soft)](BackwardContext& c) {
        const Tensor& pbar = c.out_grad();
        const Tensor& p = c.out_value();
        Tensor* cbar = c.grad(0);
        const std::size_t m = p.rows(), n = p.cols();

        // P_ij = exp((f_i + g_j - C_ij) / eps)
        std::vector<double> fbar(m, 0.0), gbar(n, 0.0), gprev(n);
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < n; ++j) {
            const double w = pbar(i, j) * p(i, j) / eps;
            (*cbar)(i, j) -= w;
            fbar[i] += w;
            gbar[j] += w;
          }
        }
        for (std::size_t k = rows.size(); k-- > 0;) {
          // g_j = eps log b - eps LSE_i((f_i - C_ij) / eps); B is its softmax over i.
          const Tensor& bt = cols[k];  // n x m
          for (std::size_t j = 0; j < n; ++j) {
            const double* bj = bt.data().data() + j * m;
            for (std::size_t i = 0; i < m; ++i) {
              const double w = gbar[j] * bj[i];
              (*cbar)(i, j) += w;
              fbar[i] -= w;
            }
          }
          // f_i = eps log a - eps LSE_j((g_j - C_ij) / eps); A is its softmax over j.
          const Tensor& at = rows[k];  // m x n
          std::fill(gprev.begin(), gprev.end(), 0.0);
          for (std::size_t i = 0; i < m; ++i) {
            const double* ai = at.data().data() + i * n;
            for (std::size_t j = 0; j < n; ++j) {
              const double w = fbar[i] * ai[j];
              (*cbar)(i, j) += w;
              gprev[j] -= w;
            }
          }
          std::fill(fbar.begin(), fbar.end(), 0.0);
          gbar.swap(gprev);
        }
      });
}

OtTerms ot_loss(Var teacher_tokens, Var student_tokens, const SinkhornOptions& opt) {
  Var cost = sq_distance_matrix(teacher_tokens, student_tokens);
  Var plan = sinkhorn_plan(cost, opt);
  return {sum(mul(plan, cost)), plan};
}

std::string format_real(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  std::string s(buf, res.ptr);
  if (std::isfinite(v) && s.find_first_of(".eE") == std::string::npos) s += ".0";
  return s;
}

void export_plan(const TransportPlan& plan, const std::filesystem::path& path) {
  const Tensor& p = plan.values;
  if (p.rank() != 2 || !p.all_finite()) throw ContractError("export_plan needs a finite matrix plan");
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  for (std::size_t j = 0; j < p.cols(); ++j) out << (j ? "," : "") << j;
  out << '\n';
  for (std::size_t i = 0; i < p.rows(); ++i) {
    for (std::size_t j = 0; j < p.cols(); ++j) out << (j ? "," : "") << format_real(p(i, j));
    out << '\n';
  }
  if (!out) throw IoError("write failed for " + path.string());
}

Tensor read_plan_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw InputError("empty plan file " + path.string());
  const std::size_t cols = static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) + 1;
  std::vector<double> data;
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::size_t fields = 0;
    const char* p = line.data();
    const char* end = line.data() + line.size();
    while (p <= end) {
      const char* comma = std::find(p, end, ',');
      double v = 0.0;
      auto res = std::from_chars(p, comma, v);
      if (res.ec != std::errc() || res.ptr != comma) {
        throw InputError("malformed value in " + path.string() + " row " + std::to_string(rows));
      }
      data.push_back(v);
      ++fields;
      p = comma + 1;
    }
    if (fields != cols) throw InputError("ragged plan row in " + path.string());
    ++rows;
  }
  if (rows == 0) throw InputError("plan file has no data rows: " + path.string());
  return Tensor({rows, cols}, std::move(data));
}

}  // namespace evl
