#include "evl/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "evl/errors.hpp"
#include "kernels.hpp"

namespace evl {

// ---- Var / context ---------------------------------------------------------

const Tensor& Var::value() const {
  if (!tape_) throw ContractError("use of an unbound Var");
  return tape_->nodes_[id_].value;
}

bool Var::requires_grad() const { return tape_->nodes_[id_].requires_grad; }

const Tensor& BackwardContext::out_value() const { return tape_.nodes_[node_].value; }
const Tensor& BackwardContext::out_grad() const { return tape_.nodes_[node_].grad; }

const Tensor& BackwardContext::input(std::size_t k) const {
  return tape_.nodes_[tape_.nodes_[node_].inputs.at(k)].value;
}

Tensor* BackwardContext::grad(std::size_t k) {
  const std::uint32_t id = tape_.nodes_[node_].inputs.at(k);
  if (!tape_.nodes_[id].requires_grad) return nullptr;
  return &tape_.grad_buffer(id);
}

// ---- Tape ------------------------------------------------------------------

Var Tape::constant(Tensor value) { return leaf(std::move(value), false); }

Var Tape::leaf(Tensor value, bool requires_grad) {
  if (!value.all_finite()) throw InputError("non-finite value in leaf tensor");
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Var Tape::record(Tensor value, std::vector<Var> inputs, BackwardRule rule) {
  if (backward_done_) throw ContractError("cannot record on a tape after backward()");
  if (!value.all_finite()) throw InputError("operation produced a non-finite value");
  Node n;
  n.value = std::move(value);
  n.inputs.reserve(inputs.size());
  for (const Var& v : inputs) {
    if (&v.tape() != this) throw ContractError("operands live on different tapes");
    n.inputs.push_back(v.id());
    n.requires_grad = n.requires_grad || nodes_[v.id()].requires_grad;
  }
  if (n.requires_grad) n.rule = std::move(rule);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Tensor& Tape::grad_buffer(std::uint32_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad = Tensor(n.value.shape(), 0.0);
  return n.grad;
}

void Tape::backward(Var root) {
  if (&root.tape() != this) throw ContractError("backward root belongs to another tape");
  if (backward_done_) throw ContractError("backward() already ran on this tape");
  if (nodes_[root.id()].value.size() != 1) {
    throw ContractError("backward() needs a scalar root, got shape " +
                        shape_str(nodes_[root.id()].value.shape()));
  }
  backward_done_ = true;
  if (!nodes_[root.id()].requires_grad) return;
  grad_buffer(root.id())[0] = 1.0;
  for (std::uint32_t id = root.id() + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.rule || n.grad.empty()) continue;
    BackwardContext ctx(*this, id);
    n.rule(ctx);
  }
}

Tensor Tape::grad(Var v) const {
  const Node& n = nodes_.at(v.id());
  if (n.grad.empty()) return Tensor(n.value.shape(), 0.0);
  return n.grad;
}

// ---- helpers ---------------------------------------------------------------

namespace {

void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + " expects a matrix, got " + shape_str(t.shape()));
  }
}

bool is_scalar(const Tensor& t) { return t.size() == 1; }

// Checks binary operand compatibility; returns true when b broadcasts as a scalar.
bool binary_shapes(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return false;
  if (is_scalar(b)) return true;
  throw DimensionError(std::string(op) + " shape mismatch: " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
}

template <typename F>
Tensor map(const Tensor& a, F f) {
  Tensor out(a.shape());
  for (std::size_t k = 0; k < a.size(); ++k) out[k] = f(a[k]);
  return out;
}

}  // namespace

// ---- elementwise -----------------------------------------------------------

Var add(Var a, Var b) {
  const bool bcast = binary_shapes(a.value(), b.value(), "add");
  Tensor out = a.value();
  const double bs = bcast ? b.value()[0] : 0.0;
  for (std::size_t k = 0; k < out.size(); ++k) out[k] += bcast ? bs : b.value()[k];
  return a.tape().record(std::move(out), {a, b}, [bcast](BackwardContext& c) {
    const Tensor& g = c.out_grad();
    if (Tensor* ga = c.grad(0))
      for (std::size_t k = 0; k < g.size(); ++k) (*ga)[k] += g[k];
    if (Tensor* gb = c.grad(1)) {
      if (bcast) {
        double s = 0.0;
        for (double v : g.data()) s += v;
        (*gb)[0] += s;
      } else {
        for (std::size_t k = 0; k < g.size(); ++k) (*gb)[k] += g[k];
      }
    }
  });
}

Var sub(Var a, Var b) { return add(a, neg(b)); }

Var mul(Var a, Var b) {
  const bool bcast = binary_shapes(a.value(), b.value(), "mul");
  Tensor out = a.value();
  for (std::size_t k = 0; k < out.size(); ++k) out[k] *= bcast ? b.value()[0] : b.value()[k];
  return a.tape().record(std::move(out), {a, b}, [bcast](BackwardContext& c) {
    const Tensor& g = c.out_grad();
    const Tensor& av = c.input(0);
    const Tensor& bv = c.input(1);
    if (Tensor* ga = c.grad(0))
      for (std::size_t k = 0; k < g.size(); ++k) (*ga)[k] += g[k] * (bcast ? bv[0] : bv[k]);
    if (Tensor* gb = c.grad(1)) {
      if (bcast) {
        double s = 0.0;
        for (std::size_t k = 0; k < g.size(); ++k) s += g[k] * av[k];
        (*gb)[0] += s;
      } else {
        for (std::size_t k = 0; k < g.size(); ++k) (*gb)[k] += g[k] * av[k];
      }
    }
  });
}

Var div(Var a, Var b) {
  const bool bcast = binary_shapes(a.value(), b.value(), "div");
  Tensor out = a.value();
  for (std::size_t k = 0; k < out.size(); ++k) out[k] /= bcast ? b.value()[0] : b.value()[k];
  return a.tape().record(std::move(out), {a, b}, [bcast](BackwardContext& c) {
    const Tensor& g = c.out_grad();
    const Tensor& y = c.out_value();
    const Tensor& bv = c.input(1);
    if (Tensor* ga = c.grad(0))
      for (std::size_t k = 0; k < g.size(); ++k) (*ga)[k] += g[k] / (bcast ? bv[0] : bv[k]);
    if (Tensor* gb = c.grad(1)) {
      if (bcast) {
        double s = 0.0;
        for (std::size_t k = 0; k < g.size(); ++k) s -= g[k] * y[k];
        (*gb)[0] += s / bv[0];
      } else {
        for (std::size_t k = 0; k < g.size(); ++k) (*gb)[k] -= g[k] * y[k] / bv[k];
      }
    }
  });
}

Var scale(Var a, double s) {
  Tensor out = map(a.value(), [s](double v) { return v * s; });
  return a.tape().record(std::move(out), {a}, [s](BackwardContext& c) {
    const Tensor& g = c.out_grad();
    Tensor* ga = c.grad(0);
    for (std::size_t k = 0; k < g.size(); ++k) (*ga)[k] += s * g[k];
  });
}

Var add_scalar(Var a, double s) {
  Tensor out = map(a.value(), [s](double v) { return v + s; });
  return a.tape().record(std::move(out), {a}, [](BackwardContext& c) {
    const Tensor& g = c.out_grad();
    Tensor* ga = c.grad(0);
    for (std::size_t k = 0; k < g.size(); ++k) (*ga)[k] += g[k];
  });
}

Var neg(Var a) { return scale(a, -1.0); }

Var exp(Var a) {
  Tensor out = map(a.value(), [](double v) { return std::exp(v); });
  return a.tape().record(std::move(out), {a}, [](BackwardContext& c) {
    const Tensor& g = c.out_grad();
    const Tensor& y = c.out_value();
    Tensor* ga = c.grad(0);
    for (std::size_t k = 0; k < g.size(); ++k) (*ga)[k] += g[k] * y[k];
  });
}

Var log(Var a) {
  for (double v : a.value().data())
    if (!(v > 0.0)) throw InputError("log of a non-positive value");
  Tensor out = map(a.value(), [](double v) { return std::log(v); });
  return a.tape().record(std::move(out), {a}, [](BackwardContext& c) {
    const Tensor& g = c.out_grad();
    const Tensor& x = c.input(0);
    Tensor* ga = c.grad(0);
    for (std::size_t k = 0; k < g.size(); ++k) (*ga)[k] += g[k] / x[k];
  });
}

Var sqrt(Var a) {
  for (double v : a.value().data())
    if (!(v >= 0.0)) throw InputError("sqrt of a negative value");
  Tensor out = map(a.value(), [](double v) { return std::sqrt(v); });
  return a.tape().record(std::move(out), {a}, [](BackwardContext& c) {
    const Tensor& g = c.out_grad();
    const Tensor& y = c.out_value();
    Tensor* ga = c.grad(0);
    for (std::size_t k = 0; k < g.size(); ++k)
      if (y[k] > 0.0) (*ga)[k] += 0.5 * g[k] / y[k];
  });
}

Var square(Var a) {
  Tensor out = map(a.value(), [](double v) { return v * v; });
  return a.tape().record(std::move(out), {a}, [](BackwardContext& c) {
    const Tensor& g = c.out_grad();
    const Tensor& x = c.input(0);
    Tensor* ga = c.grad(0);
    for (std::size_t k = 0; k < g.size(); ++k) (*ga)[k] += 2.0 * g[k] * x[k];
  });
}

Var clamp_min(Var a, double floor) {
  Tensor out = map(a.value(), [floor](double v) { return std::max(v, floor); });
  return a.tape().record(std::move(out), {a}, [floor](BackwardContext& c) {
    const Tensor& g = c.out_grad();
    const Tensor& x = c.input(0);
    Tensor* ga = c.grad(0);
    for (std::size_t k = 0; k < g.size(); ++k)
      if (x[k] > floor) (*ga)[k] += g[k];
  });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Var gelu(Var a) {
  Tensor out = map(a.value(), [](double x) {
    return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
  });
  return a.tape().record(std::move(out), {a}, [](BackwardContext& c) {
    const Tensor& g = c.out_grad();
    const Tensor& x = c.input(0);
    Tensor* ga = c.grad(0);
    for (std::size_t k = 0; k < g.size(); ++k) {
      const double v = x[k];
      const double t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
      const double d =
          0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
      (*ga)[k] += g[k] * d;
    }
  });
}

// ---- linear algebra --------------------------------------------------------

Var matmul(Var a, Var b) {
  Tensor out = evl::matmul(a.value(), b.value());
  return a.tape().record(std::move(out), {a, b}, [](BackwardContext& c) {
    const Tensor& g = c.out_grad();
    const Tensor& av = c.input(0);
    const Tensor& bv = c.input(1);
    const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
    if (Tensor* ga = c.grad(0))
      kernels::gemm_nt(g.data().data(), bv.data().data(), ga->data().data(), m, n, k);
    if (Tensor* gb = c.grad(1))
      kernels::gemm_tn(av.data().data(), g.data().data(), gb->data().data(), m, k, n);
  });
}

Var transpose(Var a) {
  require_matrix(a.value(), "transpose");
  return a.tape().record(a.value().transposed(), {a}, [](BackwardContext& c) {
    const Tensor& g = c.out_grad();
    Tensor* ga = c.grad(0);
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t j = 0; j < g.cols(); ++j) (*ga)(j, i) += g(i, j);
  });
}

Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return a.tape().record(Tensor::scalar(s), {a}, [](BackwardContext& c) {
    const double g = c.out_grad()[0];
    Tensor* ga = c.grad(0);
    for (auto& v : ga->data()) v += g;
  });
}

Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

Var mean_rows(Var a) {
  require_matrix(a.value(), "mean_rows");
  const Tensor& x = a.value();
  Tensor out({1, x.cols()});
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) out(0, j) += x(i, j);
  const double inv = 1.0 / static_cast<double>(x.rows());
  for (auto& v : out.data()) v *= inv;
  return a.tape().record(std::move(out), {a}, [inv](BackwardContext& c) {
    const Tensor& g = c.out_grad();
    Tensor* ga = c.grad(0);
    for (std::size_t i = 0; i < ga->rows(); ++i)
      for (std::size_t j = 0; j < ga->cols(); ++j) (*ga)(i, j) += g(0, j) * inv;
  });
}

Var row_sums(Var a) {
  require_matrix(a.value(), "row_sums");
  const Tensor& x = a.value();
  Tensor out({x.rows(), 1});
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) out(i, 0) += x(i, j);
  return a.tape().record(std::move(out), {a}, [](BackwardContext& c) {
    const Tensor& g = c.out_grad();
    Tensor* ga = c.grad(0);
    for (std::size_t i = 0; i < ga->rows(); ++i)
      for (std::size_t j = 0; j < ga->cols(); ++j) (*ga)(i, j) += g(i, 0);
  });
}

// ---- row-wise ops ----------------------------------------------------------

Var softmax_rows(Var a) {
  require_matrix(a.value(), "softmax_rows");
  const Tensor& x = a.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto xr = x.row(i);
    auto yr = out.row(i);
    const double mx = *std::max_element(xr.begin(), xr.end());
    double s = 0.0;
    for (std::size_t j = 0; j < xr.size(); ++j) {
      yr[j] = std::exp(xr[j] - mx);
      s += yr[j];
    }
    for (auto& v : yr) v /= s;
  }
  return a.tape().record(std::move(out), {a}, [](BackwardContext& c) {
    const Tensor& g = c.out_grad();
    const Tensor& y = c.out_value();
    Tensor* ga = c.grad(0);
    for (std::size_t i = 0; i < y.rows(); ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < y.cols(); ++j) dot += g(i, j) * y(i, j);
      for (std::size_t j = 0; j < y.cols(); ++j) (*ga)(i, j) += y(i, j) * (g(i, j) - dot);
    }
  });
}

Var l2_normalize_rows(Var a, double floor) {
  require_matrix(a.value(), "l2_normalize_rows");
  if (!(floor > 0.0)) throw ContractError("l2_normalize_rows floor must be positive");
  const Tensor& x = a.value();
  Tensor out(x.shape());
  std::vector<double> denom(x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double s = 0.0;
    for (double v : x.row(i)) s += v * v;
    denom[i] = std::max(std::sqrt(s), floor);
    for (std::size_t j = 0; j < x.cols(); ++j) out(i, j) = x(i, j) / denom[i];
  }
  return a.tape().record(
      std::move(out), {a}, [denom = std::move(denom), floor](BackwardContext& c) {
        const Tensor& g = c.out_grad();
        const Tensor& y = c.out_value();
        Tensor* ga = c.grad(0);
        for (std::size_t i = 0; i < y.rows(); ++i) {
          const double d = denom[i];
          if (d > floor) {
            double dot = 0.0;
            for (std::size_t j = 0; j < y.cols(); ++j) dot += y(i, j) * g(i, j);
            for (std::size_t j = 0; j < y.cols(); ++j)
              (*ga)(i, j) += (g(i, j) - y(i, j) * dot) / d;
          } else {
            for (std::size_t j = 0; j < y.cols(); ++j) (*ga)(i, j) += g(i, j) / d;
          }
        }
      });
}

Var row_norms(Var a) {
  require_matrix(a.value(), "row_norms");
  const Tensor& x = a.value();
  Tensor out({x.rows(), 1});
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double s = 0.0;
    for (double v : x.row(i)) s += v * v;
    out(i, 0) = std::sqrt(s);
  }
  return a.tape().record(std::move(out), {a}, [](BackwardContext& c) {
    const Tensor& g = c.out_grad();
    const Tensor& n = c.out_value();
    const Tensor& x = c.input(0);
    Tensor* ga = c.grad(0);
    for (std::size_t i = 0; i < x.rows(); ++i) {
      if (n(i, 0) == 0.0) continue;
      const double s = g(i, 0) / n(i, 0);
      for (std::size_t j = 0; j < x.cols(); ++j) (*ga)(i, j) += s * x(i, j);
    }
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  require_matrix(x.value(), "layer_norm");
  const Tensor& xv = x.value();
  const std::size_t m = xv.rows(), n = xv.cols();
  const Shape row_shape{1, n};
  if (gain.value().shape() != row_shape || bias.value().shape() != row_shape) {
    throw DimensionError("layer_norm gain/bias must be " + shape_str(row_shape));
  }
  Tensor xhat(xv.shape());
  std::vector<double> inv_sd(m);
  for (std::size_t i = 0; i < m; ++i) {
    double mu = 0.0;
    for (double v : xv.row(i)) mu += v;
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (double v : xv.row(i)) var += (v - mu) * (v - mu);
    var /= static_cast<double>(n);
    inv_sd[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) xhat(i, j) = (xv(i, j) - mu) * inv_sd[i];
  }
  Tensor out(xv.shape());
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out(i, j) = xhat(i, j) * gv[j] + bv[j];
  return x.tape().record(
      std::move(out), {x, gain, bias},
      [xhat = std::move(xhat), inv_sd = std::move(inv_sd)](BackwardContext& c) {
        const Tensor& g = c.out_grad();
        const Tensor& gv = c.input(1);
        const std::size_t m = g.rows(), n = g.cols();
        if (Tensor* gg = c.grad(1))
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) (*gg)[j] += g(i, j) * xhat(i, j);
        if (Tensor* gb = c.grad(2))
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) (*gb)[j] += g(i, j);
        if (Tensor* gx = c.grad(0)) {
          std::vector<double> dxhat(n);
          for (std::size_t i = 0; i < m; ++i) {
            double mean_d = 0.0, mean_dx = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              dxhat[j] = g(i, j) * gv[j];
              mean_d += dxhat[j];
              mean_dx += dxhat[j] * xhat(i, j);
            }
            mean_d /= static_cast<double>(n);
            mean_dx /= static_cast<double>(n);
            for (std::size_t j = 0; j < n; ++j)
              (*gx)(i, j) += inv_sd[i] * (dxhat[j] - mean_d - xhat(i, j) * mean_dx);
          }
        }
      });
}

Var add_row(Var x, Var row) {
  require_matrix(x.value(), "add_row");
  const Tensor& xv = x.value();
  if (row.value().shape() != Shape{1, xv.cols()}) {
    throw DimensionError("add_row: row shape " + shape_str(row.value().shape()) +
                         " does not fit " + shape_str(xv.shape()));
  }
  Tensor out = xv;
  const Tensor& r = row.value();
  for (std::size_t i = 0; i < xv.rows(); ++i)
    for (std::size_t j = 0; j < xv.cols(); ++j) out(i, j) += r[j];
  return x.tape().record(std::move(out), {x, row}, [](BackwardContext& c) {
    const Tensor& g = c.out_grad();
    if (Tensor* gx = c.grad(0))
      for (std::size_t k = 0; k < g.size(); ++k) (*gx)[k] += g[k];
    if (Tensor* gr = c.grad(1))
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) (*gr)[j] += g(i, j);
  });
}

// ---- structural ------------------------------------------------------------

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_cols of nothing");
  const std::size_t m = parts[0].value().rows();
  std::size_t n = 0;
  for (const Var& p : parts) {
    require_matrix(p.value(), "concat_cols");
    if (p.value().rows() != m) {
      throw DimensionError("concat_cols row mismatch: " + shape_str(parts[0].shape()) + " vs " +
                           shape_str(p.shape()));
    }
    n += p.value().cols();
  }
  Tensor out({m, n});
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < v.cols(); ++j) out(i, off + j) = v(i, j);
    offsets.push_back(off);
    off += v.cols();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return parts[0].tape().record(
      std::move(out), std::move(inputs), [offsets = std::move(offsets)](BackwardContext& c) {
        const Tensor& g = c.out_grad();
        for (std::size_t k = 0; k < offsets.size(); ++k) {
          Tensor* gp = c.grad(k);
          if (!gp) continue;
          for (std::size_t i = 0; i < gp->rows(); ++i)
            for (std::size_t j = 0; j < gp->cols(); ++j) (*gp)(i, j) += g(i, offsets[k] + j);
        }
      });
}

Var slice_cols(Var a, std::size_t begin, std::size_t count) {
  require_matrix(a.value(), "slice_cols");
  const Tensor& x = a.value();
  if (count == 0 || begin + count > x.cols()) {
    throw DimensionError("slice_cols [" + std::to_string(begin) + ", +" + std::to_string(count) +
                         ") out of range for " + shape_str(x.shape()));
  }
  Tensor out({x.rows(), count});
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < count; ++j) out(i, j) = x(i, begin + j);
  return a.tape().record(std::move(out), {a}, [begin](BackwardContext& c) {
    const Tensor& g = c.out_grad();
    Tensor* ga = c.grad(0);
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t j = 0; j < g.cols(); ++j) (*ga)(i, begin + j) += g(i, j);
  });
}

Var slice_rows(Var a, std::size_t begin, std::size_t count) {
  require_matrix(a.value(), "slice_rows");
  const Tensor& x = a.value();
  if (count == 0 || begin + count > x.rows()) {
    throw DimensionError("slice_rows [" + std::to_string(begin) + ", +" + std::to_string(count) +
                         ") out of range for " + shape_str(x.shape()));
  }
  std::vector<double> d(x.storage().begin() + static_cast<std::ptrdiff_t>(begin * x.cols()),
                        x.storage().begin() +
                            static_cast<std::ptrdiff_t>((begin + count) * x.cols()));
  return a.tape().record(Tensor({count, x.cols()}, std::move(d)), {a},
                         [begin](BackwardContext& c) {
                           const Tensor& g = c.out_grad();
                           Tensor* ga = c.grad(0);
                           const std::size_t off = begin * g.cols();
                           for (std::size_t k = 0; k < g.size(); ++k) (*ga)[off + k] += g[k];
                         });
}

// ---- distances -------------------------------------------------------------

Var sq_distance_matrix(Var a, Var b) {
  require_matrix(a.value(), "sq_distance_matrix");
  require_matrix(b.value(), "sq_distance_matrix");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols() != bv.cols()) {
    throw DimensionError("sq_distance_matrix width mismatch: " + shape_str(av.shape()) + " vs " +
                         shape_str(bv.shape()));
  }
  const std::size_t m = av.rows(), n = bv.rows(), d = av.cols();
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    auto ar = av.row(i);
    for (std::size_t j = 0; j < n; ++j) {
      auto br = bv.row(j);
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = ar[k] - br[k];
        s += diff * diff;
      }
      out(i, j) = s;
    }
  }
  return a.tape().record(std::move(out), {a, b}, [](BackwardContext& c) {
    const Tensor& g = c.out_grad();
    const Tensor& av = c.input(0);
    const Tensor& bv = c.input(1);
    const std::size_t m = av.rows(), n = bv.rows(), d = av.cols();
    if (Tensor* ga = c.grad(0)) {
      // 2 * (rowsum(g)_i a_i - (g b)_i)
      Tensor gb({m, d});
      kernels::gemm_nn(g.data().data(), bv.data().data(), gb.data().data(), m, n, d);
      for (std::size_t i = 0; i < m; ++i) {
        double rs = 0.0;
        for (std::size_t j = 0; j < n; ++j) rs += g(i, j);
        for (std::size_t k = 0; k < d; ++k) (*ga)(i, k) += 2.0 * (rs * av(i, k) - gb(i, k));
      }
    }
    if (Tensor* gbv = c.grad(1)) {
      Tensor gta({n, d});
      kernels::gemm_tn(g.data().data(), av.data().data(), gta.data().data(), m, n, d);
      for (std::size_t j = 0; j < n; ++j) {
        double cs = 0.0;
        for (std::size_t i = 0; i < m; ++i) cs += g(i, j);
        for (std::size_t k = 0; k < d; ++k) (*gbv)(j, k) += 2.0 * (cs * bv(j, k) - gta(j, k));
      }
    }
  });
}

Var pairwise_distance(Var x) {
  require_matrix(x.value(), "pairwise_distance");
  const Tensor& xv = x.value();
  const std::size_t l = xv.rows(), d = xv.cols();
  Tensor out({l, l});
  for (std::size_t i = 0; i < l; ++i) {
    for (std::size_t j = i + 1; j < l; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = xv(i, k) - xv(j, k);
        s += diff * diff;
      }
      out(i, j) = out(j, i) = std::sqrt(s);
    }
  }
  return x.tape().record(std::move(out), {x}, [](BackwardContext& c) {
    const Tensor& g = c.out_grad();
    const Tensor& dist = c.out_value();
    const Tensor& xv = c.input(0);
    Tensor* gx = c.grad(0);
    const std::size_t l = xv.rows(), d = xv.cols();
    for (std::size_t i = 0; i < l; ++i) {
      for (std::size_t j = i + 1; j < l; ++j) {
        if (dist(i, j) == 0.0) continue;
        const double w = (g(i, j) + g(j, i)) / dist(i, j);
        for (std::size_t k = 0; k < d; ++k) {
          const double diff = w * (xv(i, k) - xv(j, k));
          (*gx)(i, k) += diff;
          (*gx)(j, k) -= diff;
        }
      }
    }
  });
}

// ---- losses ----------------------------------------------------------------

Var bce_with_logits(Var logits, const Tensor& targets) {
  const Tensor& z = logits.value();
  if (z.shape() != targets.shape()) {
    throw DimensionError("bce_with_logits shape mismatch: " + shape_str(z.shape()) + " vs " +
                         shape_str(targets.shape()));
  }
  double s = 0.0;
  for (std::size_t k = 0; k < z.size(); ++k) {
    const double v = z[k];
    s += std::max(v, 0.0) - targets[k] * v + std::log1p(std::exp(-std::abs(v)));
  }
  const double inv_n = 1.0 / static_cast<double>(z.size());
  return logits.tape().record(Tensor::scalar(s * inv_n), {logits},
                              [targets, inv_n](BackwardContext& c) {
                                const double g = c.out_grad()[0];
                                const Tensor& z = c.input(0);
                                Tensor* gz = c.grad(0);
                                for (std::size_t k = 0; k < z.size(); ++k) {
                                  const double p = 1.0 / (1.0 + std::exp(-z[k]));
                                  (*gz)[k] += g * inv_n * (p - targets[k]);
                                }
                              });
}

Var detach(Var a) { return a.tape().constant(a.value()); }

// ---- gradient checking -----------------------------------------------------

CheckReport finite_diff_check(const MultiFunction& f, const std::vector<Tensor>& inputs,
                              double step, double tol) {
  if (!(step > 0.0 && step <= 1e-2)) throw ContractError("finite_diff_check step must lie in (0, 1e-2]");

  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> leaves;
    for (const Tensor& x : inputs) leaves.push_back(tape.leaf(x, true));
    Var y = f(tape, leaves);
    if (!std::isfinite(y.value().item())) throw InputError("non-finite function value");
    tape.backward(y);
    for (const Var& v : leaves) analytic.push_back(tape.grad(v));
  }

  auto eval = [&](const std::vector<Tensor>& xs) {
    Tape tape;
    std::vector<Var> leaves;
    for (const Tensor& x : xs) leaves.push_back(tape.constant(x));
    const double v = f(tape, leaves).value().item();
    if (!std::isfinite(v)) throw InputError("non-finite function value during finite differences");
    return v;
  };

  CheckReport report;
  std::vector<Tensor> work = inputs;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    Tensor numeric(inputs[i].shape());
    for (std::size_t k = 0; k < inputs[i].size(); ++k) {
      const double orig = inputs[i][k];
      work[i][k] = orig + step;
      const double fp = eval(work);
      work[i][k] = orig - step;
      const double fm = eval(work);
      work[i][k] = orig;
      numeric[k] = (fp - fm) / (2.0 * step);
    }
    double scale_ref = 0.0;
    for (double v : numeric.data()) scale_ref = std::max(scale_ref, std::abs(v));
    for (std::size_t k = 0; k < numeric.size(); ++k) {
      const double a = analytic[i][k];
      const double n = numeric[k];
      const double err = std::abs(a - n);
      const double denom =
          std::max({std::abs(a), std::abs(n), 1e-3 * scale_ref, 1e-10});
      const double rel = err / denom;
      report.max_abs_error = std::max(report.max_abs_error, err);
      if (rel > report.max_relative_error) {
        report.max_relative_error = rel;
        report.worst_input = i;
        report.worst_coordinate = k;
      }
      ++report.coordinates;
    }
  }
  report.passed = report.max_relative_error <= tol;
  return report;
}

CheckReport finite_diff_check(const SingleFunction& f, const Tensor& x, double step, double tol) {
  return finite_diff_check(
      [&f](Tape& t, std::span<const Var> xs) { return f(t, xs[0]); }, std::vector<Tensor>{x},
      step, tol);
}

}  // namespace evl
