#include "carm/nn.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>

#include "carm/error.hpp"

namespace carm::nn {
namespace {

using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

using ConstVec = Eigen::Map<const Eigen::Array<Real, Eigen::Dynamic, 1>>;
using Vec = Eigen::Map<Eigen::Array<Real, Eigen::Dynamic, 1>>;

MatMap as_mat(Tensor& t, std::int64_t rows, std::int64_t cols) { return MatMap(t.data(), rows, cols); }

// Fixed-order reductions.
double sum_of(const Real* p, std::int64_t n) {
  double s = 0.0;
  for (std::int64_t i = 0; i < n; ++i) s += p[i];
  return s;
}

double sum_of_products(const Real* a, const Real* b, std::int64_t n) {
  double s = 0.0;
  for (std::int64_t i = 0; i < n; ++i) s += double(a[i]) * double(b[i]);
  return s;
}

Var make_output(Tensor value, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = requires_grad;
  return node;
}

void require(bool cond, const char* what) {
  if (!cond) throw ValidationError(what);
}

struct ConvGeometry {
  std::int64_t ci, n, h, w, co, k, ho, wo;
  int stride, pad;
};

ConvGeometry conv_geometry(const Tensor& x, const Tensor& w, int stride, int pad) {
  require(x.rank() == 4 && w.rank() == 4, "conv2d expects rank-4 input and weight");
  require(w.dim(1) == x.dim(0), "conv2d channel mismatch");
  require(w.dim(2) == w.dim(3), "conv2d expects square kernels");
  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), 0, 0, stride, pad};
  g.ho = (g.h + 2 * pad - g.k) / stride + 1;
  g.wo = (g.w + 2 * pad - g.k) / stride + 1;
  require(g.ho > 0 && g.wo > 0, "conv2d output would be empty");
  return g;
}

// Output columns ow whose input column ow * stride - pad + kw is in range.
struct ColumnRange {
  std::int64_t lo, hi;
};

ColumnRange valid_columns(const ConvGeometry& g, std::int64_t kw) {
  const std::int64_t off = kw - g.pad;
  std::int64_t lo = off >= 0 ? 0 : (-off + g.stride - 1) / g.stride;
  std::int64_t hi = g.w - 1 - off < 0 ? 0 : (g.w - 1 - off) / g.stride + 1;
  hi = std::min(hi, g.wo);
  lo = std::min(lo, hi);
  return {lo, hi};
}

// cols: [Ci*k*k, (n1-n0)*Ho*Wo] for samples n0..n1-1.
void im2col(const Tensor& x, const ConvGeometry& g, std::int64_t n0, std::int64_t n1, Tensor& cols) {
  const std::int64_t plane = g.ho * g.wo;
  const std::int64_t p_total = (n1 - n0) * plane;
  Real* out = cols.data();
  for (std::int64_t c = 0; c < g.ci; ++c)
    for (std::int64_t kh = 0; kh < g.k; ++kh)
      for (std::int64_t kw = 0; kw < g.k; ++kw) {
        Real* row = out + ((c * g.k + kh) * g.k + kw) * p_total;
        const ColumnRange cr = valid_columns(g, kw);
        const std::int64_t off = kw - g.pad;
        for (std::int64_t n = n0; n < n1; ++n) {
          const Real* src = x.data() + (c * g.n + n) * g.h * g.w;
          Real* dst = row + (n - n0) * plane;
          for (std::int64_t oh = 0; oh < g.ho; ++oh) {
            const std::int64_t ih = oh * g.stride - g.pad + kh;
            Real* d = dst + oh * g.wo;
            if (ih < 0 || ih >= g.h) {
              std::fill(d, d + g.wo, Real(0));
              continue;
            }
            const Real* s = src + ih * g.w + off;
            std::fill(d, d + cr.lo, Real(0));
            if (g.stride == 1) {
              std::copy(s + cr.lo, s + cr.hi, d + cr.lo);
            } else {
              for (std::int64_t ow = cr.lo; ow < cr.hi; ++ow) d[ow] = s[ow * g.stride];
            }
            std::fill(d + cr.hi, d + g.wo, Real(0));
          }
        }
      }
}

void col2im(const Tensor& cols, const ConvGeometry& g, std::int64_t n0, std::int64_t n1, Tensor& dx) {
  const std::int64_t plane = g.ho * g.wo;
  const std::int64_t p_total = (n1 - n0) * plane;
  for (std::int64_t c = 0; c < g.ci; ++c)
    for (std::int64_t kh = 0; kh < g.k; ++kh)
      for (std::int64_t kw = 0; kw < g.k; ++kw) {
        const Real* row = cols.data() + ((c * g.k + kh) * g.k + kw) * p_total;
        const ColumnRange cr = valid_columns(g, kw);
        const std::int64_t off = kw - g.pad;
        for (std::int64_t n = n0; n < n1; ++n) {
          Real* dst = dx.data() + (c * g.n + n) * g.h * g.w;
          const Real* src = row + (n - n0) * plane;
          for (std::int64_t oh = 0; oh < g.ho; ++oh) {
            const std::int64_t ih = oh * g.stride - g.pad + kh;
            if (ih < 0 || ih >= g.h) continue;
            const Real* s = src + oh * g.wo;
            Real* d = dst + ih * g.w + off;
            for (std::int64_t ow = cr.lo; ow < cr.hi; ++ow) d[ow * g.stride] += s[ow];
          }
        }
      }
}

bool is_pointwise(const ConvGeometry& g) { return g.k == 1 && g.stride == 1 && g.pad == 0; }

// Samples per im2col chunk, sized so the column buffer stays cache-resident.
std::int64_t chunk_samples(const ConvGeometry& g) {
  const std::int64_t per_sample = g.ci * g.k * g.k * g.ho * g.wo;
  return std::clamp<std::int64_t>((std::int64_t(1) << 18) / std::max<std::int64_t>(per_sample, 1), 1, g.n);
}

}  // namespace

Var constant(Tensor value) { return make_output(std::move(value), false); }
Var variable(Tensor value) { return make_output(std::move(value), true); }

void accumulate_grad(Node& node, Tensor g) {
  if (node.grad.empty()) {
    node.grad = std::move(g);
    return;
  }
  Real* d = node.grad.data();
  const Real* s = g.data();
  for (std::int64_t i = 0; i < g.numel(); ++i) d[i] += s[i];
}

void Tape::backward(const Var& root, const Tensor& seed) {
  require(seed.same_shape(root->value), "backward seed shape must match the root");
  root->grad = seed;
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
}

bool recording(const Tape* tape, std::initializer_list<const Var*> inputs) {
  if (!tape) return false;
  for (const Var* v : inputs)
    if (*v && (*v)->requires_grad) return true;
  return false;
}

Var conv2d(Tape* tape, const Var& x, const Var& w, int stride, int pad) {
  const ConvGeometry g = conv_geometry(x->value, w->value, stride, pad);
  const std::int64_t kdim = g.ci * g.k * g.k;
  const std::int64_t plane = g.ho * g.wo;
  const std::int64_t p_total = g.n * plane;
  Tensor y({g.co, g.n, g.ho, g.wo});
  const auto wm = as_mat(w->value, g.co, kdim);
  if (is_pointwise(g)) {
    as_mat(y, g.co, p_total).noalias() = wm * as_mat(x->value, kdim, p_total);
  } else {
    const std::int64_t chunk = chunk_samples(g);
    Tensor cols({kdim, chunk * plane});
    auto ym = as_mat(y, g.co, p_total);
    for (std::int64_t n0 = 0; n0 < g.n; n0 += chunk) {
      const std::int64_t n1 = std::min(g.n, n0 + chunk);
      const std::int64_t cp = (n1 - n0) * plane;
      im2col(x->value, g, n0, n1, cols);
      ym.middleCols(n0 * plane, cp).noalias() = wm * as_mat(cols, kdim, cp);
    }
  }

  const bool rec = recording(tape, {&x, &w});
  Var out = make_output(std::move(y), rec);
  if (rec) {
    tape->record([x, w, out, g, kdim, plane, p_total] {
      if (out->grad.empty()) return;
      const auto dy = as_mat(out->grad, g.co, p_total);
      const auto wm = as_mat(w->value, g.co, kdim);
      Tensor dw, dx;
      if (w->requires_grad) dw = Tensor(w->value.shape());
      if (x->requires_grad) dx = Tensor(x->value.shape());
      if (is_pointwise(g)) {
        if (w->requires_grad) as_mat(dw, g.co, kdim).noalias() = dy * as_mat(x->value, kdim, p_total).transpose();
        if (x->requires_grad) as_mat(dx, kdim, p_total).noalias() = wm.transpose() * dy;
      } else {
        const std::int64_t chunk = chunk_samples(g);
        Tensor cols({kdim, chunk * plane});
        for (std::int64_t n0 = 0; n0 < g.n; n0 += chunk) {
          const std::int64_t n1 = std::min(g.n, n0 + chunk);
          const std::int64_t cp = (n1 - n0) * plane;
          const auto dyc = dy.middleCols(n0 * plane, cp);
          if (w->requires_grad) {
            im2col(x->value, g, n0, n1, cols);
            as_mat(dw, g.co, kdim).noalias() += dyc * as_mat(cols, kdim, cp).transpose();
          }
          if (x->requires_grad) {
            as_mat(cols, kdim, cp).noalias() = wm.transpose() * dyc;
            col2im(cols, g, n0, n1, dx);
          }
        }
      }
      if (w->requires_grad) accumulate_grad(*w, std::move(dw));
      if (x->requires_grad) accumulate_grad(*x, std::move(dx));
    });
  }
  return out;
}

Var batch_norm(Tape* tape, const Var& x, const Var& gamma, const Var& beta, const Tensor& running_mean,
               const Tensor& running_var, bool use_batch_stats, BatchStats* stats, Real eps) {
  const Tensor& xv = x->value;
  require(xv.rank() == 4, "batch_norm expects [C, N, H, W]");
  const std::int64_t c_count = xv.dim(0);
  const std::int64_t m = xv.dim(1) * xv.dim(2) * xv.dim(3);
  require(gamma->value.numel() == c_count && beta->value.numel() == c_count, "batch_norm parameter size");

  Tensor y(xv.shape());
  Tensor xhat(xv.shape());
  std::vector<Real> inv_std(static_cast<std::size_t>(c_count));
  if (stats) {
    stats->mean.assign(static_cast<std::size_t>(c_count), 0);
    stats->var_unbiased.assign(static_cast<std::size_t>(c_count), 0);
  }
  for (std::int64_t c = 0; c < c_count; ++c) {
    const Real* src = xv.data() + c * m;
    double mean, var;
    if (use_batch_stats) {
      mean = sum_of(src, m) / double(m);
      double ss = 0.0;
      for (std::int64_t i = 0; i < m; ++i) ss += (src[i] - mean) * (src[i] - mean);
      var = ss / double(m);
      if (stats) {
        stats->mean[static_cast<std::size_t>(c)] = static_cast<Real>(mean);
        stats->var_unbiased[static_cast<std::size_t>(c)] = static_cast<Real>(m > 1 ? ss / double(m - 1) : var);
      }
    } else {
      mean = running_mean[c];
      var = running_var[c];
    }
    const Real is = static_cast<Real>(1.0 / std::sqrt(var + eps));
    inv_std[static_cast<std::size_t>(c)] = is;
    const Real g = gamma->value[c], b = beta->value[c];
    const Real mu = static_cast<Real>(mean);
    Vec xh(xhat.data() + c * m, m);
    xh = (ConstVec(src, m) - mu) * is;
    Vec(y.data() + c * m, m) = xh * g + b;
  }

  const bool rec = recording(tape, {&x, &gamma, &beta});
  Var out = make_output(std::move(y), rec);
  if (rec) {
    tape->record([x, gamma, beta, out, xhat = std::move(xhat), inv_std = std::move(inv_std), c_count, m,
                  use_batch_stats] {
      if (out->grad.empty()) return;
      const Tensor& dy = out->grad;
      Tensor dgamma(gamma->value.shape()), dbeta(beta->value.shape());
      Tensor dx;
      if (x->requires_grad) dx = Tensor(x->value.shape());
      for (std::int64_t c = 0; c < c_count; ++c) {
        const Real* g = dy.data() + c * m;
        const Real* xh = xhat.data() + c * m;
        const double sum_dy = sum_of(g, m);
        const double sum_dy_xhat = sum_of_products(g, xh, m);
        dgamma[c] = static_cast<Real>(sum_dy_xhat);
        dbeta[c] = static_cast<Real>(sum_dy);
        if (!x->requires_grad) continue;
        const Real scale = gamma->value[c] * inv_std[static_cast<std::size_t>(c)];
        Real* d = dx.data() + c * m;
        if (use_batch_stats) {
          const Real mean_dy = static_cast<Real>(sum_dy / double(m));
          const Real mean_dy_xhat = static_cast<Real>(sum_dy_xhat / double(m));
          Vec(d, m) = scale * (ConstVec(g, m) - mean_dy - ConstVec(xh, m) * mean_dy_xhat);
        } else {
          Vec(d, m) = scale * ConstVec(g, m);
        }
      }
      if (gamma->requires_grad) accumulate_grad(*gamma, std::move(dgamma));
      if (beta->requires_grad) accumulate_grad(*beta, std::move(dbeta));
      if (x->requires_grad) accumulate_grad(*x, std::move(dx));
    });
  }
  return out;
}

Var relu(Tape* tape, const Var& x) {
  Tensor y = x->value;
  for (auto& v : y.values()) v = v > 0 ? v : Real(0);
  const bool rec = recording(tape, {&x});
  Var out = make_output(std::move(y), rec);
  if (rec) {
    tape->record([x, out] {
      if (out->grad.empty()) return;
      Tensor dx = out->grad;
      const Real* yv = out->value.data();
      Real* d = dx.data();
      for (std::int64_t i = 0; i < dx.numel(); ++i)
        if (!(yv[i] > 0)) d[i] = 0;
      accumulate_grad(*x, std::move(dx));
    });
  }
  return out;
}

Var add(Tape* tape, const Var& a, const Var& b) {
  require(a->value.same_shape(b->value), "add shape mismatch");
  Tensor y = a->value;
  Real* d = y.data();
  const Real* s = b->value.data();
  for (std::int64_t i = 0; i < y.numel(); ++i) d[i] += s[i];
  const bool rec = recording(tape, {&a, &b});
  Var out = make_output(std::move(y), rec);
  if (rec) {
    tape->record([a, b, out] {
      if (out->grad.empty()) return;
      if (a->requires_grad) accumulate_grad(*a, out->grad);
      if (b->requires_grad) accumulate_grad(*b, out->grad);
    });
  }
  return out;
}

Var mul(Tape* tape, const Var& a, const Var& b) {
  require(a->value.same_shape(b->value), "mul shape mismatch");
  Tensor y = a->value;
  Real* d = y.data();
  const Real* s = b->value.data();
  for (std::int64_t i = 0; i < y.numel(); ++i) d[i] *= s[i];
  const bool rec = recording(tape, {&a, &b});
  Var out = make_output(std::move(y), rec);
  if (rec) {
    tape->record([a, b, out] {
      if (out->grad.empty()) return;
      const Real* g = out->grad.data();
      if (a->requires_grad) {
        Tensor da = b->value;
        for (std::int64_t i = 0; i < da.numel(); ++i) da[i] *= g[i];
        accumulate_grad(*a, std::move(da));
      }
      if (b->requires_grad) {
        Tensor db = a->value;
        for (std::int64_t i = 0; i < db.numel(); ++i) db[i] *= g[i];
        accumulate_grad(*b, std::move(db));
      }
    });
  }
  return out;
}

Var max_pool3x3s2(Tape* tape, const Var& x) {
  const Tensor& xv = x->value;
  require(xv.rank() == 4, "max_pool expects [C, N, H, W]");
  const std::int64_t planes = xv.dim(0) * xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  const std::int64_t ho = (h + 2 - 3) / 2 + 1, wo = (w + 2 - 3) / 2 + 1;
  Tensor y({xv.dim(0), xv.dim(1), ho, wo});
  std::vector<std::int64_t> argmax(static_cast<std::size_t>(y.numel()));
  for (std::int64_t p = 0; p < planes; ++p) {
    const Real* src = xv.data() + p * h * w;
    for (std::int64_t oh = 0; oh < ho; ++oh)
      for (std::int64_t ow = 0; ow < wo; ++ow) {
        Real best = -std::numeric_limits<Real>::infinity();
        std::int64_t best_i = -1;
        for (std::int64_t kh = 0; kh < 3; ++kh) {
          const std::int64_t ih = oh * 2 - 1 + kh;
          if (ih < 0 || ih >= h) continue;
          for (std::int64_t kw = 0; kw < 3; ++kw) {
            const std::int64_t iw = ow * 2 - 1 + kw;
            if (iw < 0 || iw >= w) continue;
            const Real v = src[ih * w + iw];
            if (v > best) {
              best = v;
              best_i = ih * w + iw;
            }
          }
        }
        const std::int64_t o = (p * ho + oh) * wo + ow;
        y[o] = best;
        argmax[static_cast<std::size_t>(o)] = p * h * w + best_i;
      }
  }
  const bool rec = recording(tape, {&x});
  Var out = make_output(std::move(y), rec);
  if (rec) {
    tape->record([x, out, argmax = std::move(argmax)] {
      if (out->grad.empty()) return;
      Tensor dx(x->value.shape());
      for (std::size_t o = 0; o < argmax.size(); ++o) dx[argmax[o]] += out->grad[static_cast<std::int64_t>(o)];
      accumulate_grad(*x, std::move(dx));
    });
  }
  return out;
}

Var linear(Tape* tape, const Var& x, const Var& w, const Var& b) {
  require(x->value.rank() == 2 && w->value.rank() == 2, "linear expects [M, in] input and [out, in] weight");
  const std::int64_t m = x->value.dim(0), in = x->value.dim(1), outd = w->value.dim(0);
  require(w->value.dim(1) == in, "linear input width mismatch");
  require(b->value.numel() == outd, "linear bias size mismatch");
  Tensor y({m, outd});
  auto ym = as_mat(y, m, outd);
  ym.noalias() = as_mat(x->value, m, in) * as_mat(w->value, outd, in).transpose();
  ym.rowwise() += Eigen::Map<const Eigen::Matrix<Real, 1, Eigen::Dynamic>>(b->value.data(), outd);

  const bool rec = recording(tape, {&x, &w, &b});
  Var out = make_output(std::move(y), rec);
  if (rec) {
    tape->record([x, w, b, out, m, in, outd] {
      if (out->grad.empty()) return;
      const auto dy = as_mat(out->grad, m, outd);
      if (w->requires_grad) {
        Tensor dw(w->value.shape());
        as_mat(dw, outd, in).noalias() = dy.transpose() * as_mat(x->value, m, in);
        accumulate_grad(*w, std::move(dw));
      }
      if (b->requires_grad) {
        Tensor db(b->value.shape());
        for (std::int64_t r = 0; r < m; ++r)
          for (std::int64_t c = 0; c < outd; ++c) db[c] += dy(r, c);
        accumulate_grad(*b, std::move(db));
      }
      if (x->requires_grad) {
        Tensor dx(x->value.shape());
        as_mat(dx, m, in).noalias() = dy * as_mat(w->value, outd, in);
        accumulate_grad(*x, std::move(dx));
      }
    });
  }
  return out;
}

Var layer_norm(Tape* tape, const Var& x, const Var& gamma, const Var& beta, Real eps) {
  require(x->value.rank() == 2, "layer_norm expects [M, D]");
  const std::int64_t m = x->value.dim(0), d = x->value.dim(1);
  require(gamma->value.numel() == d && beta->value.numel() == d, "layer_norm parameter size");
  Tensor y(x->value.shape()), xhat(x->value.shape());
  std::vector<Real> inv_std(static_cast<std::size_t>(m));
  for (std::int64_t r = 0; r < m; ++r) {
    const Real* src = x->value.data() + r * d;
    double mean = 0;
    for (std::int64_t i = 0; i < d; ++i) mean += src[i];
    mean /= double(d);
    double var = 0;
    for (std::int64_t i = 0; i < d; ++i) var += (src[i] - mean) * (src[i] - mean);
    var /= double(d);
    const Real is = static_cast<Real>(1.0 / std::sqrt(var + eps));
    inv_std[static_cast<std::size_t>(r)] = is;
    for (std::int64_t i = 0; i < d; ++i) {
      const Real xh = (src[i] - static_cast<Real>(mean)) * is;
      xhat[r * d + i] = xh;
      y[r * d + i] = gamma->value[i] * xh + beta->value[i];
    }
  }
  const bool rec = recording(tape, {&x, &gamma, &beta});
  Var out = make_output(std::move(y), rec);
  if (rec) {
    tape->record([x, gamma, beta, out, xhat = std::move(xhat), inv_std = std::move(inv_std), m, d] {
      if (out->grad.empty()) return;
      Tensor dgamma(gamma->value.shape()), dbeta(beta->value.shape()), dx(x->value.shape());
      for (std::int64_t r = 0; r < m; ++r) {
        const Real* g = out->grad.data() + r * d;
        const Real* xh = xhat.data() + r * d;
        double sum_gx = 0, sum_gxx = 0;
        for (std::int64_t i = 0; i < d; ++i) {
          dgamma[i] += g[i] * xh[i];
          dbeta[i] += g[i];
          const double gx = double(g[i]) * gamma->value[i];
          sum_gx += gx;
          sum_gxx += gx * xh[i];
        }
        const Real mean_gx = static_cast<Real>(sum_gx / double(d)), mean_gxx = static_cast<Real>(sum_gxx / double(d));
        const Real is = inv_std[static_cast<std::size_t>(r)];
        for (std::int64_t i = 0; i < d; ++i)
          dx[r * d + i] = is * (g[i] * gamma->value[i] - mean_gx - xh[i] * mean_gxx);
      }
      if (gamma->requires_grad) accumulate_grad(*gamma, std::move(dgamma));
      if (beta->requires_grad) accumulate_grad(*beta, std::move(dbeta));
      if (x->requires_grad) accumulate_grad(*x, std::move(dx));
    });
  }
  return out;
}

Var spatial_tokens(Tape* tape, const Var& z) {
  const Tensor& zv = z->value;
  require(zv.rank() == 4, "spatial_tokens expects [C, N, h, w]");
  const std::int64_t c = zv.dim(0), n = zv.dim(1), hw = zv.dim(2) * zv.dim(3);
  Tensor y({n * hw, c});
  for (std::int64_t ci = 0; ci < c; ++ci)
    for (std::int64_t s = 0; s < n * hw; ++s) y[s * c + ci] = zv[ci * n * hw + s];
  const bool rec = recording(tape, {&z});
  Var out = make_output(std::move(y), rec);
  if (rec) {
    tape->record([z, out, c, n, hw] {
      if (out->grad.empty()) return;
      Tensor dz(z->value.shape());
      for (std::int64_t ci = 0; ci < c; ++ci)
        for (std::int64_t s = 0; s < n * hw; ++s) dz[ci * n * hw + s] = out->grad[s * c + ci];
      accumulate_grad(*z, std::move(dz));
    });
  }
  return out;
}

Var mean_tokens(Tape* tape, const Var& x, std::int64_t n) {
  require(x->value.rank() == 2 && n > 0 && x->value.dim(0) % n == 0, "mean_tokens row count must be a multiple of n");
  const std::int64_t t = x->value.dim(0) / n, d = x->value.dim(1);
  Tensor y({n, d});
  for (std::int64_t s = 0; s < n; ++s)
    for (std::int64_t j = 0; j < t; ++j)
      for (std::int64_t i = 0; i < d; ++i) y[s * d + i] += x->value[(s * t + j) * d + i];
  for (auto& v : y.values()) v /= static_cast<Real>(t);
  const bool rec = recording(tape, {&x});
  Var out = make_output(std::move(y), rec);
  if (rec) {
    tape->record([x, out, n, t, d] {
      if (out->grad.empty()) return;
      Tensor dx(x->value.shape());
      const Real inv = Real(1) / static_cast<Real>(t);
      for (std::int64_t s = 0; s < n; ++s)
        for (std::int64_t j = 0; j < t; ++j)
          for (std::int64_t i = 0; i < d; ++i) dx[(s * t + j) * d + i] = out->grad[s * d + i] * inv;
      accumulate_grad(*x, std::move(dx));
    });
  }
  return out;
}

Var attention(Tape* tape, const Var& q, const Var& k, const Var& v, std::int64_t n, Tensor* weights_out) {
  require(q->value.rank() == 2 && k->value.rank() == 2 && v->value.rank() == 2, "attention expects rank-2 inputs");
  require(q->value.dim(0) == n, "attention query count must equal n");
  require(k->value.same_shape(v->value), "attention keys and values must match");
  const std::int64_t d = q->value.dim(1);
  require(k->value.dim(1) == d, "attention key width mismatch");
  require(k->value.dim(0) >= n && k->value.dim(0) % n == 0, "attention needs at least one key per query");
  const std::int64_t t = k->value.dim(0) / n;
  const Real scale = static_cast<Real>(1.0 / std::sqrt(static_cast<double>(d)));

  Tensor weights({n, t});
  Tensor y({n, d});
  for (std::int64_t s = 0; s < n; ++s) {
    const Real* qs = q->value.data() + s * d;
    Real max_score = -std::numeric_limits<Real>::infinity();
    for (std::int64_t j = 0; j < t; ++j) {
      const Real* kj = k->value.data() + (s * t + j) * d;
      Real dotv = 0;
      for (std::int64_t i = 0; i < d; ++i) dotv += qs[i] * kj[i];
      weights[s * t + j] = dotv * scale;
      max_score = std::max(max_score, weights[s * t + j]);
    }
    double z = 0;
    for (std::int64_t j = 0; j < t; ++j) {
      const Real e = std::exp(weights[s * t + j] - max_score);
      weights[s * t + j] = e;
      z += e;
    }
    for (std::int64_t j = 0; j < t; ++j) {
      const Real a = static_cast<Real>(weights[s * t + j] / z);
      weights[s * t + j] = a;
      const Real* vj = v->value.data() + (s * t + j) * d;
      for (std::int64_t i = 0; i < d; ++i) y[s * d + i] += a * vj[i];
    }
  }
  if (weights_out) *weights_out = weights;

  const bool rec = recording(tape, {&q, &k, &v});
  Var out = make_output(std::move(y), rec);
  if (rec) {
    tape->record([q, k, v, out, weights = std::move(weights), n, t, d, scale] {
      if (out->grad.empty()) return;
      Tensor dq(q->value.shape()), dk(k->value.shape()), dv(v->value.shape());
      std::vector<Real> da(static_cast<std::size_t>(t));
      for (std::int64_t s = 0; s < n; ++s) {
        const Real* g = out->grad.data() + s * d;
        double weighted = 0;
        for (std::int64_t j = 0; j < t; ++j) {
          const Real a = weights[s * t + j];
          const Real* vj = v->value.data() + (s * t + j) * d;
          Real* dvj = dv.data() + (s * t + j) * d;
          Real acc = 0;
          for (std::int64_t i = 0; i < d; ++i) {
            dvj[i] = a * g[i];
            acc += g[i] * vj[i];
          }
          da[static_cast<std::size_t>(j)] = acc;
          weighted += double(a) * acc;
        }
        const Real* qs = q->value.data() + s * d;
        Real* dqs = dq.data() + s * d;
        for (std::int64_t j = 0; j < t; ++j) {
          const Real ds = weights[s * t + j] * (da[static_cast<std::size_t>(j)] - static_cast<Real>(weighted)) * scale;
          const Real* kj = k->value.data() + (s * t + j) * d;
          Real* dkj = dk.data() + (s * t + j) * d;
          for (std::int64_t i = 0; i < d; ++i) {
            dqs[i] += ds * kj[i];
            dkj[i] = ds * qs[i];
          }
        }
      }
      if (q->requires_grad) accumulate_grad(*q, std::move(dq));
      if (k->requires_grad) accumulate_grad(*k, std::move(dk));
      if (v->requires_grad) accumulate_grad(*v, std::move(dv));
    });
  }
  return out;
}

}  // namespace carm::nn
