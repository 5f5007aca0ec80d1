#include "canopy/nn/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "canopy/error.hpp"

namespace canopy::nn {
namespace {

using MatR = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw ValidationError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " +
                        shape_str(b));
}

std::size_t norm_axis(int axis, std::size_t rank, const char* op) {
  const int r = static_cast<int>(rank);
  if (axis < -r || axis >= r)
    throw ValidationError(std::string(op) + ": axis " + std::to_string(axis) + " out of range");
  return static_cast<std::size_t>(axis < 0 ? axis + r : axis);
}

// ---- broadcasting -------------------------------------------------------

struct Broadcast {
  Shape out;
  std::vector<std::size_t> sa, sb;  // strides into a and b per output dim (0 = broadcast)
  bool same = false;
};

Broadcast broadcast(const Shape& a, const Shape& b, const char* op) {
  Broadcast bc;
  const std::size_t r = std::max(a.size(), b.size());
  bc.out.resize(r);
  bc.sa.assign(r, 0);
  bc.sb.assign(r, 0);
  std::size_t stride_a = 1, stride_b = 1;
  for (std::size_t k = 0; k < r; ++k) {
    const std::size_t i = r - 1 - k;
    const std::size_t da = k < a.size() ? a[a.size() - 1 - k] : 1;
    const std::size_t db = k < b.size() ? b[b.size() - 1 - k] : 1;
    if (da != db && da != 1 && db != 1) shape_error(op, a, b);
    bc.out[i] = std::max(da, db);
    bc.sa[i] = da == 1 ? 0 : stride_a;
    bc.sb[i] = db == 1 ? 0 : stride_b;
    stride_a *= da;
    stride_b *= db;
  }
  bc.same = a == b;
  return bc;
}

template <typename Fn>
void for_each_bc(const Broadcast& bc, Fn&& fn) {
  const std::size_t n = numel(bc.out);
  if (bc.same) {
    for (std::size_t i = 0; i < n; ++i) fn(i, i, i);
    return;
  }
  const std::size_t r = bc.out.size();
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t i = 0; i < n; ++i) {
    fn(i, ia, ib);
    for (std::size_t d = r; d-- > 0;) {
      if (++idx[d] < bc.out[d]) {
        ia += bc.sa[d];
        ib += bc.sb[d];
        break;
      }
      ia -= bc.sa[d] * (bc.out[d] - 1);
      ib -= bc.sb[d] * (bc.out[d] - 1);
      idx[d] = 0;
    }
  }
}

template <typename Fwd, typename Da, typename Db>
Tensor binary(const Tensor& a, const Tensor& b, const char* op, Fwd fwd, Da da, Db db) {
  Broadcast bc = broadcast(a.shape(), b.shape(), op);
  Buffer out(numel(bc.out));
  const auto av = a.data();
  const auto bv = b.data();
  for_each_bc(bc, [&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = fwd(av[ia], bv[ib]); });
  Shape shape = bc.out;
  return make_result(std::move(shape), std::move(out), {a, b}, [bc, da, db](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    const bool ga = pa.requires_grad, gb = pb.requires_grad;
    for_each_bc(bc, [&](std::size_t i, std::size_t ia, std::size_t ib) {
      const double g = self.grad[i];
      if (ga) pa.grad[ia] += g * da(pa.value[ia], pb.value[ib]);
      if (gb) pb.grad[ib] += g * db(pa.value[ia], pb.value[ib]);
    });
  });
}

template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& x, Fwd fwd, Deriv deriv) {
  const auto xv = x.data();
  Buffer out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  return make_result(x.shape(), std::move(out), {x}, [deriv](Node& self) {
    Node& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      p.grad[i] += self.grad[i] * deriv(p.value[i], self.value[i]);
  });
}

void require_rank(const Tensor& t, std::size_t r, const char* op) {
  if (t.rank() != r)
    throw ValidationError(std::string(op) + ": expected rank " + std::to_string(r) + ", got shape " +
                          shape_str(t.shape()));
}

// Row-major im2col for one image: rows are (c, ki, kj), columns output pixels.
void im2col(const double* x, std::size_t C, std::size_t H, std::size_t W, std::size_t kh,
            std::size_t kw, int stride, int pad, std::size_t Ho, std::size_t Wo, double* col) {
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ki = 0; ki < kh; ++ki)
      for (std::size_t kj = 0; kj < kw; ++kj) {
        double* row = col + ((c * kh + ki) * kw + kj) * Ho * Wo;
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          const long iy = static_cast<long>(oy) * stride - pad + static_cast<long>(ki);
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            const long ix = static_cast<long>(ox) * stride - pad + static_cast<long>(kj);
            row[oy * Wo + ox] = (iy < 0 || ix < 0 || iy >= static_cast<long>(H) || ix >= static_cast<long>(W))
                                    ? 0.0
                                    : x[(c * H + iy) * W + ix];
          }
        }
      }
}

void col2im(const double* col, std::size_t C, std::size_t H, std::size_t W, std::size_t kh,
            std::size_t kw, int stride, int pad, std::size_t Ho, std::size_t Wo, double* x) {
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ki = 0; ki < kh; ++ki)
      for (std::size_t kj = 0; kj < kw; ++kj) {
        const double* row = col + ((c * kh + ki) * kw + kj) * Ho * Wo;
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          const long iy = static_cast<long>(oy) * stride - pad + static_cast<long>(ki);
          if (iy < 0 || iy >= static_cast<long>(H)) continue;
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            const long ix = static_cast<long>(ox) * stride - pad + static_cast<long>(kj);
            if (ix < 0 || ix >= static_cast<long>(W)) continue;
            x[(c * H + iy) * W + ix] += row[oy * Wo + ox];
          }
        }
      }
}

struct AxisTable {
  std::vector<std::size_t> i0, i1;
  Buffer t;
};

AxisTable linear_axis(std::size_t in, std::size_t out, int factor) {
  AxisTable tab;
  tab.i0.resize(out);
  tab.i1.resize(out);
  tab.t.resize(out);
  for (std::size_t o = 0; o < out; ++o) {
    double u = (static_cast<double>(o) + 0.5) / factor - 0.5;
    u = std::clamp(u, 0.0, static_cast<double>(in - 1));
    const auto lo = static_cast<std::size_t>(std::floor(u));
    tab.i0[o] = lo;
    tab.i1[o] = std::min(lo + 1, in - 1);
    tab.t[o] = u - static_cast<double>(lo);
  }
  return tab;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor scale(const Tensor& a, double s) {
  return unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 1 || b.rank() != 2 || a.shape().back() != b.dim(0)) shape_error("matmul", a.shape(), b.shape());
  const std::size_t k = b.dim(0), n = b.dim(1), m = a.numel() / k;
  Shape out_shape = a.shape();
  out_shape.back() = n;
  Buffer out(m * n);
  MapR(out.data(), m, n).noalias() = CMapR(a.data().data(), m, k) * CMapR(b.data().data(), k, n);
  return make_result(std::move(out_shape), std::move(out), {a, b}, [m, k, n](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    CMapR g(self.grad.data(), m, n);
    if (pa.requires_grad)
      MapR(pa.grad.data(), m, k).noalias() += g * CMapR(pb.value.data(), k, n).transpose();
    if (pb.requires_grad)
      MapR(pb.grad.data(), k, n).noalias() += CMapR(pa.value.data(), m, k).transpose() * g;
  });
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
    shape_error("bmm", a.shape(), b.shape());
  const std::size_t B = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  Buffer out(B * m * n);
  for (std::size_t i = 0; i < B; ++i)
    MapR(out.data() + i * m * n, m, n).noalias() =
        CMapR(a.data().data() + i * m * k, m, k) * CMapR(b.data().data() + i * k * n, k, n);
  return make_result({B, m, n}, std::move(out), {a, b}, [B, m, k, n](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    for (std::size_t i = 0; i < B; ++i) {
      CMapR g(self.grad.data() + i * m * n, m, n);
      if (pa.requires_grad)
        MapR(pa.grad.data() + i * m * k, m, k).noalias() +=
            g * CMapR(pb.value.data() + i * k * n, k, n).transpose();
      if (pb.requires_grad)
        MapR(pb.grad.data() + i * k * n, k, n).noalias() +=
            CMapR(pa.value.data() + i * m * k, m, k).transpose() * g;
    }
  });
}

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int padding) {
  require_rank(x, 4, "conv2d input");
  require_rank(weight, 4, "conv2d weight");
  if (x.dim(1) != weight.dim(1)) shape_error("conv2d", x.shape(), weight.shape());
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != weight.dim(0)))
    shape_error("conv2d bias", weight.shape(), bias.shape());
  if (stride < 1 || padding < 0) throw ValidationError("conv2d: invalid stride or padding");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t O = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  if (H + 2 * padding < kh || W + 2 * padding < kw)
    shape_error("conv2d (kernel larger than padded input)", x.shape(), weight.shape());
  const std::size_t Ho = (H + 2 * padding - kh) / stride + 1;
  const std::size_t Wo = (W + 2 * padding - kw) / stride + 1;
  const std::size_t K = C * kh * kw, P = Ho * Wo;
  const bool direct = kh == 1 && kw == 1 && stride == 1 && padding == 0;

  Buffer out(N * O * P);
  Buffer col(direct ? 0 : K * P);
  CMapR wmat(weight.data().data(), O, K);
  for (std::size_t n = 0; n < N; ++n) {
    const double* xn = x.data().data() + n * C * H * W;
    const double* colp = xn;
    if (!direct) {
      im2col(xn, C, H, W, kh, kw, stride, padding, Ho, Wo, col.data());
      colp = col.data();
    }
    MapR o(out.data() + n * O * P, O, P);
    o.noalias() = wmat * CMapR(colp, K, P);
    if (bias.defined()) o.colwise() += Eigen::Map<const Eigen::VectorXd>(bias.data().data(), O);
  }

  std::vector<Tensor> inputs{x, weight};
  const bool has_bias = bias.defined();
  if (has_bias) inputs.push_back(bias);
  return make_result({N, O, Ho, Wo}, std::move(out), std::move(inputs),
                     [=](Node& self) {
                       Node& px = *self.parents[0];
                       Node& pw = *self.parents[1];
                       Buffer colb(direct ? 0 : K * P);
                       Buffer dcol(direct ? 0 : K * P);
                       CMapR wm(pw.value.data(), O, K);
                       for (std::size_t n = 0; n < N; ++n) {
                         CMapR g(self.grad.data() + n * O * P, O, P);
                         const double* xn = px.value.data() + n * C * H * W;
                         if (pw.requires_grad) {
                           const double* colp = xn;
                           if (!direct) {
                             im2col(xn, C, H, W, kh, kw, stride, padding, Ho, Wo, colb.data());
                             colp = colb.data();
                           }
                           MapR(pw.grad.data(), O, K).noalias() += g * CMapR(colp, K, P).transpose();
                         }
                         if (px.requires_grad) {
                           if (direct) {
                             MapR(px.grad.data() + n * C * H * W, K, P).noalias() += wm.transpose() * g;
                           } else {
                             MapR(dcol.data(), K, P).noalias() = wm.transpose() * g;
                             col2im(dcol.data(), C, H, W, kh, kw, stride, padding, Ho, Wo,
                                    px.grad.data() + n * C * H * W);
                           }
                         }
                         if (has_bias && self.parents[2]->requires_grad)
                           Eigen::Map<Eigen::VectorXd>(self.parents[2]->grad.data(), O) += g.rowwise().sum();
                       }
                     });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() < 1) throw ValidationError("layer_norm on a scalar");
  const std::size_t D = x.shape().back();
  if (gamma.numel() != D || beta.numel() != D) shape_error("layer_norm", x.shape(), gamma.shape());
  const std::size_t rows = x.numel() / D;
  Buffer out(x.numel()), xhat(x.numel()), inv_std(rows);
  const auto xv = x.data();
  const auto gv = gamma.data();
  const auto bv = beta.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * D;
    double mu = 0.0;
    for (std::size_t j = 0; j < D; ++j) mu += xr[j];
    mu /= D;
    double var = 0.0;
    for (std::size_t j = 0; j < D; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= D;
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < D; ++j) {
      xhat[r * D + j] = (xr[j] - mu) * inv_std[r];
      out[r * D + j] = xhat[r * D + j] * gv[j] + bv[j];
    }
  }
  return make_result(x.shape(), std::move(out), {x, gamma, beta},
                     [D, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                       Node& px = *self.parents[0];
                       Node& pg = *self.parents[1];
                       Node& pb = *self.parents[2];
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double* g = self.grad.data() + r * D;
                         const double* xh = xhat.data() + r * D;
                         double m1 = 0.0, m2 = 0.0;
                         for (std::size_t j = 0; j < D; ++j) {
                           if (pg.requires_grad) pg.grad[j] += g[j] * xh[j];
                           if (pb.requires_grad) pb.grad[j] += g[j];
                           const double d = g[j] * pg.value[j];
                           m1 += d;
                           m2 += d * xh[j];
                         }
                         if (!px.requires_grad) continue;
                         m1 /= D;
                         m2 /= D;
                         for (std::size_t j = 0; j < D; ++j)
                           px.grad[r * D + j] += inv_std[r] * (g[j] * pg.value[j] - m1 - xh[j] * m2);
                       }
                     });
}

Tensor softmax(const Tensor& x, int axis) {
  const std::size_t ax = norm_axis(axis, x.rank(), "softmax");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= x.dim(i);
  for (std::size_t i = ax + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t len = x.dim(ax);
  const auto xv = x.data();
  Buffer out(x.numel());
  Buffer mx(inner), s(inner);
  for (std::size_t o = 0; o < outer; ++o) {
    const std::size_t base = o * len * inner;
    std::fill(mx.begin(), mx.end(), -std::numeric_limits<double>::infinity());
    std::fill(s.begin(), s.end(), 0.0);
    for (std::size_t k = 0; k < len; ++k)
      for (std::size_t i = 0; i < inner; ++i) mx[i] = std::max(mx[i], xv[base + k * inner + i]);
    for (std::size_t k = 0; k < len; ++k)
      for (std::size_t i = 0; i < inner; ++i) {
        const double e = std::exp(xv[base + k * inner + i] - mx[i]);
        out[base + k * inner + i] = e;
        s[i] += e;
      }
    for (std::size_t k = 0; k < len; ++k)
      for (std::size_t i = 0; i < inner; ++i) out[base + k * inner + i] /= s[i];
  }
  return make_result(x.shape(), std::move(out), {x}, [outer, inner, len](Node& self) {
    Node& p = *self.parents[0];
    Buffer dot(inner);
    for (std::size_t o = 0; o < outer; ++o) {
      const std::size_t base = o * len * inner;
      std::fill(dot.begin(), dot.end(), 0.0);
      for (std::size_t k = 0; k < len; ++k)
        for (std::size_t i = 0; i < inner; ++i) {
          const std::size_t j = base + k * inner + i;
          dot[i] += self.grad[j] * self.value[j];
        }
      for (std::size_t k = 0; k < len; ++k)
        for (std::size_t i = 0; i < inner; ++i) {
          const std::size_t j = base + k * inner + i;
          p.grad[j] += self.value[j] * (self.grad[j] - dot[i]);
        }
    }
  });
}

Tensor relu(const Tensor& x) {
  return unary(x, [](double v) { return v > 0 ? v : 0.0; },
               [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x) {
  return unary(
      x, [](double v) { return 0.5 * v * (1.0 + std::erf(v / std::numbers::sqrt2)); },
      [](double v, double) {
        const double cdf = 0.5 * (1.0 + std::erf(v / std::numbers::sqrt2));
        const double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * std::numbers::pi);
        return cdf + v * pdf;
      });
}

Tensor softplus(const Tensor& x) {
  return unary(
      x, [](double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); },
      [](double v, double) { return 1.0 / (1.0 + std::exp(-v)); });
}

Tensor exp(const Tensor& x) {
  return unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary(x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor sqrt(const Tensor& x) {
  return unary(x, [](double v) { return std::sqrt(v); },
               [](double, double y) { return y > 0 ? 0.5 / y : 0.0; });
}

Tensor abs(const Tensor& x) {
  return unary(x, [](double v) { return std::abs(v); },
               [](double v, double) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}

Tensor square(const Tensor& x) {
  return unary(x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor clamp_min(const Tensor& x, double lo) {
  return unary(x, [lo](double v) { return v < lo ? lo : v; },
               [lo](double v, double) { return v < lo ? 0.0 : 1.0; });
}

Tensor max_pool2d(const Tensor& x, int kernel, int stride) {
  require_rank(x, 4, "max_pool2d");
  if (kernel < 1 || stride < 1) throw ValidationError("max_pool2d: invalid kernel or stride");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H < static_cast<std::size_t>(kernel) || W < static_cast<std::size_t>(kernel))
    throw ValidationError("max_pool2d: kernel larger than input " + shape_str(x.shape()));
  const std::size_t Ho = (H - kernel) / stride + 1, Wo = (W - kernel) / stride + 1;
  Buffer out(N * C * Ho * Wo);
  std::vector<std::size_t> arg(out.size());
  const auto xv = x.data();
  for (std::size_t nc = 0; nc < N * C; ++nc)
    for (std::size_t oy = 0; oy < Ho; ++oy)
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        std::size_t best = nc * H * W + oy * stride * W + ox * stride;
        for (int ky = 0; ky < kernel; ++ky)
          for (int kx = 0; kx < kernel; ++kx) {
            const std::size_t j = nc * H * W + (oy * stride + ky) * W + ox * stride + kx;
            if (xv[j] > xv[best]) best = j;
          }
        const std::size_t o = (nc * Ho + oy) * Wo + ox;
        out[o] = xv[best];
        arg[o] = best;
      }
  return make_result({N, C, Ho, Wo}, std::move(out), {x}, [arg = std::move(arg)](Node& self) {
    Node& p = *self.parents[0];
    for (std::size_t o = 0; o < arg.size(); ++o) p.grad[arg[o]] += self.grad[o];
  });
}

Tensor avg_pool2d(const Tensor& x, int kernel) {
  require_rank(x, 4, "avg_pool2d");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto k = static_cast<std::size_t>(kernel);
  if (kernel < 1 || H % k || W % k)
    throw ValidationError("avg_pool2d: kernel must divide input " + shape_str(x.shape()));
  const std::size_t Ho = H / k, Wo = W / k;
  const double inv = 1.0 / static_cast<double>(k * k);
  Buffer out(N * C * Ho * Wo, 0.0);
  const auto xv = x.data();
  for (std::size_t nc = 0; nc < N * C; ++nc)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t xx = 0; xx < W; ++xx)
        out[(nc * Ho + y / k) * Wo + xx / k] += inv * xv[(nc * H + y) * W + xx];
  return make_result({N, C, Ho, Wo}, std::move(out), {x}, [=](Node& self) {
    Node& p = *self.parents[0];
    for (std::size_t nc = 0; nc < N * C; ++nc)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t xx = 0; xx < W; ++xx)
          p.grad[(nc * H + y) * W + xx] += inv * self.grad[(nc * Ho + y / k) * Wo + xx / k];
  });
}

Tensor bilinear_upsample(const Tensor& x, int factor) {
  require_rank(x, 4, "bilinear_upsample");
  if (factor < 1) throw ValidationError("bilinear_upsample: factor must be >= 1");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Ho = H * factor, Wo = W * factor;
  const AxisTable ty = linear_axis(H, Ho, factor);
  const AxisTable tx = linear_axis(W, Wo, factor);
  Buffer out(N * C * Ho * Wo);
  const auto xv = x.data();
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const double* src = xv.data() + nc * H * W;
    for (std::size_t oy = 0; oy < Ho; ++oy)
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        const double a = src[ty.i0[oy] * W + tx.i0[ox]], b = src[ty.i0[oy] * W + tx.i1[ox]];
        const double c = src[ty.i1[oy] * W + tx.i0[ox]], d = src[ty.i1[oy] * W + tx.i1[ox]];
        const double u = tx.t[ox], v = ty.t[oy];
        out[(nc * Ho + oy) * Wo + ox] = (1 - v) * ((1 - u) * a + u * b) + v * ((1 - u) * c + u * d);
      }
  }
  return make_result({N, C, Ho, Wo}, std::move(out), {x}, [=](Node& self) {
    Node& p = *self.parents[0];
    for (std::size_t nc = 0; nc < N * C; ++nc) {
      double* dst = p.grad.data() + nc * H * W;
      for (std::size_t oy = 0; oy < Ho; ++oy)
        for (std::size_t ox = 0; ox < Wo; ++ox) {
          const double g = self.grad[(nc * Ho + oy) * Wo + ox];
          const double u = tx.t[ox], v = ty.t[oy];
          dst[ty.i0[oy] * W + tx.i0[ox]] += g * (1 - v) * (1 - u);
          dst[ty.i0[oy] * W + tx.i1[ox]] += g * (1 - v) * u;
          dst[ty.i1[oy] * W + tx.i0[ox]] += g * v * (1 - u);
          dst[ty.i1[oy] * W + tx.i1[ox]] += g * v * u;
        }
    }
  });
}

Tensor pixel_shuffle(const Tensor& x, int r) {
  require_rank(x, 4, "pixel_shuffle");
  const auto rr = static_cast<std::size_t>(r);
  if (r < 1 || x.dim(1) % (rr * rr))
    throw ValidationError("pixel_shuffle: channels of " + shape_str(x.shape()) +
                          " not divisible by r^2");
  const std::size_t N = x.dim(0), C = x.dim(1) / (rr * rr), H = x.dim(2), W = x.dim(3);
  const std::size_t Ho = H * rr, Wo = W * rr;
  std::vector<std::size_t> src(N * C * Ho * Wo);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t oy = 0; oy < Ho; ++oy)
        for (std::size_t ox = 0; ox < Wo; ++ox) {
          const std::size_t ic = c * rr * rr + (oy % rr) * rr + ox % rr;
          src[((n * C + c) * Ho + oy) * Wo + ox] = ((n * C * rr * rr + ic) * H + oy / rr) * W + ox / rr;
        }
  Buffer out(src.size());
  const auto xv = x.data();
  for (std::size_t i = 0; i < src.size(); ++i) out[i] = xv[src[i]];
  return make_result({N, C, Ho, Wo}, std::move(out), {x}, [src = std::move(src)](Node& self) {
    Node& p = *self.parents[0];
    for (std::size_t i = 0; i < src.size(); ++i) p.grad[src[i]] += self.grad[i];
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.numel()) shape_error("reshape", x.shape(), shape);
  Buffer v(x.data().begin(), x.data().end());
  return make_result(std::move(shape), std::move(v), {x}, [](Node& self) {
    Node& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
  });
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& dims) {
  const std::size_t r = x.rank();
  std::vector<bool> used(r, false);
  if (dims.size() != r) throw ValidationError("permute: wrong number of dims for " + shape_str(x.shape()));
  for (auto d : dims) {
    if (d >= r || used[d]) throw ValidationError("permute: invalid permutation");
    used[d] = true;
  }
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * x.dim(i);
  Shape out_shape(r);
  std::vector<std::size_t> step(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = x.dim(dims[i]);
    step[i] = in_stride[dims[i]];
  }
  const std::size_t n = x.numel();
  std::vector<std::size_t> src(n);
  std::vector<std::size_t> idx(r, 0);
  std::size_t off = 0;
  for (std::size_t i = 0; i < n; ++i) {
    src[i] = off;
    for (std::size_t d = r; d-- > 0;) {
      if (++idx[d] < out_shape[d]) {
        off += step[d];
        break;
      }
      off -= step[d] * (out_shape[d] - 1);
      idx[d] = 0;
    }
  }
  Buffer out(n);
  const auto xv = x.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = xv[src[i]];
  return make_result(std::move(out_shape), std::move(out), {x}, [src = std::move(src)](Node& self) {
    Node& p = *self.parents[0];
    for (std::size_t i = 0; i < src.size(); ++i) p.grad[src[i]] += self.grad[i];
  });
}

Tensor concat(const std::vector<Tensor>& xs, int axis) {
  if (xs.empty()) throw ValidationError("concat of no tensors");
  const std::size_t ax = norm_axis(axis, xs[0].rank(), "concat");
  Shape out_shape = xs[0].shape();
  out_shape[ax] = 0;
  for (const auto& t : xs) {
    if (t.rank() != out_shape.size()) shape_error("concat", xs[0].shape(), t.shape());
    for (std::size_t i = 0; i < t.rank(); ++i)
      if (i != ax && t.dim(i) != xs[0].dim(i)) shape_error("concat", xs[0].shape(), t.shape());
    out_shape[ax] += t.dim(ax);
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= out_shape[i];
  for (std::size_t i = ax + 1; i < out_shape.size(); ++i) inner *= out_shape[i];
  const std::size_t total = out_shape[ax];
  Buffer out(numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& t : xs) {
    offsets.push_back(off);
    const std::size_t len = t.dim(ax);
    const auto tv = t.data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(tv.data() + o * len * inner, len * inner, out.data() + (o * total + off) * inner);
    off += len;
  }
  std::vector<std::size_t> lens;
  for (const auto& t : xs) lens.push_back(t.dim(ax));
  return make_result(std::move(out_shape), std::move(out), xs,
                     [outer, inner, total, offsets, lens](Node& self) {
                       for (std::size_t k = 0; k < self.parents.size(); ++k) {
                         Node& p = *self.parents[k];
                         if (!p.requires_grad) continue;
                         for (std::size_t o = 0; o < outer; ++o)
                           for (std::size_t j = 0; j < lens[k] * inner; ++j)
                             p.grad[o * lens[k] * inner + j] +=
                                 self.grad[(o * total + offsets[k]) * inner + j];
                       }
                     });
}

Tensor slice(const Tensor& x, int axis, std::size_t start, std::size_t length) {
  const std::size_t ax = norm_axis(axis, x.rank(), "slice");
  if (start + length > x.dim(ax) || length == 0)
    throw ValidationError("slice [" + std::to_string(start) + ", " + std::to_string(start + length) +
                          ") out of range for " + shape_str(x.shape()));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= x.dim(i);
  for (std::size_t i = ax + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t len = x.dim(ax);
  Shape out_shape = x.shape();
  out_shape[ax] = length;
  Buffer out(numel(out_shape));
  const auto xv = x.data();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(xv.data() + (o * len + start) * inner, length * inner, out.data() + o * length * inner);
  return make_result(std::move(out_shape), std::move(out), {x}, [=](Node& self) {
    Node& p = *self.parents[0];
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t j = 0; j < length * inner; ++j)
        p.grad[(o * len + start) * inner + j] += self.grad[o * length * inner + j];
  });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return make_result({}, {s}, {x}, [](Node& self) {
    Node& p = *self.parents[0];
    for (double& g : p.grad) g += self.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ValidationError("mean of an empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor sum_axis(const Tensor& x, int axis) {
  const std::size_t ax = norm_axis(axis, x.rank(), "sum_axis");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= x.dim(i);
  for (std::size_t i = ax + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t len = x.dim(ax);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<long>(ax));
  Buffer out(outer * inner, 0.0);
  const auto xv = x.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < len; ++k)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += xv[(o * len + k) * inner + i];
  return make_result(std::move(out_shape), std::move(out), {x}, [=](Node& self) {
    Node& p = *self.parents[0];
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t k = 0; k < len; ++k)
        for (std::size_t i = 0; i < inner; ++i) p.grad[(o * len + k) * inner + i] += self.grad[o * inner + i];
  });
}

}  // namespace canopy::nn
