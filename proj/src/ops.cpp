#include "svp/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>

namespace svp::ad {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

template <typename T>
void require_rank(const Tensor<T>& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw std::invalid_argument(std::string(op) + ": expected rank " + std::to_string(rank) +
                                " input, got " + shape_str(t.shape()));
  }
}

template <typename T>
void require_tape(Var<T> a, Var<T> b, const char* op) {
  if (a.tape != b.tape) throw std::invalid_argument(std::string(op) + ": variables on different tapes");
}

template <typename T>
void im2col(const T* x, std::size_t n_batch, std::size_t channels, std::size_t height,
            std::size_t width, std::size_t kernel, std::size_t stride, std::size_t pad,
            std::size_t out_h, std::size_t out_w, T* col) {
  const std::size_t plane = out_h * out_w;
  const std::size_t cols = n_batch * plane;
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ky = 0; ky < kernel; ++ky) {
      for (std::size_t kx = 0; kx < kernel; ++kx) {
        T* dst = col + ((c * kernel + ky) * kernel + kx) * cols;
        for (std::size_t n = 0; n < n_batch; ++n) {
          const T* src = x + (n * channels + c) * height * width;
          T* row = dst + n * plane;
          for (std::size_t oy = 0; oy < out_h; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                      static_cast<std::ptrdiff_t>(pad);
            T* out = row + oy * out_w;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(height)) {
              std::fill(out, out + out_w, T(0));
              continue;
            }
            const T* in = src + static_cast<std::size_t>(iy) * width;
            for (std::size_t ox = 0; ox < out_w; ++ox) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                        static_cast<std::ptrdiff_t>(pad);
              out[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(width))
                            ? T(0)
                            : in[static_cast<std::size_t>(ix)];
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, std::size_t n_batch, std::size_t channels, std::size_t height,
            std::size_t width, std::size_t kernel, std::size_t stride, std::size_t pad,
            std::size_t out_h, std::size_t out_w, T* dx) {
  const std::size_t plane = out_h * out_w;
  const std::size_t cols = n_batch * plane;
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ky = 0; ky < kernel; ++ky) {
      for (std::size_t kx = 0; kx < kernel; ++kx) {
        const T* src = col + ((c * kernel + ky) * kernel + kx) * cols;
        for (std::size_t n = 0; n < n_batch; ++n) {
          T* dst = dx + (n * channels + c) * height * width;
          const T* row = src + n * plane;
          for (std::size_t oy = 0; oy < out_h; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                      static_cast<std::ptrdiff_t>(pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(height)) continue;
            T* out = dst + static_cast<std::size_t>(iy) * width;
            for (std::size_t ox = 0; ox < out_w; ++ox) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                        static_cast<std::ptrdiff_t>(pad);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(width)) continue;
              out[static_cast<std::size_t>(ix)] += row[oy * out_w + ox];
            }
          }
        }
      }
    }
  }
}

template <typename T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

// Softmax of each column of a (rows x cols) row-major block, in place.
template <typename T>
void softmax_columns(RowMat<T>& m) {
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    const T mx = m.col(j).maxCoeff();
    double sum = 0.0;
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      m(i, j) = std::exp(m(i, j) - mx);
      sum += m(i, j);
    }
    const T inv = static_cast<T>(1.0 / sum);
    m.col(j) *= inv;
  }
}

template <typename T>
void softmax_rows(RowMat<T>& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const T mx = m.row(i).maxCoeff();
    double sum = 0.0;
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      m(i, j) = std::exp(m(i, j) - mx);
      sum += m(i, j);
    }
    const T inv = static_cast<T>(1.0 / sum);
    m.row(i) *= inv;
  }
}

// Gradient through a row softmax: ds = p * (dp - sum(dp * p)).
template <typename T>
RowMat<T> softmax_rows_backward(const RowMat<T>& p, const RowMat<T>& dp) {
  RowMat<T> ds(p.rows(), p.cols());
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    const T dot = p.row(i).dot(dp.row(i));
    ds.row(i) = p.row(i).cwiseProduct((dp.row(i).array() - dot).matrix());
  }
  return ds;
}

template <typename T>
RowMat<T> softmax_columns_backward(const RowMat<T>& p, const RowMat<T>& dp) {
  RowMat<T> ds(p.rows(), p.cols());
  for (Eigen::Index j = 0; j < p.cols(); ++j) {
    const T dot = p.col(j).dot(dp.col(j));
    ds.col(j) = p.col(j).cwiseProduct((dp.col(j).array() - dot).matrix());
  }
  return ds;
}

template <typename T>
void check_qkv(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads,
               const char* op) {
  require_rank(q, 4, op);
  if (q.shape() != k.shape() || q.shape() != v.shape()) {
    throw std::invalid_argument(std::string(op) + ": q/k/v shape mismatch");
  }
  if (heads == 0 || q.dim(1) % heads != 0) {
    throw std::invalid_argument(std::string(op) + ": channels " + std::to_string(q.dim(1)) +
                                " not divisible by heads " + std::to_string(heads));
  }
}

}  // namespace

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  require_tape(a, b, "add");
  const auto& av = a.value();
  const auto& bv = b.value();
  require_same_shape(av, bv, "add");
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record("add", std::move(out), {ia, ib}, [ia, ib](Tape<T>& tape, std::size_t self) {
    const auto& g = tape.grad(self);
    for (std::size_t src : {ia, ib}) {
      if (!tape.needs_grad(src)) continue;
      auto& d = tape.grad(src);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
  });
}

template <typename T>
Var<T> silu(Var<T> x) {
  const auto& xv = x.value();
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * sigmoid(xv[i]);
  const std::size_t ix = x.id;
  return x.tape->record("silu", std::move(out), {ix}, [ix](Tape<T>& tape, std::size_t self) {
    const auto& g = tape.grad(self);
    const auto& xv = tape.value(ix);
    auto& d = tape.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T s = sigmoid(xv[i]);
      d[i] += g[i] * s * (T(1) + xv[i] * (T(1) - s));
    }
  });
}

template <typename T>
Var<T> relu(Var<T> x) {
  const auto& xv = x.value();
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > T(0) ? xv[i] : T(0);
  const std::size_t ix = x.id;
  return x.tape->record("relu", std::move(out), {ix}, [ix](Tape<T>& tape, std::size_t self) {
    const auto& g = tape.grad(self);
    const auto& xv = tape.value(ix);
    auto& d = tape.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (xv[i] > T(0)) d[i] += g[i];
    }
  });
}

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, std::optional<Var<T>> bias, std::size_t stride,
              std::size_t pad) {
  require_tape(x, w, "conv2d");
  const auto& xv = x.value();
  const auto& wv = w.value();
  require_rank(xv, 4, "conv2d");
  require_rank(wv, 4, "conv2d kernel");
  const std::size_t n = xv.dim(0), cin = xv.dim(1), h = xv.dim(2), wd = xv.dim(3);
  const std::size_t cout = wv.dim(0), kernel = wv.dim(2);
  if (wv.dim(1) != cin || wv.dim(3) != kernel) {
    throw std::invalid_argument("conv2d: kernel " + shape_str(wv.shape()) +
                                " incompatible with input " + shape_str(xv.shape()));
  }
  if (stride == 0 || h + 2 * pad < kernel || wd + 2 * pad < kernel) {
    throw std::invalid_argument("conv2d: invalid stride/padding for input " + shape_str(xv.shape()));
  }
  if (bias && (bias->value().rank() != 1 || bias->value().dim(0) != cout)) {
    throw std::invalid_argument("conv2d: bias shape " + shape_str(bias->value().shape()));
  }
  const std::size_t oh = (h + 2 * pad - kernel) / stride + 1;
  const std::size_t ow = (wd + 2 * pad - kernel) / stride + 1;
  const std::size_t fan_in = cin * kernel * kernel;
  const std::size_t plane = oh * ow;
  const std::size_t cols = n * plane;

  RowMat<T> col(fan_in, cols);
  im2col(xv.data(), n, cin, h, wd, kernel, stride, pad, oh, ow, col.data());
  CMapMat<T> wm(wv.data(), cout, fan_in);
  RowMat<T> y = wm * col;

  Tensor<T> out({n, cout, oh, ow});
  const T* bptr = bias ? bias->value().data() : nullptr;
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t co = 0; co < cout; ++co) {
      const T* src = y.data() + co * cols + b * plane;
      T* dst = out.data() + (b * cout + co) * plane;
      const T bv = bptr ? bptr[co] : T(0);
      for (std::size_t p = 0; p < plane; ++p) dst[p] = src[p] + bv;
    }
  }

  const std::size_t ix = x.id, iw = w.id;
  std::vector<std::size_t> inputs{ix, iw};
  const bool has_bias = bias.has_value();
  const std::size_t ib = has_bias ? bias->id : 0;
  if (has_bias) inputs.push_back(ib);
  return x.tape->record(
      "conv2d", std::move(out), std::move(inputs),
      [=](Tape<T>& tape, std::size_t self) {
        const auto& g = tape.grad(self);
        RowMat<T> dy(cout, cols);
        for (std::size_t b = 0; b < n; ++b) {
          for (std::size_t co = 0; co < cout; ++co) {
            const T* src = g.data() + (b * cout + co) * plane;
            std::copy(src, src + plane, dy.data() + co * cols + b * plane);
          }
        }
        if (has_bias && tape.needs_grad(ib)) {
          auto& db = tape.grad(ib);
          for (std::size_t co = 0; co < cout; ++co) db[co] += dy.row(co).sum();
        }
        if (tape.needs_grad(iw)) {
          const auto& xv = tape.value(ix);
          RowMat<T> col(fan_in, cols);
          im2col(xv.data(), n, cin, h, wd, kernel, stride, pad, oh, ow, col.data());
          auto& dw = tape.grad(iw);
          MapMat<T> dwm(dw.data(), cout, fan_in);
          dwm.noalias() += dy * col.transpose();
        }
        if (tape.needs_grad(ix)) {
          const auto& wv = tape.value(iw);
          CMapMat<T> wm(wv.data(), cout, fan_in);
          RowMat<T> dcol = wm.transpose() * dy;
          col2im(dcol.data(), n, cin, h, wd, kernel, stride, pad, oh, ow, tape.grad(ix).data());
        }
      });
}

template <typename T>
Var<T> weight_standardize(Var<T> w, double eps) {
  const auto& wv = w.value();
  if (wv.rank() < 2) throw std::invalid_argument("weight_standardize: kernel rank < 2");
  const std::size_t cout = wv.dim(0);
  const std::size_t fan_in = wv.size() / cout;
  if (fan_in < 2) throw std::invalid_argument("weight_standardize: fan-in must exceed 1");
  Tensor<T> out(wv.shape());
  auto rstd = std::make_shared<std::vector<double>>(cout);
  for (std::size_t o = 0; o < cout; ++o) {
    const T* src = wv.data() + o * fan_in;
    double mean = 0.0;
    for (std::size_t i = 0; i < fan_in; ++i) mean += src[i];
    mean /= static_cast<double>(fan_in);
    double var = 0.0;
    for (std::size_t i = 0; i < fan_in; ++i) var += (src[i] - mean) * (src[i] - mean);
    var /= static_cast<double>(fan_in);
    const double r = 1.0 / std::sqrt(var + eps);
    (*rstd)[o] = r;
    T* dst = out.data() + o * fan_in;
    for (std::size_t i = 0; i < fan_in; ++i) dst[i] = static_cast<T>((src[i] - mean) * r);
  }
  const std::size_t iw = w.id;
  return w.tape->record("weight_standardize", std::move(out), {iw},
                        [iw, cout, fan_in, rstd](Tape<T>& tape, std::size_t self) {
                          const auto& g = tape.grad(self);
                          const auto& what = tape.value(self);
                          auto& d = tape.grad(iw);
                          const double m = static_cast<double>(fan_in);
                          for (std::size_t o = 0; o < cout; ++o) {
                            const std::size_t off = o * fan_in;
                            double sum_g = 0.0, sum_gx = 0.0;
                            for (std::size_t i = 0; i < fan_in; ++i) {
                              sum_g += g[off + i];
                              sum_gx += g[off + i] * what[off + i];
                            }
                            const double r = (*rstd)[o];
                            for (std::size_t i = 0; i < fan_in; ++i) {
                              d[off + i] += static_cast<T>(
                                  r * (g[off + i] - sum_g / m - what[off + i] * sum_gx / m));
                            }
                          }
                        });
}

template <typename T>
Var<T> group_norm(Var<T> x, Var<T> gamma, Var<T> beta, std::size_t groups, double eps) {
  const auto& xv = x.value();
  require_rank(xv, 4, "group_norm");
  const std::size_t n = xv.dim(0), c = xv.dim(1), plane = xv.dim(2) * xv.dim(3);
  if (groups == 0 || c % groups != 0) {
    throw std::invalid_argument("group_norm: channels " + std::to_string(c) +
                                " not divisible by groups " + std::to_string(groups));
  }
  if (gamma.value().size() != c || beta.value().size() != c) {
    throw std::invalid_argument("group_norm: affine parameters must have " + std::to_string(c) +
                                " entries");
  }
  const std::size_t per_group = c / groups;
  const std::size_t count = per_group * plane;
  auto mean = std::make_shared<std::vector<double>>(n * groups);
  auto rstd = std::make_shared<std::vector<double>>(n * groups);
  Tensor<T> out(xv.shape());
  const T* gm = gamma.value().data();
  const T* bt = beta.value().data();
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t g = 0; g < groups; ++g) {
      const T* src = xv.data() + (b * c + g * per_group) * plane;
      double mu = 0.0;
      for (std::size_t i = 0; i < count; ++i) mu += src[i];
      mu /= static_cast<double>(count);
      double var = 0.0;
      for (std::size_t i = 0; i < count; ++i) var += (src[i] - mu) * (src[i] - mu);
      var /= static_cast<double>(count);
      const double r = 1.0 / std::sqrt(var + eps);
      (*mean)[b * groups + g] = mu;
      (*rstd)[b * groups + g] = r;
      for (std::size_t ch = 0; ch < per_group; ++ch) {
        const std::size_t cc = g * per_group + ch;
        const T* s = src + ch * plane;
        T* dst = out.data() + (b * c + cc) * plane;
        for (std::size_t p = 0; p < plane; ++p) {
          dst[p] = static_cast<T>((s[p] - mu) * r * gm[cc] + bt[cc]);
        }
      }
    }
  }
  const std::size_t ix = x.id, ig = gamma.id, ib = beta.id;
  return x.tape->record(
      "group_norm", std::move(out), {ix, ig, ib},
      [=](Tape<T>& tape, std::size_t self) {
        const auto& gout = tape.grad(self);
        const auto& xv = tape.value(ix);
        const T* gm = tape.value(ig).data();
        const bool want_x = tape.needs_grad(ix);
        T* dgamma = tape.needs_grad(ig) ? tape.grad(ig).data() : nullptr;
        T* dbeta = tape.needs_grad(ib) ? tape.grad(ib).data() : nullptr;
        T* dx = want_x ? tape.grad(ix).data() : nullptr;
        const double m = static_cast<double>(count);
        for (std::size_t b = 0; b < n; ++b) {
          for (std::size_t g = 0; g < groups; ++g) {
            const double mu = (*mean)[b * groups + g];
            const double r = (*rstd)[b * groups + g];
            double sum_d = 0.0, sum_dx = 0.0;
            for (std::size_t ch = 0; ch < per_group; ++ch) {
              const std::size_t cc = g * per_group + ch;
              const std::size_t off = (b * c + cc) * plane;
              double sg = 0.0, sgx = 0.0;
              for (std::size_t p = 0; p < plane; ++p) {
                const double xhat = (xv[off + p] - mu) * r;
                sg += gout[off + p];
                sgx += gout[off + p] * xhat;
              }
              if (dgamma) dgamma[cc] += static_cast<T>(sgx);
              if (dbeta) dbeta[cc] += static_cast<T>(sg);
              sum_d += sg * gm[cc];
              sum_dx += sgx * gm[cc];
            }
            if (!dx) continue;
            for (std::size_t ch = 0; ch < per_group; ++ch) {
              const std::size_t cc = g * per_group + ch;
              const std::size_t off = (b * c + cc) * plane;
              for (std::size_t p = 0; p < plane; ++p) {
                const double xhat = (xv[off + p] - mu) * r;
                const double dxhat = gout[off + p] * gm[cc];
                dx[off + p] += static_cast<T>(r * (dxhat - sum_d / m - xhat * sum_dx / m));
              }
            }
          }
        }
      });
}

template <typename T>
Var<T> batch_norm(Var<T> x, Var<T> gamma, Var<T> beta, BatchNormStats<T>& stats, bool training,
                  double momentum, double eps) {
  const auto& xv = x.value();
  if (xv.rank() != 4 && xv.rank() != 2) throw std::invalid_argument("batch_norm: rank must be 2 or 4");
  const std::size_t n = xv.dim(0), c = xv.dim(1);
  const std::size_t plane = xv.rank() == 4 ? xv.dim(2) * xv.dim(3) : 1;
  if (gamma.value().size() != c || beta.value().size() != c ||
      stats.running_mean.size() != c || stats.running_var.size() != c) {
    throw std::invalid_argument("batch_norm: parameter size mismatch for " + std::to_string(c) +
                                " channels");
  }
  const std::size_t count = n * plane;
  auto mean = std::make_shared<std::vector<double>>(c);
  auto rstd = std::make_shared<std::vector<double>>(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double mu, var;
    if (training) {
      mu = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const T* s = xv.data() + (b * c + ch) * plane;
        for (std::size_t p = 0; p < plane; ++p) mu += s[p];
      }
      mu /= static_cast<double>(count);
      var = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const T* s = xv.data() + (b * c + ch) * plane;
        for (std::size_t p = 0; p < plane; ++p) var += (s[p] - mu) * (s[p] - mu);
      }
      var /= static_cast<double>(count);
      const double unbiased = count > 1 ? var * count / (count - 1) : var;
      stats.running_mean[ch] =
          static_cast<T>((1.0 - momentum) * stats.running_mean[ch] + momentum * mu);
      stats.running_var[ch] =
          static_cast<T>((1.0 - momentum) * stats.running_var[ch] + momentum * unbiased);
    } else {
      mu = stats.running_mean[ch];
      var = stats.running_var[ch];
    }
    (*mean)[ch] = mu;
    (*rstd)[ch] = 1.0 / std::sqrt(var + eps);
  }
  Tensor<T> out(xv.shape());
  const T* gm = gamma.value().data();
  const T* bt = beta.value().data();
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (b * c + ch) * plane;
      for (std::size_t p = 0; p < plane; ++p) {
        out[off + p] =
            static_cast<T>((xv[off + p] - (*mean)[ch]) * (*rstd)[ch] * gm[ch] + bt[ch]);
      }
    }
  }
  const std::size_t ix = x.id, ig = gamma.id, ib = beta.id;
  return x.tape->record(
      "batch_norm", std::move(out), {ix, ig, ib},
      [=](Tape<T>& tape, std::size_t self) {
        const auto& gout = tape.grad(self);
        const auto& xv = tape.value(ix);
        const T* gm = tape.value(ig).data();
        T* dgamma = tape.needs_grad(ig) ? tape.grad(ig).data() : nullptr;
        T* dbeta = tape.needs_grad(ib) ? tape.grad(ib).data() : nullptr;
        T* dx = tape.needs_grad(ix) ? tape.grad(ix).data() : nullptr;
        const double m = static_cast<double>(count);
        for (std::size_t ch = 0; ch < c; ++ch) {
          const double mu = (*mean)[ch], r = (*rstd)[ch];
          double sg = 0.0, sgx = 0.0;
          for (std::size_t b = 0; b < n; ++b) {
            const std::size_t off = (b * c + ch) * plane;
            for (std::size_t p = 0; p < plane; ++p) {
              sg += gout[off + p];
              sgx += gout[off + p] * (xv[off + p] - mu) * r;
            }
          }
          if (dgamma) dgamma[ch] += static_cast<T>(sgx);
          if (dbeta) dbeta[ch] += static_cast<T>(sg);
          if (!dx) continue;
          for (std::size_t b = 0; b < n; ++b) {
            const std::size_t off = (b * c + ch) * plane;
            for (std::size_t p = 0; p < plane; ++p) {
              if (training) {
                const double xhat = (xv[off + p] - mu) * r;
                dx[off + p] += static_cast<T>(gm[ch] * r *
                                              (gout[off + p] - sg / m - xhat * sgx / m));
              } else {
                dx[off + p] += static_cast<T>(gout[off + p] * gm[ch] * r);
              }
            }
          }
        }
      });
}

template <typename T>
Var<T> linear(Var<T> x, Var<T> w, std::optional<Var<T>> b) {
  require_tape(x, w, "linear");
  const auto& xv = x.value();
  const auto& wv = w.value();
  require_rank(xv, 2, "linear");
  require_rank(wv, 2, "linear weight");
  const std::size_t n = xv.dim(0), f = xv.dim(1), o = wv.dim(0);
  if (wv.dim(1) != f) {
    throw std::invalid_argument("linear: weight " + shape_str(wv.shape()) + " vs input " +
                                shape_str(xv.shape()));
  }
  if (b && b->value().size() != o) throw std::invalid_argument("linear: bias size mismatch");
  Tensor<T> out({n, o});
  MapMat<T> y(out.data(), n, o);
  y.noalias() = CMapMat<T>(xv.data(), n, f) * CMapMat<T>(wv.data(), o, f).transpose();
  if (b) {
    const T* bp = b->value().data();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < o; ++j) y(i, j) += bp[j];
  }
  const std::size_t ix = x.id, iw = w.id;
  const bool has_bias = b.has_value();
  const std::size_t ib = has_bias ? b->id : 0;
  std::vector<std::size_t> inputs{ix, iw};
  if (has_bias) inputs.push_back(ib);
  return x.tape->record("linear", std::move(out), std::move(inputs),
                        [=](Tape<T>& tape, std::size_t self) {
                          const auto& g = tape.grad(self);
                          CMapMat<T> gy(g.data(), n, o);
                          if (tape.needs_grad(ix)) {
                            MapMat<T> dx(tape.grad(ix).data(), n, f);
                            dx.noalias() += gy * CMapMat<T>(tape.value(iw).data(), o, f);
                          }
                          if (tape.needs_grad(iw)) {
                            MapMat<T> dw(tape.grad(iw).data(), o, f);
                            dw.noalias() += gy.transpose() * CMapMat<T>(tape.value(ix).data(), n, f);
                          }
                          if (has_bias && tape.needs_grad(ib)) {
                            auto& db = tape.grad(ib);
                            for (std::size_t j = 0; j < o; ++j) db[j] += gy.col(j).sum();
                          }
                        });
}

template <typename T>
Var<T> scale_shift(Var<T> x, Var<T> emb) {
  require_tape(x, emb, "scale_shift");
  const auto& xv = x.value();
  const auto& ev = emb.value();
  require_rank(xv, 4, "scale_shift");
  const std::size_t n = xv.dim(0), c = xv.dim(1), plane = xv.dim(2) * xv.dim(3);
  if (ev.rank() != 2 || ev.dim(0) != n || ev.dim(1) != 2 * c) {
    throw std::invalid_argument("scale_shift: embedding " + shape_str(ev.shape()) +
                                " does not match features " + shape_str(xv.shape()));
  }
  Tensor<T> out(xv.shape());
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T s = T(1) + ev[b * 2 * c + ch];
      const T sh = ev[b * 2 * c + c + ch];
      const std::size_t off = (b * c + ch) * plane;
      for (std::size_t p = 0; p < plane; ++p) out[off + p] = xv[off + p] * s + sh;
    }
  }
  const std::size_t ix = x.id, ie = emb.id;
  return x.tape->record("scale_shift", std::move(out), {ix, ie},
                        [=](Tape<T>& tape, std::size_t self) {
                          const auto& g = tape.grad(self);
                          const auto& xv = tape.value(ix);
                          const auto& ev = tape.value(ie);
                          T* dx = tape.needs_grad(ix) ? tape.grad(ix).data() : nullptr;
                          T* de = tape.needs_grad(ie) ? tape.grad(ie).data() : nullptr;
                          for (std::size_t b = 0; b < n; ++b) {
                            for (std::size_t ch = 0; ch < c; ++ch) {
                              const T s = T(1) + ev[b * 2 * c + ch];
                              const std::size_t off = (b * c + ch) * plane;
                              double gs = 0.0, gb = 0.0;
                              for (std::size_t p = 0; p < plane; ++p) {
                                if (dx) dx[off + p] += g[off + p] * s;
                                gs += g[off + p] * xv[off + p];
                                gb += g[off + p];
                              }
                              if (de) {
                                de[b * 2 * c + ch] += static_cast<T>(gs);
                                de[b * 2 * c + c + ch] += static_cast<T>(gb);
                              }
                            }
                          }
                        });
}

template <typename T>
Var<T> concat_channels(Var<T> a, Var<T> b) {
  require_tape(a, b, "concat_channels");
  const auto& av = a.value();
  const auto& bv = b.value();
  require_rank(av, 4, "concat_channels");
  require_rank(bv, 4, "concat_channels");
  if (av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(2) || av.dim(3) != bv.dim(3)) {
    throw std::invalid_argument("concat_channels: " + shape_str(av.shape()) + " vs " +
                                shape_str(bv.shape()));
  }
  const std::size_t n = av.dim(0), ca = av.dim(1), cb = bv.dim(1), plane = av.dim(2) * av.dim(3);
  Tensor<T> out({n, ca + cb, av.dim(2), av.dim(3)});
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(av.data() + i * ca * plane, ca * plane, out.data() + i * (ca + cb) * plane);
    std::copy_n(bv.data() + i * cb * plane, cb * plane,
                out.data() + (i * (ca + cb) + ca) * plane);
  }
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record("concat_channels", std::move(out), {ia, ib},
                        [=](Tape<T>& tape, std::size_t self) {
                          const auto& g = tape.grad(self);
                          for (std::size_t i = 0; i < n; ++i) {
                            if (tape.needs_grad(ia)) {
                              T* d = tape.grad(ia).data() + i * ca * plane;
                              const T* s = g.data() + i * (ca + cb) * plane;
                              for (std::size_t k = 0; k < ca * plane; ++k) d[k] += s[k];
                            }
                            if (tape.needs_grad(ib)) {
                              T* d = tape.grad(ib).data() + i * cb * plane;
                              const T* s = g.data() + (i * (ca + cb) + ca) * plane;
                              for (std::size_t k = 0; k < cb * plane; ++k) d[k] += s[k];
                            }
                          }
                        });
}

template <typename T>
Var<T> upsample_nearest2x(Var<T> x) {
  const auto& xv = x.value();
  require_rank(xv, 4, "upsample_nearest2x");
  const std::size_t n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  Tensor<T> out({n, c, 2 * h, 2 * w});
  for (std::size_t p = 0; p < n * c; ++p) {
    const T* s = xv.data() + p * h * w;
    T* d = out.data() + p * 4 * h * w;
    for (std::size_t y = 0; y < 2 * h; ++y)
      for (std::size_t xx = 0; xx < 2 * w; ++xx) d[y * 2 * w + xx] = s[(y / 2) * w + xx / 2];
  }
  const std::size_t ix = x.id;
  return x.tape->record("upsample_nearest2x", std::move(out), {ix},
                        [=](Tape<T>& tape, std::size_t self) {
                          const auto& g = tape.grad(self);
                          auto& dx = tape.grad(ix);
                          for (std::size_t p = 0; p < n * c; ++p) {
                            const T* s = g.data() + p * 4 * h * w;
                            T* d = dx.data() + p * h * w;
                            for (std::size_t y = 0; y < 2 * h; ++y)
                              for (std::size_t xx = 0; xx < 2 * w; ++xx)
                                d[(y / 2) * w + xx / 2] += s[y * 2 * w + xx];
                          }
                        });
}

template <typename T>
Var<T> max_pool2d(Var<T> x, std::size_t kernel, std::size_t stride, std::size_t pad) {
  const auto& xv = x.value();
  require_rank(xv, 4, "max_pool2d");
  const std::size_t n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  if (kernel == 0 || stride == 0 || pad >= kernel || h + 2 * pad < kernel || w + 2 * pad < kernel) {
    throw std::invalid_argument("max_pool2d: invalid geometry for " + shape_str(xv.shape()));
  }
  const std::size_t oh = (h + 2 * pad - kernel) / stride + 1;
  const std::size_t ow = (w + 2 * pad - kernel) / stride + 1;
  Tensor<T> out({n, c, oh, ow});
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  for (std::size_t p = 0; p < n * c; ++p) {
    const T* s = xv.data() + p * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        T best = -std::numeric_limits<T>::infinity();
        std::size_t best_i = 0;
        for (std::size_t ky = 0; ky < kernel; ++ky) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                    static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t kx = 0; kx < kernel; ++kx) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                      static_cast<std::ptrdiff_t>(pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
            const std::size_t idx = static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix);
            if (s[idx] > best) {
              best = s[idx];
              best_i = idx;
            }
          }
        }
        const std::size_t o = p * oh * ow + oy * ow + ox;
        out[o] = best;
        (*argmax)[o] = p * h * w + best_i;
      }
    }
  }
  const std::size_t ix = x.id;
  return x.tape->record("max_pool2d", std::move(out), {ix},
                        [ix, argmax](Tape<T>& tape, std::size_t self) {
                          const auto& g = tape.grad(self);
                          auto& dx = tape.grad(ix);
                          for (std::size_t o = 0; o < g.size(); ++o) dx[(*argmax)[o]] += g[o];
                        });
}

template <typename T>
Var<T> global_avg_pool(Var<T> x) {
  const auto& xv = x.value();
  require_rank(xv, 4, "global_avg_pool");
  const std::size_t n = xv.dim(0), c = xv.dim(1), plane = xv.dim(2) * xv.dim(3);
  Tensor<T> out({n, c});
  for (std::size_t p = 0; p < n * c; ++p) {
    double s = 0.0;
    for (std::size_t i = 0; i < plane; ++i) s += xv[p * plane + i];
    out[p] = static_cast<T>(s / static_cast<double>(plane));
  }
  const std::size_t ix = x.id;
  return x.tape->record("global_avg_pool", std::move(out), {ix},
                        [=](Tape<T>& tape, std::size_t self) {
                          const auto& g = tape.grad(self);
                          auto& dx = tape.grad(ix);
                          const T inv = T(1) / static_cast<T>(plane);
                          for (std::size_t p = 0; p < n * c; ++p)
                            for (std::size_t i = 0; i < plane; ++i) dx[p * plane + i] += g[p] * inv;
                        });
}

template <typename T>
Var<T> self_attention(Var<T> q, Var<T> k, Var<T> v, std::size_t heads) {
  require_tape(q, k, "self_attention");
  require_tape(q, v, "self_attention");
  const auto& qv = q.value();
  const auto& kv = k.value();
  const auto& vv = v.value();
  check_qkv(qv, kv, vv, heads, "self_attention");
  const std::size_t n = qv.dim(0), c = qv.dim(1), positions = qv.dim(2) * qv.dim(3);
  const std::size_t dh = c / heads;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  const auto P = static_cast<Eigen::Index>(positions);
  const auto D = static_cast<Eigen::Index>(dh);

  auto attn = std::make_shared<std::vector<RowMat<T>>>();
  attn->reserve(n * heads);
  Tensor<T> out(qv.shape());
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t hd = 0; hd < heads; ++hd) {
      const std::size_t off = (b * c + hd * dh) * positions;
      CMapMat<T> qm(qv.data() + off, D, P), km(kv.data() + off, D, P), vm(vv.data() + off, D, P);
      RowMat<T> a = (qm.transpose() * km) * scale;
      softmax_rows(a);
      MapMat<T>(out.data() + off, D, P).noalias() = vm * a.transpose();
      attn->push_back(std::move(a));
    }
  }
  const std::size_t iq = q.id, ik = k.id, iv = v.id;
  return q.tape->record(
      "self_attention", std::move(out), {iq, ik, iv},
      [=](Tape<T>& tape, std::size_t self) {
        const auto& g = tape.grad(self);
        const auto& qv = tape.value(iq);
        const auto& kv = tape.value(ik);
        const auto& vv = tape.value(iv);
        for (std::size_t b = 0; b < n; ++b) {
          for (std::size_t hd = 0; hd < heads; ++hd) {
            const std::size_t off = (b * c + hd * dh) * positions;
            const RowMat<T>& a = (*attn)[b * heads + hd];
            CMapMat<T> dout(g.data() + off, D, P);
            CMapMat<T> qm(qv.data() + off, D, P), km(kv.data() + off, D, P),
                vm(vv.data() + off, D, P);
            if (tape.needs_grad(iv)) {
              MapMat<T>(tape.grad(iv).data() + off, D, P).noalias() += dout * a;
            }
            if (!tape.needs_grad(iq) && !tape.needs_grad(ik)) continue;
            RowMat<T> da = dout.transpose() * vm;
            RowMat<T> ds = softmax_rows_backward(a, da);
            if (tape.needs_grad(iq)) {
              MapMat<T>(tape.grad(iq).data() + off, D, P).noalias() +=
                  (km * ds.transpose()) * scale;
            }
            if (tape.needs_grad(ik)) {
              MapMat<T>(tape.grad(ik).data() + off, D, P).noalias() += (qm * ds) * scale;
            }
          }
        }
      });
}

template <typename T>
Var<T> linear_attention(Var<T> q, Var<T> k, Var<T> v, std::size_t heads,
                        std::uint64_t* multiply_count) {
  require_tape(q, k, "linear_attention");
  require_tape(q, v, "linear_attention");
  const auto& qv = q.value();
  const auto& kv = k.value();
  const auto& vv = v.value();
  check_qkv(qv, kv, vv, heads, "linear_attention");
  const std::size_t n = qv.dim(0), c = qv.dim(1), positions = qv.dim(2) * qv.dim(3);
  const std::size_t dh = c / heads;
  const auto P = static_cast<Eigen::Index>(positions);
  const auto D = static_cast<Eigen::Index>(dh);

  struct Saved {
    RowMat<T> qs, ks, context;
  };
  auto saved = std::make_shared<std::vector<Saved>>();
  saved->reserve(n * heads);
  Tensor<T> out(qv.shape());
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t hd = 0; hd < heads; ++hd) {
      const std::size_t off = (b * c + hd * dh) * positions;
      Saved s;
      s.qs = CMapMat<T>(qv.data() + off, D, P);
      s.ks = CMapMat<T>(kv.data() + off, D, P);
      softmax_columns(s.qs);
      softmax_rows(s.ks);
      CMapMat<T> vm(vv.data() + off, D, P);
      // The normalizer qs^T (ks 1) is identically one: ks rows and qs columns
      // both sum to one.
      s.context = s.ks * vm.transpose();
      MapMat<T>(out.data() + off, D, P).noalias() = s.context.transpose() * s.qs;
      if (multiply_count) *multiply_count += 2 * dh * dh * positions;
      saved->push_back(std::move(s));
    }
  }
  const std::size_t iq = q.id, ik = k.id, iv = v.id;
  return q.tape->record(
      "linear_attention", std::move(out), {iq, ik, iv},
      [=](Tape<T>& tape, std::size_t self) {
        const auto& g = tape.grad(self);
        const auto& vv = tape.value(iv);
        for (std::size_t b = 0; b < n; ++b) {
          for (std::size_t hd = 0; hd < heads; ++hd) {
            const std::size_t off = (b * c + hd * dh) * positions;
            const Saved& s = (*saved)[b * heads + hd];
            CMapMat<T> dout(g.data() + off, D, P);
            CMapMat<T> vm(vv.data() + off, D, P);
            RowMat<T> dcontext = s.qs * dout.transpose();
            if (tape.needs_grad(iq)) {
              RowMat<T> dqs = s.context * dout;
              MapMat<T>(tape.grad(iq).data() + off, D, P) += softmax_columns_backward(s.qs, dqs);
            }
            if (tape.needs_grad(ik)) {
              RowMat<T> dks = dcontext * vm;
              MapMat<T>(tape.grad(ik).data() + off, D, P) += softmax_rows_backward(s.ks, dks);
            }
            if (tape.needs_grad(iv)) {
              MapMat<T>(tape.grad(iv).data() + off, D, P).noalias() +=
                  dcontext.transpose() * s.ks;
            }
          }
        }
      });
}

template <typename T>
Var<T> l1_loss(Var<T> pred, Var<T> target, Reduction reduction) {
  require_tape(pred, target, "l1_loss");
  const auto& pv = pred.value();
  const auto& tv = target.value();
  require_same_shape(pv, tv, "l1_loss");
  double total = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) total += std::abs(static_cast<double>(pv[i]) - tv[i]);
  const double denom = reduction == Reduction::kMean ? static_cast<double>(pv.size()) : 1.0;
  Tensor<T> out({1}, static_cast<T>(total / denom));
  const std::size_t ip = pred.id, it = target.id;
  return pred.tape->record("l1_loss", std::move(out), {ip, it},
                           [=](Tape<T>& tape, std::size_t self) {
                             const T g = tape.grad(self)[0] / static_cast<T>(denom);
                             const auto& pv = tape.value(ip);
                             const auto& tv = tape.value(it);
                             for (std::size_t src : {ip, it}) {
                               if (!tape.needs_grad(src)) continue;
                               const T sign_flip = src == ip ? T(1) : T(-1);
                               auto& d = tape.grad(src);
                               for (std::size_t i = 0; i < pv.size(); ++i) {
                                 const T diff = pv[i] - tv[i];
                                 const T sgn = diff > T(0) ? T(1) : (diff < T(0) ? T(-1) : T(0));
                                 d[i] += sign_flip * sgn * g;
                               }
                             }
                           });
}

template <typename T>
Var<T> softmax_cross_entropy(Var<T> logits, std::span<const int> labels) {
  const auto& lv = logits.value();
  require_rank(lv, 2, "softmax_cross_entropy");
  const std::size_t n = lv.dim(0), k = lv.dim(1);
  if (labels.size() != n) throw std::invalid_argument("softmax_cross_entropy: label count mismatch");
  auto probs = std::make_shared<std::vector<double>>(n * k);
  auto lab = std::make_shared<std::vector<int>>(labels.begin(), labels.end());
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= k) {
      throw std::invalid_argument("softmax_cross_entropy: label out of range");
    }
    double mx = lv[i * k];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, static_cast<double>(lv[i * k + j]));
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) sum += std::exp(lv[i * k + j] - mx);
    for (std::size_t j = 0; j < k; ++j) (*probs)[i * k + j] = std::exp(lv[i * k + j] - mx) / sum;
    total -= (lv[i * k + static_cast<std::size_t>(y)] - mx) - std::log(sum);
  }
  Tensor<T> out({1}, static_cast<T>(total / static_cast<double>(n)));
  const std::size_t il = logits.id;
  return logits.tape->record("softmax_cross_entropy", std::move(out), {il},
                             [=](Tape<T>& tape, std::size_t self) {
                               const double g = tape.grad(self)[0] / static_cast<double>(n);
                               auto& d = tape.grad(il);
                               for (std::size_t i = 0; i < n; ++i) {
                                 for (std::size_t j = 0; j < k; ++j) {
                                   const double onehot = static_cast<int>(j) == (*lab)[i] ? 1.0 : 0.0;
                                   d[i * k + j] += static_cast<T>(g * ((*probs)[i * k + j] - onehot));
                                 }
                               }
                             });
}

#define SVP_INSTANTIATE_OPS(T)                                                                   \
  template Var<T> add(Var<T>, Var<T>);                                                           \
  template Var<T> silu(Var<T>);                                                                  \
  template Var<T> relu(Var<T>);                                                                  \
  template Var<T> conv2d(Var<T>, Var<T>, std::optional<Var<T>>, std::size_t, std::size_t);       \
  template Var<T> weight_standardize(Var<T>, double);                                            \
  template Var<T> group_norm(Var<T>, Var<T>, Var<T>, std::size_t, double);                       \
  template Var<T> batch_norm(Var<T>, Var<T>, Var<T>, BatchNormStats<T>&, bool, double, double);  \
  template Var<T> linear(Var<T>, Var<T>, std::optional<Var<T>>);                                 \
  template Var<T> scale_shift(Var<T>, Var<T>);                                                   \
  template Var<T> concat_channels(Var<T>, Var<T>);                                               \
  template Var<T> upsample_nearest2x(Var<T>);                                                    \
  template Var<T> max_pool2d(Var<T>, std::size_t, std::size_t, std::size_t);                     \
  template Var<T> global_avg_pool(Var<T>);                                                       \
  template Var<T> self_attention(Var<T>, Var<T>, Var<T>, std::size_t);                           \
  template Var<T> linear_attention(Var<T>, Var<T>, Var<T>, std::size_t, std::uint64_t*);         \
  template Var<T> l1_loss(Var<T>, Var<T>, Reduction);                                            \
  template Var<T> softmax_cross_entropy(Var<T>, std::span<const int>);

SVP_INSTANTIATE_OPS(float)
SVP_INSTANTIATE_OPS(double)

#undef SVP_INSTANTIATE_OPS

}  // namespace svp::ad
