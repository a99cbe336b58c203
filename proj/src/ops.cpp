#include "efficientspeech/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace es::ops {

namespace {

thread_local std::uint64_t g_macs = 0;

void require_2d(const Shape& s, const char* what) {
  if (s.size() != 2) throw ShapeError(std::string(what) + " must be 2-D, got " + shape_str(s));
}

}  // namespace

std::string_view activation_name(Activation kind) {
  switch (kind) {
    case Activation::gelu:
      return "gelu";
    case Activation::relu:
      return "relu";
    case Activation::tanh:
      return "tanh";
  }
  return "?";
}

std::uint64_t mac_count() { return g_macs; }
void reset_mac_count() { g_macs = 0; }

template <typename T>
Tensor<T> linear_forward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias) {
  require_2d(x.shape(), "linear input");
  require_2d(weight.shape(), "linear weight");
  const std::size_t n = x.rows(), cin = x.cols(), cout = weight.cols();
  if (weight.rows() != cin || (bias && bias->size() != cout)) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                     shape_str(weight.shape()) +
                     (bias ? " and bias " + shape_str(bias->shape()) : std::string()));
  }
  Tensor<T> out({n, cout});
  const T* w = weight.data().data();
  for (std::size_t r = 0; r < n; ++r) {
    T* o = &out(r, 0);
    if (bias) std::copy(bias->data().begin(), bias->data().end(), o);
    const T* xr = &x(r, 0);
    for (std::size_t i = 0; i < cin; ++i) {
      const T xv = xr[i];
      const T* wr = w + i * cout;
      for (std::size_t j = 0; j < cout; ++j) o[j] += xv * wr[j];
    }
  }
  g_macs += static_cast<std::uint64_t>(n) * cin * cout;
  return out;
}

template <typename T>
void linear_backward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& grad_out,
                     Tensor<T>* grad_x, Tensor<T>* grad_w, Tensor<T>* grad_b) {
  const std::size_t n = x.rows(), cin = x.cols(), cout = weight.cols();
  if (grad_x) {
    *grad_x = Tensor<T>({n, cin});
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t i = 0; i < cin; ++i) {
        T acc = 0;
        for (std::size_t j = 0; j < cout; ++j) acc += grad_out(r, j) * weight(i, j);
        (*grad_x)(r, i) = acc;
      }
    }
  }
  if (grad_w) {
    *grad_w = Tensor<T>({cin, cout});
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t i = 0; i < cin; ++i) {
        const T xv = x(r, i);
        T* gw = &(*grad_w)(i, 0);
        const T* g = &grad_out(r, 0);
        for (std::size_t j = 0; j < cout; ++j) gw[j] += xv * g[j];
      }
    }
  }
  if (grad_b) {
    *grad_b = Tensor<T>({cout});
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t j = 0; j < cout; ++j) (*grad_b)[j] += grad_out(r, j);
    }
  }
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_2d(a.shape(), "matmul lhs");
  require_2d(b.shape(), "matmul rhs");
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  return linear_forward<T>(a, b, nullptr);
}

template <typename T>
void matmul_backward(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& grad_out,
                     Tensor<T>* grad_a, Tensor<T>* grad_b) {
  linear_backward<T>(a, b, grad_out, grad_a, grad_b, nullptr);
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  require_2d(x.shape(), "transpose input");
  Tensor<T> out({x.cols(), x.rows()});
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t c = 0; c < x.cols(); ++c) out(c, r) = x(r, c);
  }
  return out;
}

std::size_t conv1d_output_length(std::size_t length, std::size_t kernel, const Conv1dParams& p) {
  if (p.stride == 0) throw ConfigError("conv1d stride must be >= 1");
  const std::size_t padded = length + 2 * p.padding;
  if (length == 0 || padded < kernel) {
    throw SequenceTooShortError("conv1d: sequence of length " + std::to_string(length) +
                                " with padding " + std::to_string(p.padding) +
                                " is shorter than kernel " + std::to_string(kernel));
  }
  return (padded - kernel) / p.stride + 1;
}

template <typename T>
Tensor<T> conv1d_forward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias,
                         const Conv1dParams& p) {
  require_2d(x.shape(), "conv1d input");
  if (weight.ndim() != 3) throw ShapeError("conv1d weight must be 3-D, got " + shape_str(weight.shape()));
  const std::size_t cin = x.rows(), len = x.cols();
  const std::size_t cout = weight.dim(0), cpg = weight.dim(1), k = weight.dim(2);
  if (p.groups == 0 || cin % p.groups != 0 || cout % p.groups != 0 || cpg * p.groups != cin ||
      (bias && bias->size() != cout)) {
    throw ShapeError("conv1d: input " + shape_str(x.shape()) + " incompatible with weight " +
                     shape_str(weight.shape()) + " for groups=" + std::to_string(p.groups));
  }
  const std::size_t lout = conv1d_output_length(len, k, p);
  const std::size_t opg = cout / p.groups;
  Tensor<T> out({cout, lout});
  for (std::size_t o = 0; o < cout; ++o) {
    const std::size_t g = o / opg;
    T* orow = &out(o, 0);
    if (bias) std::fill(orow, orow + lout, (*bias)[o]);
    for (std::size_t ci = 0; ci < cpg; ++ci) {
      const T* xrow = &x(g * cpg + ci, 0);
      for (std::size_t kk = 0; kk < k; ++kk) {
        const T wv = weight(o, ci, kk);
        for (std::size_t t = 0; t < lout; ++t) {
          const std::ptrdiff_t pos = static_cast<std::ptrdiff_t>(t * p.stride + kk) -
                                     static_cast<std::ptrdiff_t>(p.padding);
          if (pos >= 0 && pos < static_cast<std::ptrdiff_t>(len)) orow[t] += wv * xrow[pos];
        }
      }
    }
  }
  g_macs += static_cast<std::uint64_t>(lout) * cout * cpg * k;
  return out;
}

template <typename T>
void conv1d_backward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& grad_out,
                     const Conv1dParams& p, Tensor<T>* grad_x, Tensor<T>* grad_w, Tensor<T>* grad_b) {
  const std::size_t cin = x.rows(), len = x.cols();
  const std::size_t cout = weight.dim(0), cpg = weight.dim(1), k = weight.dim(2);
  const std::size_t lout = grad_out.cols();
  const std::size_t opg = cout / p.groups;
  if (grad_x) *grad_x = Tensor<T>({cin, len});
  if (grad_w) *grad_w = Tensor<T>(weight.shape());
  if (grad_b) *grad_b = Tensor<T>({cout});
  for (std::size_t o = 0; o < cout; ++o) {
    const std::size_t g = o / opg;
    const T* grow = &grad_out(o, 0);
    if (grad_b) {
      for (std::size_t t = 0; t < lout; ++t) (*grad_b)[o] += grow[t];
    }
    for (std::size_t ci = 0; ci < cpg; ++ci) {
      const std::size_t xc = g * cpg + ci;
      for (std::size_t kk = 0; kk < k; ++kk) {
        const T wv = weight(o, ci, kk);
        T wacc = 0;
        for (std::size_t t = 0; t < lout; ++t) {
          const std::ptrdiff_t pos = static_cast<std::ptrdiff_t>(t * p.stride + kk) -
                                     static_cast<std::ptrdiff_t>(p.padding);
          if (pos < 0 || pos >= static_cast<std::ptrdiff_t>(len)) continue;
          if (grad_x) (*grad_x)(xc, pos) += wv * grow[t];
          wacc += x(xc, pos) * grow[t];
        }
        if (grad_w) (*grad_w)(o, ci, kk) += wacc;
      }
    }
  }
}

template <typename T>
Tensor<T> conv1d_transposed_forward(const Tensor<T>& x, const Tensor<T>& weight,
                                    const Tensor<T>* bias, std::size_t stride) {
  require_2d(x.shape(), "transposed conv input");
  if (x.empty()) throw ShapeError("transposed conv: empty input");
  if (stride == 0) throw ConfigError("transposed conv stride must be >= 1");
  if (weight.ndim() != 3 || weight.dim(0) != x.rows()) {
    throw ShapeError("transposed conv: input " + shape_str(x.shape()) + " incompatible with weight " +
                     shape_str(weight.shape()));
  }
  const std::size_t cin = x.rows(), len = x.cols(), cout = weight.dim(1), k = weight.dim(2);
  if (bias && bias->size() != cout) throw ShapeError("transposed conv: bias size mismatch");
  const std::size_t lout = (len - 1) * stride + k;
  Tensor<T> out({cout, lout});
  for (std::size_t o = 0; o < cout; ++o) {
    if (bias) std::fill(&out(o, 0), &out(o, 0) + lout, (*bias)[o]);
  }
  for (std::size_t ci = 0; ci < cin; ++ci) {
    for (std::size_t o = 0; o < cout; ++o) {
      T* orow = &out(o, 0);
      for (std::size_t kk = 0; kk < k; ++kk) {
        const T wv = weight(ci, o, kk);
        for (std::size_t t = 0; t < len; ++t) orow[t * stride + kk] += x(ci, t) * wv;
      }
    }
  }
  g_macs += static_cast<std::uint64_t>(len) * cin * cout * k;
  return out;
}

template <typename T>
void conv1d_transposed_backward(const Tensor<T>& x, const Tensor<T>& weight,
                                const Tensor<T>& grad_out, std::size_t stride, Tensor<T>* grad_x,
                                Tensor<T>* grad_w, Tensor<T>* grad_b) {
  const std::size_t cin = x.rows(), len = x.cols(), cout = weight.dim(1), k = weight.dim(2);
  if (grad_x) *grad_x = Tensor<T>({cin, len});
  if (grad_w) *grad_w = Tensor<T>(weight.shape());
  if (grad_b) {
    *grad_b = Tensor<T>({cout});
    for (std::size_t o = 0; o < cout; ++o) {
      for (std::size_t t = 0; t < grad_out.cols(); ++t) (*grad_b)[o] += grad_out(o, t);
    }
  }
  for (std::size_t ci = 0; ci < cin; ++ci) {
    for (std::size_t o = 0; o < cout; ++o) {
      for (std::size_t kk = 0; kk < k; ++kk) {
        const T wv = weight(ci, o, kk);
        T wacc = 0;
        for (std::size_t t = 0; t < len; ++t) {
          const T g = grad_out(o, t * stride + kk);
          if (grad_x) (*grad_x)(ci, t) += wv * g;
          wacc += x(ci, t) * g;
        }
        if (grad_w) (*grad_w)(ci, o, kk) += wacc;
      }
    }
  }
}

template <typename T>
Tensor<T> layer_norm_forward(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                             T eps, LayerNormCache<T>* cache) {
  require_2d(x.shape(), "layer_norm input");
  const std::size_t n = x.rows(), c = x.cols();
  if (c == 0 || gamma.size() != c || beta.size() != c) {
    throw ShapeError("layer_norm: input " + shape_str(x.shape()) + " with gamma " +
                     shape_str(gamma.shape()) + " and beta " + shape_str(beta.shape()));
  }
  Tensor<T> out({n, c});
  if (cache) {
    cache->mean.assign(n, T{});
    cache->rstd.assign(n, T{});
  }
  for (std::size_t r = 0; r < n; ++r) {
    const T* xr = &x(r, 0);
    T mean = 0;
    for (std::size_t j = 0; j < c; ++j) mean += xr[j];
    mean /= static_cast<T>(c);
    T var = 0;
    for (std::size_t j = 0; j < c; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<T>(c);
    const T rstd = T(1) / std::sqrt(var + eps);
    T* o = &out(r, 0);
    for (std::size_t j = 0; j < c; ++j) o[j] = (xr[j] - mean) * rstd * gamma[j] + beta[j];
    if (cache) {
      cache->mean[r] = mean;
      cache->rstd[r] = rstd;
    }
  }
  return out;
}

template <typename T>
void layer_norm_backward(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& grad_out,
                         const LayerNormCache<T>& cache, Tensor<T>* grad_x, Tensor<T>* grad_gamma,
                         Tensor<T>* grad_beta) {
  const std::size_t n = x.rows(), c = x.cols();
  if (grad_x) *grad_x = Tensor<T>({n, c});
  if (grad_gamma) *grad_gamma = Tensor<T>({c});
  if (grad_beta) *grad_beta = Tensor<T>({c});
  std::vector<T> xhat(c), dxhat(c);
  for (std::size_t r = 0; r < n; ++r) {
    const T mean = cache.mean[r], rstd = cache.rstd[r];
    T sum_d = 0, sum_dx = 0;
    for (std::size_t j = 0; j < c; ++j) {
      xhat[j] = (x(r, j) - mean) * rstd;
      const T g = grad_out(r, j);
      dxhat[j] = g * gamma[j];
      sum_d += dxhat[j];
      sum_dx += dxhat[j] * xhat[j];
      if (grad_gamma) (*grad_gamma)[j] += g * xhat[j];
      if (grad_beta) (*grad_beta)[j] += g;
    }
    if (grad_x) {
      const T inv_c = T(1) / static_cast<T>(c);
      for (std::size_t j = 0; j < c; ++j) {
        (*grad_x)(r, j) = rstd * (dxhat[j] - sum_d * inv_c - xhat[j] * sum_dx * inv_c);
      }
    }
  }
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  require_2d(x.shape(), "softmax input");
  Tensor<T> out(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row(r);
    auto o = out.row(r);
    const T mx = *std::max_element(in.begin(), in.end());
    T sum = 0;
    for (std::size_t j = 0; j < in.size(); ++j) {
      o[j] = std::exp(in[j] - mx);
      sum += o[j];
    }
    for (auto& v : o) v /= sum;
  }
  return out;
}

template <typename T>
Tensor<T> softmax_rows_backward(const Tensor<T>& y, const Tensor<T>& grad_out) {
  Tensor<T> gx(y.shape());
  for (std::size_t r = 0; r < y.rows(); ++r) {
    T dot = 0;
    for (std::size_t j = 0; j < y.cols(); ++j) dot += grad_out(r, j) * y(r, j);
    for (std::size_t j = 0; j < y.cols(); ++j) gx(r, j) = y(r, j) * (grad_out(r, j) - dot);
  }
  return gx;
}

template <typename T>
T activation(Activation kind, T x) {
  switch (kind) {
    case Activation::gelu:
      return x * T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
    case Activation::relu:
      return x > T(0) ? x : T(0);
    case Activation::tanh:
      return std::tanh(x);
  }
  return x;
}

template <typename T>
T activation_derivative(Activation kind, T x) {
  switch (kind) {
    case Activation::gelu: {
      const T cdf = T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
      const T pdf = std::exp(T(-0.5) * x * x) * std::numbers::inv_sqrtpi_v<T> / std::numbers::sqrt2_v<T>;
      return cdf + x * pdf;
    }
    case Activation::relu:
      return x > T(0) ? T(1) : T(0);
    case Activation::tanh: {
      const T t = std::tanh(x);
      return T(1) - t * t;
    }
  }
  return T(1);
}

template <typename T>
Tensor<T> activation_forward(Activation kind, const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = activation(kind, x[i]);
  return out;
}

template <typename T>
Tensor<T> activation_backward(Activation kind, const Tensor<T>& x, const Tensor<T>& grad_out) {
  Tensor<T> gx(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) gx[i] = grad_out[i] * activation_derivative(kind, x[i]);
  return gx;
}

template <typename T>
Tensor<T> self_attention_forward(const Tensor<T>& x, const Tensor<T>& wq, const Tensor<T>& wk,
                                 const Tensor<T>& wv, const Tensor<T>& wo, std::size_t heads) {
  require_2d(x.shape(), "attention input");
  const std::size_t n = x.rows(), c = x.cols();
  if (heads == 0 || c % heads != 0) {
    throw ConfigError("attention: " + std::to_string(heads) + " heads do not divide width " +
                      std::to_string(c));
  }
  const std::size_t dh = c / heads;
  const Tensor<T> q = matmul(x, wq), k = matmul(x, wk), v = matmul(x, wv);
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  Tensor<T> context({n, c});
  for (std::size_t h = 0; h < heads; ++h) {
    Tensor<T> scores({n, n});
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        T acc = 0;
        for (std::size_t e = 0; e < dh; ++e) acc += q(i, h * dh + e) * k(j, h * dh + e);
        scores(i, j) = acc * scale;
      }
    }
    const Tensor<T> probs = softmax_rows(scores);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        const T pw = probs(i, j);
        for (std::size_t e = 0; e < dh; ++e) context(i, h * dh + e) += pw * v(j, h * dh + e);
      }
    }
  }
  g_macs += 2ULL * n * n * c;
  return matmul(context, wo);
}

#define ES_INSTANTIATE_OPS(T)                                                                       \
  template Tensor<T> linear_forward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*);          \
  template void linear_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Tensor<T>*,   \
                                Tensor<T>*, Tensor<T>*);                                            \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                    \
  template void matmul_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Tensor<T>*,   \
                                Tensor<T>*);                                                        \
  template Tensor<T> transpose(const Tensor<T>&);                                                   \
  template Tensor<T> conv1d_forward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*,           \
                                    const Conv1dParams&);                                           \
  template void conv1d_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,               \
                                const Conv1dParams&, Tensor<T>*, Tensor<T>*, Tensor<T>*);           \
  template Tensor<T> conv1d_transposed_forward(const Tensor<T>&, const Tensor<T>&,                  \
                                               const Tensor<T>*, std::size_t);                      \
  template void conv1d_transposed_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,    \
                                           std::size_t, Tensor<T>*, Tensor<T>*, Tensor<T>*);        \
  template Tensor<T> layer_norm_forward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T,    \
                                        LayerNormCache<T>*);                                        \
  template void layer_norm_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,           \
                                    const LayerNormCache<T>&, Tensor<T>*, Tensor<T>*, Tensor<T>*);  \
  template Tensor<T> softmax_rows(const Tensor<T>&);                                                \
  template Tensor<T> softmax_rows_backward(const Tensor<T>&, const Tensor<T>&);                     \
  template T activation(Activation, T);                                                             \
  template T activation_derivative(Activation, T);                                                  \
  template Tensor<T> activation_forward(Activation, const Tensor<T>&);                              \
  template Tensor<T> activation_backward(Activation, const Tensor<T>&, const Tensor<T>&);           \
  template Tensor<T> self_attention_forward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,   \
                                            const Tensor<T>&, const Tensor<T>&, std::size_t);

ES_INSTANTIATE_OPS(float)
ES_INSTANTIATE_OPS(double)

#undef ES_INSTANTIATE_OPS

}  // namespace es::ops
