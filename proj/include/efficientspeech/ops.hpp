#pragma once

#include <cstdint>
#include <string_view>

#include "efficientspeech/tensor.hpp"

// Forward and backward kernels on plain tensors. The autograd layer records these; they are
// also usable directly for inference. Forward kernels that perform multiply-accumulates add
// to a thread-local counter so the analytic FLOP model can be checked against execution.
namespace es::ops {

enum class Activation { gelu, relu, tanh };

std::string_view activation_name(Activation kind);

// Thread-local MAC counter incremented by linear/matmul/conv forward kernels.
std::uint64_t mac_count();
void reset_mac_count();

template <typename T>
Tensor<T> linear_forward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias);

template <typename T>
void linear_backward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& grad_out,
                     Tensor<T>* grad_x, Tensor<T>* grad_w, Tensor<T>* grad_b);

// (n x k) . (k x m)
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
void matmul_backward(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& grad_out,
                     Tensor<T>* grad_a, Tensor<T>* grad_b);

template <typename T>
Tensor<T> transpose(const Tensor<T>& x);

struct Conv1dParams {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t groups = 1;
};

std::size_t conv1d_output_length(std::size_t length, std::size_t kernel, const Conv1dParams& p);

// x: c_in x L, weight: c_out x (c_in/groups) x k, bias: c_out (nullable). Zero padding.
template <typename T>
Tensor<T> conv1d_forward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias,
                         const Conv1dParams& p);

template <typename T>
void conv1d_backward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& grad_out,
                     const Conv1dParams& p, Tensor<T>* grad_x, Tensor<T>* grad_w, Tensor<T>* grad_b);

// x: c_in x L, weight: c_in x c_out x k, bias: c_out (nullable).
// Output length (L - 1) * stride + k.
template <typename T>
Tensor<T> conv1d_transposed_forward(const Tensor<T>& x, const Tensor<T>& weight,
                                    const Tensor<T>* bias, std::size_t stride);

template <typename T>
void conv1d_transposed_backward(const Tensor<T>& x, const Tensor<T>& weight,
                                const Tensor<T>& grad_out, std::size_t stride, Tensor<T>* grad_x,
                                Tensor<T>* grad_w, Tensor<T>* grad_b);

template <typename T>
struct LayerNormCache {
  std::vector<T> mean;
  std::vector<T> rstd;
};

// Normalizes each row of x (N x c) over its c channels.
template <typename T>
Tensor<T> layer_norm_forward(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                             T eps, LayerNormCache<T>* cache = nullptr);

template <typename T>
void layer_norm_backward(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& grad_out,
                         const LayerNormCache<T>& cache, Tensor<T>* grad_x, Tensor<T>* grad_gamma,
                         Tensor<T>* grad_beta);

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x);

// y is the softmax output.
template <typename T>
Tensor<T> softmax_rows_backward(const Tensor<T>& y, const Tensor<T>& grad_out);

template <typename T>
T activation(Activation kind, T x);

template <typename T>
T activation_derivative(Activation kind, T x);

template <typename T>
Tensor<T> activation_forward(Activation kind, const Tensor<T>& x);

template <typename T>
Tensor<T> activation_backward(Activation kind, const Tensor<T>& x, const Tensor<T>& grad_out);

// Multi-head self-attention without bias, mask, or positional encoding.
// x: N x c; projections c x c; heads must divide c.
template <typename T>
Tensor<T> self_attention_forward(const Tensor<T>& x, const Tensor<T>& wq, const Tensor<T>& wk,
                                 const Tensor<T>& wv, const Tensor<T>& wo, std::size_t heads);

}  // namespace es::ops
