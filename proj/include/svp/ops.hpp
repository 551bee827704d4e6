#pragma once

#include <cstdint>
#include <optional>
#include <span>

#include "svp/autodiff.hpp"

// Differentiable layer kernels. Every op validates shapes, computes its
// forward value eagerly and records a backward closure on the tape.
// Instantiated for float and double.
namespace svp::ad {

enum class Reduction { kSum, kMean };

template <typename T>
struct BatchNormStats {
  Tensor<T> running_mean;
  Tensor<T> running_var;
};

template <typename T>
Var<T> add(Var<T> a, Var<T> b);

template <typename T>
Var<T> silu(Var<T> x);

template <typename T>
Var<T> relu(Var<T> x);

// x: N x Cin x H x W, w: Cout x Cin x K x K, bias: Cout.
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, std::optional<Var<T>> bias, std::size_t stride, std::size_t pad);

// Per output channel: (w - mean) / sqrt(var + eps), statistics over Cin x K x K.
template <typename T>
Var<T> weight_standardize(Var<T> w, double eps = 1e-5);

template <typename T>
Var<T> group_norm(Var<T> x, Var<T> gamma, Var<T> beta, std::size_t groups, double eps = 1e-5);

// Batch statistics in training mode (running stats updated in place), running
// statistics otherwise.
template <typename T>
Var<T> batch_norm(Var<T> x, Var<T> gamma, Var<T> beta, BatchNormStats<T>& stats, bool training,
                  double momentum = 0.1, double eps = 1e-5);

// x: N x F, w: O x F, b: O.
template <typename T>
Var<T> linear(Var<T> x, Var<T> w, std::optional<Var<T>> b);

// x: N x C x H x W, emb: N x 2C laid out as [scale | shift]; y = x * (1 + scale) + shift.
template <typename T>
Var<T> scale_shift(Var<T> x, Var<T> emb);

template <typename T>
Var<T> concat_channels(Var<T> a, Var<T> b);

template <typename T>
Var<T> upsample_nearest2x(Var<T> x);

template <typename T>
Var<T> max_pool2d(Var<T> x, std::size_t kernel, std::size_t stride, std::size_t pad);

// N x C x H x W -> N x C.
template <typename T>
Var<T> global_avg_pool(Var<T> x);

// Softmax attention over the H*W positions of each head:
// out = softmax(q^T k / sqrt(d)) applied to v. q, k, v: N x C x H x W.
template <typename T>
Var<T> self_attention(Var<T> q, Var<T> k, Var<T> v, std::size_t heads);

// Efficient (kernelized) attention: k softmax over positions, q softmax over
// the head's feature dimension, out = softmax_q(q)^T (softmax_k(k) v^T).
// `multiply_count`, when given, is incremented by the number of scalar
// multiplications performed in the attention products.
template <typename T>
Var<T> linear_attention(Var<T> q, Var<T> k, Var<T> v, std::size_t heads,
                        std::uint64_t* multiply_count = nullptr);

// Scalar output of shape {1}.
template <typename T>
Var<T> l1_loss(Var<T> pred, Var<T> target, Reduction reduction);

// logits: N x K; mean negative log-likelihood, scalar output of shape {1}.
template <typename T>
Var<T> softmax_cross_entropy(Var<T> logits, std::span<const int> labels);

}  // namespace svp::ad
