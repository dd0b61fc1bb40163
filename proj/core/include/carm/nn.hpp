#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "carm/tensor.hpp"

// Minimal reverse-mode differentiation over dense tensors. Convolutional
// activations use a channel-major [C, N, H, W] layout so that a convolution is
// one GEMM over the whole batch.
namespace carm::nn {

struct Node {
  Tensor value;
  Tensor grad;  // empty until a gradient arrives
  bool requires_grad = false;
};

using Var = std::shared_ptr<Node>;

Var constant(Tensor value);
Var variable(Tensor value);

void accumulate_grad(Node& node, Tensor g);

// Records backward closures in execution order and replays them in reverse.
class Tape {
 public:
  void record(std::function<void()> backward) { ops_.push_back(std::move(backward)); }
  // Seeds root.grad and runs every recorded closure once, newest first.
  void backward(const Var& root, const Tensor& seed);
  std::size_t size() const { return ops_.size(); }
  void clear() { ops_.clear(); }

 private:
  std::vector<std::function<void()>> ops_;
};

// Null tape: inference, nothing recorded.
bool recording(const Tape* tape, std::initializer_list<const Var*> inputs);

// x: [Ci, N, H, W], w: [Co, Ci, k, k] -> [Co, N, Ho, Wo]
Var conv2d(Tape* tape, const Var& x, const Var& w, int stride, int pad);

struct BatchStats {
  std::vector<Real> mean;
  std::vector<Real> var_unbiased;
};

// Per-channel normalisation over (N, H, W) of a [C, N, H, W] tensor. With
// use_batch_stats the batch mean/variance normalise and are reported through
// `stats`; otherwise the running estimates are used.
Var batch_norm(Tape* tape, const Var& x, const Var& gamma, const Var& beta, const Tensor& running_mean,
               const Tensor& running_var, bool use_batch_stats, BatchStats* stats, Real eps = Real(1e-5));

Var relu(Tape* tape, const Var& x);
Var add(Tape* tape, const Var& a, const Var& b);
Var mul(Tape* tape, const Var& a, const Var& b);

// 3x3 window, stride 2, padding 1 over [C, N, H, W].
Var max_pool3x3s2(Tape* tape, const Var& x);

// x: [M, in], w: [out, in], b: [out] -> [M, out]
Var linear(Tape* tape, const Var& x, const Var& w, const Var& b);

// Normalises each row of [M, D].
Var layer_norm(Tape* tape, const Var& x, const Var& gamma, const Var& beta, Real eps = Real(1e-5));

// [C, N, h, w] -> [N * h * w, C]; row n * (h*w) + p holds the feature vector
// at spatial position p of sample n.
Var spatial_tokens(Tape* tape, const Var& z);

// [N * T, D] -> [N, D] mean over each sample's T rows.
Var mean_tokens(Tape* tape, const Var& x, std::int64_t n);

// Single-head scaled dot-product attention, one query per sample.
// q: [N, D]; k, v: [N * T, D]. Returns [N, D]. `weights`, if given, receives
// the [N, T] softmax weights.
Var attention(Tape* tape, const Var& q, const Var& k, const Var& v, std::int64_t n, Tensor* weights = nullptr);

}  // namespace carm::nn
