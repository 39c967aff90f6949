#pragma once

#include <vector>

#include <torch/torch.h>

namespace histaug {

// ---------------------------------------------------------------------------
// Self-attention over spatial positions.
//
// For features x with N = H*W positions:
//   q = W_q x, k = W_k x, v = W_v x            (1x1 convolutions, no bias)
//   s[j,i] = q(x_i) . k(x_j),  attention[j,i] = softmax_i(s[j,i])
//   attended_j = sum_i attention[j,i] v(x_i)
//   output = gamma * attended + x
// ---------------------------------------------------------------------------

struct AttentionResult {
  torch::Tensor output;     // [B, C, H, W]
  torch::Tensor attention;  // [B, N, N], rows indexed by the attending position j
  torch::Tensor attended;   // [B, C, H, W], before the residual combination
};

/// Accepts x as [B,C,H,W] or [C,H,W]; weights as [C',C,1,1] or [C',C]. gamma is a scalar tensor.
/// Unbatched input yields unbatched results.
AttentionResult self_attention(const torch::Tensor& x, const torch::Tensor& w_query,
                               const torch::Tensor& w_key, const torch::Tensor& w_value,
                               const torch::Tensor& gamma);

class SelfAttentionImpl : public torch::nn::Module {
 public:
  /// Key/query width is channels / reduction (at least 1). gamma starts at 0.
  explicit SelfAttentionImpl(int channels, int reduction = 8);

  AttentionResult forward(const torch::Tensor& x);

  torch::Tensor w_query, w_key, w_value, gamma;
};
TORCH_MODULE(SelfAttention);

// ---------------------------------------------------------------------------
// Conditional batch normalization: batch statistics over (B, H, W), then a per-class affine
// transform gain[y] * x_hat + bias[y].
// ---------------------------------------------------------------------------
class ConditionalBatchNorm2dImpl : public torch::nn::Module {
 public:
  ConditionalBatchNorm2dImpl(int features, int classes, double eps = 1e-5, double momentum = 0.1);

  /// labels: int64 [B]; throws ValidationError for labels outside [0, classes).
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& labels);

  int features, classes;
  double eps, momentum;
  torch::Tensor gain, bias;                   // [classes, features]
  torch::Tensor running_mean, running_var;    // buffers
};
TORCH_MODULE(ConditionalBatchNorm2d);

// ---------------------------------------------------------------------------
// Spectral normalization by power iteration.
// ---------------------------------------------------------------------------

/// Persistent left/right singular vector estimates. Updated in place so that tensors registered
/// as module buffers stay registered.
struct PowerIterationState {
  torch::Tensor u;  // [rows]
  torch::Tensor v;  // [cols]
};

/// Returns weight / sigma_hat with sigma_hat = u^T W v after `power_iters` iterations on the
/// weight viewed as [out, -1]. sigma_hat is clamped below by 1e-12 and carries gradient through
/// W (u and v are treated as constants). With update=false the stored vectors are used as is.
torch::Tensor spectral_normalize(const torch::Tensor& weight, int power_iters,
                                 PowerIterationState& state, bool update = true);

/// sigma_hat for the current state (no iteration).
torch::Tensor spectral_sigma(const torch::Tensor& weight, const PowerIterationState& state);

class SNConv2dImpl : public torch::nn::Module {
 public:
  SNConv2dImpl(int in, int out, int kernel, int stride = 1, int padding = 0, int power_iters = 1);

  torch::Tensor forward(const torch::Tensor& x);
  /// The weight actually applied in forward (iterates when training).
  torch::Tensor normalized_weight();

  torch::Tensor weight, bias;
  PowerIterationState state;
  int stride, padding, power_iters;
};
TORCH_MODULE(SNConv2d);

class SNLinearImpl : public torch::nn::Module {
 public:
  SNLinearImpl(int in, int out, int power_iters = 1);

  torch::Tensor forward(const torch::Tensor& x);
  torch::Tensor normalized_weight();

  torch::Tensor weight, bias;
  PowerIterationState state;
  int power_iters;
};
TORCH_MODULE(SNLinear);

// ---------------------------------------------------------------------------
// Minibatch discrimination.
//
// M = f T reshaped to [B, kernels, kernel_dim];
// o[i,b] = sum_{j != i} exp(-||M[i,b,:] - M[j,b,:]||_1).
// A batch of one yields o = 0 (empty sum).
// ---------------------------------------------------------------------------

/// f: [B, F], projection: [F, kernels * kernel_dim]. Returns o: [B, kernels].
torch::Tensor minibatch_closeness(const torch::Tensor& f, const torch::Tensor& projection,
                                  int kernels, int kernel_dim);

class MinibatchDiscriminationImpl : public torch::nn::Module {
 public:
  MinibatchDiscriminationImpl(int in_features, int kernels = 16, int kernel_dim = 8);

  /// [B, F] -> [B, F + kernels]
  torch::Tensor forward(const torch::Tensor& f);

  int kernels, kernel_dim;
  torch::Tensor projection;
};
TORCH_MODULE(MinibatchDiscrimination);

// ---------------------------------------------------------------------------
// Critic objectives
// ---------------------------------------------------------------------------

/// mean(fake) - mean(real) + gp_weight * mean((grad_norm - 1)^2)
torch::Tensor critic_loss(const torch::Tensor& real_scores, const torch::Tensor& fake_scores,
                          const torch::Tensor& grad_norms, double gp_weight);

/// -mean(fake_scores), summed over stages.
torch::Tensor generator_loss(const std::vector<torch::Tensor>& fake_scores_per_stage);
torch::Tensor generator_loss(const torch::Tensor& fake_scores);

/// Per-sample input-gradient norms of `critic` at uniform convex combinations of real and fake.
/// The graph is kept so the penalty can be differentiated w.r.t. critic parameters.
torch::Tensor interpolate_grad_norms(
    const std::function<torch::Tensor(const torch::Tensor&)>& critic, const torch::Tensor& real,
    const torch::Tensor& fake);

}  // namespace histaug
