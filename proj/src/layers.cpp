#include "histaug/layers.hpp"

#include <cmath>

#include "histaug/errors.hpp"

namespace F = torch::nn::functional;

namespace histaug {

namespace {

torch::Tensor as_conv_weight(const torch::Tensor& w) {
  return w.dim() == 2 ? w.unsqueeze(-1).unsqueeze(-1) : w;
}

torch::Tensor unit(const torch::Tensor& v) {
  return F::normalize(v, F::NormalizeFuncOptions().dim(0).eps(1e-12));
}

}  // namespace

AttentionResult self_attention(const torch::Tensor& x, const torch::Tensor& w_query,
                               const torch::Tensor& w_key, const torch::Tensor& w_value,
                               const torch::Tensor& gamma) {
  const bool unbatched = x.dim() == 3;
  const auto xb = unbatched ? x.unsqueeze(0) : x;
  if (xb.dim() != 4) throw ValidationError("self_attention expects [B,C,H,W] or [C,H,W]");
  const auto B = xb.size(0), C = xb.size(1), H = xb.size(2), W = xb.size(3);
  const auto N = H * W;
  if (N < 1) throw ValidationError("self_attention needs at least one spatial position");
  const auto wq = as_conv_weight(w_query), wk = as_conv_weight(w_key), wv = as_conv_weight(w_value);
  if (wq.size(1) != C || wk.size(1) != C || wv.size(1) != C || wq.size(0) != wk.size(0) ||
      wv.size(0) != C) {
    throw ValidationError("self_attention weight shapes do not match the channel count");
  }

  const auto q = torch::conv2d(xb, wq).view({B, -1, N});
  const auto k = torch::conv2d(xb, wk).view({B, -1, N});
  const auto v = torch::conv2d(xb, wv).view({B, C, N});
  // scores[b, j, i] = k(x_j) . q(x_i)
  const auto scores = torch::bmm(k.transpose(1, 2), q);
  const auto attention = torch::softmax(scores, 2);
  const auto attended = torch::bmm(v, attention.transpose(1, 2)).view({B, C, H, W});
  auto output = gamma * attended + xb;

  if (unbatched) return {output.squeeze(0), attention.squeeze(0), attended.squeeze(0)};
  return {output, attention, attended};
}

SelfAttentionImpl::SelfAttentionImpl(int channels, int reduction) {
  const int inner = std::max(1, channels / std::max(1, reduction));
  const double scale = 1.0 / std::sqrt(static_cast<double>(channels));
  w_query = register_parameter("w_query", torch::randn({inner, channels, 1, 1}) * scale);
  w_key = register_parameter("w_key", torch::randn({inner, channels, 1, 1}) * scale);
  w_value = register_parameter("w_value", torch::randn({channels, channels, 1, 1}) * scale);
  gamma = register_parameter("gamma", torch::zeros({}));
}

AttentionResult SelfAttentionImpl::forward(const torch::Tensor& x) {
  return self_attention(x, w_query, w_key, w_value, gamma);
}

ConditionalBatchNorm2dImpl::ConditionalBatchNorm2dImpl(int features, int classes, double eps,
                                                       double momentum)
    : features(features), classes(classes), eps(eps), momentum(momentum) {
  gain = register_parameter("gain", torch::ones({classes, features}));
  bias = register_parameter("bias", torch::zeros({classes, features}));
  running_mean = register_buffer("running_mean", torch::zeros({features}));
  running_var = register_buffer("running_var", torch::ones({features}));
}

torch::Tensor ConditionalBatchNorm2dImpl::forward(const torch::Tensor& x,
                                                  const torch::Tensor& labels) {
  if (x.dim() != 4 || x.size(1) != features) {
    throw ValidationError("conditional batch norm expects [B," + std::to_string(features) + ",H,W]");
  }
  if (labels.dim() != 1 || labels.size(0) != x.size(0)) {
    throw ValidationError("conditional batch norm needs one label per sample");
  }
  if (labels.numel() > 0 &&
      (labels.min().item<std::int64_t>() < 0 || labels.max().item<std::int64_t>() >= classes)) {
    throw ValidationError("conditional batch norm label outside [0, " + std::to_string(classes) + ")");
  }
  const auto normalized = torch::batch_norm(x, {}, {}, running_mean, running_var, is_training(),
                                            momentum, eps, false);
  const auto B = x.size(0);
  const auto g = gain.index_select(0, labels).view({B, features, 1, 1});
  const auto b = bias.index_select(0, labels).view({B, features, 1, 1});
  return normalized * g + b;
}

torch::Tensor spectral_sigma(const torch::Tensor& weight, const PowerIterationState& state) {
  const auto mat = weight.reshape({weight.size(0), -1});
  // Clones keep later in-place state updates from invalidating saved tensors.
  return torch::dot(state.u.clone(), torch::mv(mat, state.v.clone())).clamp_min(1e-12);
}

torch::Tensor spectral_normalize(const torch::Tensor& weight, int power_iters,
                                 PowerIterationState& state, bool update) {
  if (update && power_iters < 1) throw ValidationError("power_iters must be >= 1");
  if (weight.dim() < 2) throw ValidationError("spectral_normalize needs a matrix-shaped weight");
  const auto rows = weight.size(0);
  const auto cols = weight.numel() / rows;
  {
    torch::NoGradGuard no_grad;
    const auto mat = weight.detach().reshape({rows, cols});
    if (!state.u.defined() || state.u.numel() != rows || state.v.numel() != cols) {
      state.u = unit(torch::randn({rows}, weight.options()));
      state.v = unit(torch::randn({cols}, weight.options()));
    }
    if (update) {
      auto u = state.u.clone();
      auto v = state.v.clone();
      for (int i = 0; i < power_iters; ++i) {
        v = unit(torch::mv(mat.t(), u));
        u = unit(torch::mv(mat, v));
      }
      state.u.copy_(u);
      state.v.copy_(v);
    }
  }
  return weight / spectral_sigma(weight, state);
}

SNConv2dImpl::SNConv2dImpl(int in, int out, int kernel, int stride, int padding, int power_iters)
    : stride(stride), padding(padding), power_iters(power_iters) {
  const double fan_in = static_cast<double>(in) * kernel * kernel;
  weight = register_parameter("weight", torch::randn({out, in, kernel, kernel}) *
                                            std::sqrt(2.0 / fan_in));
  bias = register_parameter("bias", torch::zeros({out}));
  state.u = register_buffer("u", unit(torch::randn({out})));
  state.v = register_buffer("v", unit(torch::randn({in * kernel * kernel})));
}

torch::Tensor SNConv2dImpl::normalized_weight() {
  return spectral_normalize(weight, power_iters, state, is_training());
}

torch::Tensor SNConv2dImpl::forward(const torch::Tensor& x) {
  return torch::conv2d(x, normalized_weight(), bias, stride, padding);
}

SNLinearImpl::SNLinearImpl(int in, int out, int power_iters) : power_iters(power_iters) {
  weight = register_parameter("weight", torch::randn({out, in}) * std::sqrt(1.0 / in));
  bias = register_parameter("bias", torch::zeros({out}));
  state.u = register_buffer("u", unit(torch::randn({out})));
  state.v = register_buffer("v", unit(torch::randn({in})));
}

torch::Tensor SNLinearImpl::normalized_weight() {
  return spectral_normalize(weight, power_iters, state, is_training());
}

torch::Tensor SNLinearImpl::forward(const torch::Tensor& x) {
  return torch::linear(x, normalized_weight(), bias);
}

torch::Tensor minibatch_closeness(const torch::Tensor& f, const torch::Tensor& projection,
                                  int kernels, int kernel_dim) {
  if (f.dim() != 2 || f.size(0) < 1) throw ValidationError("minibatch discrimination expects [B,F]");
  if (projection.size(0) != f.size(1) || projection.size(1) != kernels * kernel_dim) {
    throw ValidationError("minibatch discrimination projection shape mismatch");
  }
  const auto B = f.size(0);
  const auto m = f.matmul(projection).view({B, kernels, kernel_dim});
  const auto l1 = (m.unsqueeze(1) - m.unsqueeze(0)).abs().sum(3);  // [B, B, kernels]
  const auto others = (1.0 - torch::eye(B, f.options())).unsqueeze(-1);
  return (torch::exp(-l1) * others).sum(1);
}

MinibatchDiscriminationImpl::MinibatchDiscriminationImpl(int in_features, int kernels,
                                                         int kernel_dim)
    : kernels(kernels), kernel_dim(kernel_dim) {
  projection = register_parameter(
      "projection", torch::randn({in_features, kernels * kernel_dim}) / std::sqrt(in_features));
}

torch::Tensor MinibatchDiscriminationImpl::forward(const torch::Tensor& f) {
  return torch::cat({f, minibatch_closeness(f, projection, kernels, kernel_dim)}, 1);
}

torch::Tensor critic_loss(const torch::Tensor& real_scores, const torch::Tensor& fake_scores,
                          const torch::Tensor& grad_norms, double gp_weight) {
  const auto penalty = (grad_norms - 1.0).pow(2).mean();
  return fake_scores.mean() - real_scores.mean() + gp_weight * penalty;
}

torch::Tensor generator_loss(const torch::Tensor& fake_scores) { return -fake_scores.mean(); }

torch::Tensor generator_loss(const std::vector<torch::Tensor>& fake_scores_per_stage) {
  torch::Tensor total;
  for (const auto& s : fake_scores_per_stage) {
    total = total.defined() ? total + generator_loss(s) : generator_loss(s);
  }
  return total.defined() ? total : torch::zeros({});
}

torch::Tensor interpolate_grad_norms(
    const std::function<torch::Tensor(const torch::Tensor&)>& critic, const torch::Tensor& real,
    const torch::Tensor& fake) {
  std::vector<std::int64_t> shape(real.dim(), 1);
  shape[0] = real.size(0);
  const auto mix = torch::rand(shape, real.options());
  const auto x = (mix * real.detach() + (1.0 - mix) * fake.detach()).requires_grad_(true);
  const auto scores = critic(x);
  const auto grad = torch::autograd::grad({scores.sum()}, {x}, {}, true, true)[0];
  return (grad.flatten(1).pow(2).sum(1) + 1e-12).sqrt();
}

}  // namespace histaug
