#include "clmae/optim.hpp"

#include <cmath>
#include <numbers>

#include "clmae/errors.hpp"

namespace clmae {

template <typename T>
void adamw_update(std::span<T> param, std::span<const T> grad, std::span<T> m, std::span<T> v,
                  std::size_t step, double lr, const AdamWHyper& h, bool decay) {
  if (grad.size() != param.size() || m.size() != param.size() || v.size() != param.size()) {
    throw ShapeError("adamw_update: parameter, gradient and moment sizes differ");
  }
  if (step == 0) throw DomainError("adamw_update: step count is 1-based");
  const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(step));
  const T shrink = static_cast<T>(decay ? 1.0 - lr * h.weight_decay : 1.0);
  const T b1 = static_cast<T>(h.beta1), b2 = static_cast<T>(h.beta2);
  const T step_size = static_cast<T>(lr / c1);
  const T inv_c2 = static_cast<T>(1.0 / c2);
  const T eps = static_cast<T>(h.eps);
  for (std::size_t i = 0; i < param.size(); ++i) {
    const T g = grad[i];
    m[i] = b1 * m[i] + (T(1) - b1) * g;
    v[i] = b2 * v[i] + (T(1) - b2) * g * g;
    param[i] = param[i] * shrink - step_size * m[i] / (std::sqrt(v[i] * inv_c2) + eps);
  }
}

double warmup_cosine_lr(std::size_t step, double base_lr, std::size_t warmup, std::size_t total) {
  if (step < warmup) return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
  if (total <= warmup) return base_lr;
  const double progress =
      std::min(1.0, static_cast<double>(step - warmup) / static_cast<double>(total - warmup));
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

template <typename T>
AdamW<T>::AdamW(ParamList<T> params, AdamWHyper hyper) : params_(std::move(params)), hyper_(hyper) {
  for (const auto& p : params_) {
    m_.emplace_back(p.tensor.numel(), T(0));
    v_.emplace_back(p.tensor.numel(), T(0));
    decay_.push_back(p.name.ends_with(".weight"));
  }
}

template <typename T>
void AdamW<T>::step(double lr) {
  ++steps_;
  std::vector<T> zeros;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor<T>& t = params_[i].tensor;
    std::span<const T> g = t.grad();
    if (g.empty()) {
      zeros.assign(t.numel(), T(0));
      g = zeros;
    }
    adamw_update<T>(t.mutable_data(), g, m_[i], v_[i], steps_, lr, hyper_, decay_[i]);
  }
}

template <typename T>
void AdamW<T>::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

template void adamw_update<float>(std::span<float>, std::span<const float>, std::span<float>,
                                  std::span<float>, std::size_t, double, const AdamWHyper&, bool);
template void adamw_update<double>(std::span<double>, std::span<const double>, std::span<double>,
                                   std::span<double>, std::size_t, double, const AdamWHyper&, bool);
template class AdamW<float>;
template class AdamW<double>;

}  // namespace clmae
