#include "clmae/losses.hpp"

#include <cmath>
#include <numbers>

#include "clmae/errors.hpp"
#include "clmae/log.hpp"

namespace clmae {

CurriculumSchedule::CurriculumSchedule(std::size_t total_steps, double lambda_final)
    : total_steps_(total_steps), lambda_final_(lambda_final) {
  if (total_steps == 0) throw DomainError("curriculum schedule needs at least one step");
  if (!(lambda_final >= -1.0 && lambda_final <= 1.0)) {
    throw DomainError("final curriculum weight " + std::to_string(lambda_final) +
                      " outside [-1, 1] (decay must lie in [0, 2/T])");
  }
}

CurriculumSchedule CurriculumSchedule::from_decay(std::size_t total_steps, double k) {
  return CurriculumSchedule(total_steps, 1.0 - k * static_cast<double>(total_steps));
}

double CurriculumSchedule::decay() const {
  return (1.0 - lambda_final_) / static_cast<double>(total_steps_);
}

double CurriculumSchedule::at(std::size_t t) const {
  if (t > total_steps_) {
    throw DomainError("curriculum step " + std::to_string(t) + " beyond T=" +
                      std::to_string(total_steps_));
  }
  // lerp is exact at both ends and monotone in between.
  return std::lerp(1.0, lambda_final_, static_cast<double>(t) / static_cast<double>(total_steps_));
}

void LossWeights::validate() const {
  if (gauss < 0 || kl < 0 || div < 0) throw ConfigError("loss weights must be non-negative");
  if (!(mask_ratio > 0 && mask_ratio < 1)) throw ConfigError("mask ratio must lie in (0, 1)");
  if (!(sigma > 0)) throw ConfigError("gaussian sigma must be positive");
}

template <typename T>
Tensor<T> per_patch_error(const Tensor<T>& prediction, const Tensor<T>& target, std::size_t images) {
  if (prediction.shape() != target.shape() || images == 0 || prediction.rows() % images != 0) {
    throw ShapeError("per_patch_error: prediction " + shape_string(prediction.shape()) +
                     " vs target " + shape_string(target.shape()) + " for " +
                     std::to_string(images) + " images");
  }
  Tensor<T> e = mean(square(sub(prediction, target)), 1);
  return reshape(e, {images, prediction.rows() / images});
}

template <typename T>
Tensor<T> curriculum_loss(const Tensor<T>& prediction, const Tensor<T>& target, const Tensor<T>& z,
                          T lambda, std::size_t* degenerate) {
  if (!(lambda >= T(-1) && lambda <= T(1))) {
    throw DomainError("curriculum_loss: lambda " + std::to_string(static_cast<double>(lambda)) +
                      " outside [-1, 1]");
  }
  const std::size_t images = z.rows();
  Tensor<T> err = per_patch_error(prediction, target, images);
  if (err.shape() != z.shape()) {
    throw ShapeError("curriculum_loss: masks " + shape_string(z.shape()) + " vs errors " +
                     shape_string(err.shape()));
  }
  Tensor<T> weight = add_scalar(neg(z), T(1));
  Tensor<T> num = sum(mul(weight, err), 1);
  Tensor<T> den = sum(weight, 1);

  std::vector<T> keep(images), pad(images);
  std::size_t bad = 0;
  for (std::size_t b = 0; b < images; ++b) {
    const bool ok = static_cast<double>(den.at(b)) >= kDegenerateWeight;
    keep[b] = ok ? T(1) : T(0);
    pad[b] = ok ? T(0) : T(1);
    bad += ok ? 0 : 1;
  }
  if (bad) warn("curriculum_loss: " + std::to_string(bad) + " all-visible proposal(s) scored as 0");
  if (degenerate) *degenerate = bad;
  Tensor<T> safe_den = add(den, Tensor<T>::from_vector({images}, pad));
  Tensor<T> ratio = mul(div(num, safe_den), Tensor<T>::from_vector({images}, keep));
  return mul_scalar(mean(ratio), lambda);
}

template <typename T>
Tensor<T> gaussian_loss(const Tensor<T>& z, T mu, T sigma) {
  const T norm = T(1) / (sigma * static_cast<T>(std::sqrt(2.0 * std::numbers::pi)));
  Tensor<T> d2 = square(add_scalar(z, -mu));
  return mul_scalar(mean(exp(mul_scalar(d2, T(-1) / (T(2) * sigma * sigma)))), norm);
}

template <typename T>
Tensor<T> kl_ratio_loss(const Tensor<T>& z, T ratio) {
  if (!(ratio > T(0) && ratio < T(1))) throw DomainError("kl_ratio_loss: ratio must lie in (0, 1)");
  const std::size_t n = z.cols();
  const T inv_n = T(1) / static_cast<T>(n);
  const T floor = static_cast<T>(kCountFloor);
  Tensor<T> visible = sum(z, z.rank() - 1);
  Tensor<T> masked = add_scalar(neg(visible), static_cast<T>(n));
  Tensor<T> p_masked = mul_scalar(clamp_min(masked, floor), inv_n);
  Tensor<T> p_visible = mul_scalar(clamp_min(visible, floor), inv_n);
  // ratio*log(ratio/p_m) + (1-ratio)*log((1-ratio)/p_v)
  const T constant = ratio * std::log(ratio) + (T(1) - ratio) * std::log(T(1) - ratio);
  Tensor<T> cross = add(mul_scalar(log(p_masked), ratio), mul_scalar(log(p_visible), T(1) - ratio));
  return add_scalar(neg(mean(cross)), constant);
}

template <typename T>
Tensor<T> diversity_loss(const Tensor<T>& z) {
  const std::size_t b = z.rows();
  if (b < 2) return Tensor<T>::scalar(T(0));
  const std::size_t pairs = b * (b - 1) / 2;
  std::vector<T> diff_op(pairs * b, T(0));
  std::size_t row = 0;
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = i + 1; j < b; ++j, ++row) {
      diff_op[row * b + i] = T(1);
      diff_op[row * b + j] = T(-1);
    }
  Tensor<T> diffs = matmul(Tensor<T>::from_vector({pairs, b}, std::move(diff_op)), z);
  Tensor<T> dist2 = sum(square(diffs), 1);
  return mean(exp(neg(dist2)));
}

template <typename T>
Tensor<T> joint_loss(const LossParts<T>& parts, const LossWeights& w) {
  const std::pair<const char*, const Tensor<T>*> named[] = {
      {"loss_cl", &parts.cl}, {"loss_gauss", &parts.gauss}, {"loss_kl", &parts.kl}, {"loss_div", &parts.div}};
  for (const auto& [name, t] : named) {
    if (!t->defined() || t->numel() != 1) throw ShapeError(std::string("joint_loss: ") + name + " is not a scalar");
    if (!std::isfinite(static_cast<double>(t->item()))) {
      throw NonFiniteLossError(name, std::string("non-finite ") + name + " = " +
                                         std::to_string(static_cast<double>(t->item())));
    }
  }
  Tensor<T> total = add(parts.cl, mul_scalar(parts.gauss, static_cast<T>(w.gauss)));
  total = add(total, mul_scalar(parts.kl, static_cast<T>(w.kl)));
  return add(total, mul_scalar(parts.div, static_cast<T>(w.div)));
}

#define CLMAE_INSTANTIATE_LOSSES(T)                                                       \
  template Tensor<T> per_patch_error(const Tensor<T>&, const Tensor<T>&, std::size_t);    \
  template Tensor<T> curriculum_loss(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T, \
                                     std::size_t*);                                       \
  template Tensor<T> gaussian_loss(const Tensor<T>&, T, T);                               \
  template Tensor<T> kl_ratio_loss(const Tensor<T>&, T);                                  \
  template Tensor<T> diversity_loss(const Tensor<T>&);                                    \
  template Tensor<T> joint_loss(const LossParts<T>&, const LossWeights&);

CLMAE_INSTANTIATE_LOSSES(float)
CLMAE_INSTANTIATE_LOSSES(double)

}  // namespace clmae
