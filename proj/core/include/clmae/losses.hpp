#pragma once

// Objectives of the masking module and the signed curriculum schedule.
//
// All mask-valued arguments are images x n tensors of keep-visible
// probabilities (1 = visible). Every loss is a scalar tensor and
// differentiable with respect to its tensor inputs.

#include <cstddef>

#include "clmae/tensor.hpp"

namespace clmae {

/// Linear curriculum weight: lambda(0) = 1, lambda(t+1) = lambda(t) - k.
/// Stored by its endpoint so that lambda(T) is exactly the configured value.
class CurriculumSchedule {
 public:
  /// lambda_final = 1 - k*T must lie in [-1, 1], i.e. k in [0, 2/T].
  CurriculumSchedule(std::size_t total_steps, double lambda_final);
  static CurriculumSchedule from_decay(std::size_t total_steps, double k);

  std::size_t total_steps() const { return total_steps_; }
  double lambda_final() const { return lambda_final_; }
  double decay() const;
  /// Throws DomainError if t > T.
  double at(std::size_t t) const;

 private:
  std::size_t total_steps_;
  double lambda_final_;
};

inline double lambda_at(const CurriculumSchedule& schedule, std::size_t t) {
  return schedule.at(t);
}

struct LossWeights {
  double gauss = 10.0;
  double kl = 1.0;
  double div = 2.0;
  double mu = 0.5;
  double sigma = 0.12;
  double mask_ratio = 0.75;

  /// Weights must be non-negative here (zero is allowed for ablations).
  void validate() const;
};

inline constexpr double kCountFloor = 1e-8;
inline constexpr double kDegenerateWeight = 1e-6;

/// Mean squared error per patch row, reshaped to images x n.
template <typename T>
Tensor<T> per_patch_error(const Tensor<T>& prediction, const Tensor<T>& target, std::size_t images);

/// lambda * mean over images of sum_i (1-z_i) e_i / sum_i (1-z_i), where e_i is
/// the per-patch MSE. Images whose weight sum is below kDegenerateWeight
/// contribute 0; their number is written to `degenerate` when given.
template <typename T>
Tensor<T> curriculum_loss(const Tensor<T>& prediction, const Tensor<T>& target, const Tensor<T>& z,
                          T lambda, std::size_t* degenerate = nullptr);

/// Mean over all entries of N(z; mu, sigma^2) evaluated as a density.
template <typename T>
Tensor<T> gaussian_loss(const Tensor<T>& z, T mu = T(0.5), T sigma = T(0.12));

/// Two-bin KL(target || predicted) between the wanted masked/visible split
/// (ratio, 1-ratio) and the soft counts sum(1-z)/n, sum(z)/n, averaged over
/// images. Counts are floored at kCountFloor.
template <typename T>
Tensor<T> kl_ratio_loss(const Tensor<T>& z, T ratio = T(0.75));

/// Mean over unordered pairs of exp(-||z_a - z_b||^2); 0 for fewer than two
/// images.
template <typename T>
Tensor<T> diversity_loss(const Tensor<T>& z);

template <typename T>
struct LossParts {
  Tensor<T> cl, gauss, kl, div;
};

/// cl + w.gauss*gauss + w.kl*kl + w.div*div. Throws NonFiniteLossError naming
/// the first non-finite part.
template <typename T>
Tensor<T> joint_loss(const LossParts<T>& parts, const LossWeights& weights);

}  // namespace clmae
