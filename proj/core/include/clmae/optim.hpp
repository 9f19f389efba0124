#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "clmae/nn.hpp"

namespace clmae {

struct AdamWHyper {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

/// One decoupled-weight-decay Adam update of a single tensor. `step` is the
/// 1-based update count used for bias correction.
template <typename T>
void adamw_update(std::span<T> param, std::span<const T> grad, std::span<T> m, std::span<T> v,
                  std::size_t step, double lr, const AdamWHyper& hyper, bool decay);

/// Linear warmup over `warmup` steps, then half-cosine decay to zero at `total`.
double warmup_cosine_lr(std::size_t step, double base_lr, std::size_t warmup, std::size_t total);

/// AdamW over a fixed parameter list. Weight decay applies to tensors whose
/// name ends in ".weight" (projection matrices); biases, norms and tokens are
/// not decayed.
template <typename T>
class AdamW {
 public:
  AdamW() = default;
  AdamW(ParamList<T> params, AdamWHyper hyper);

  /// Applies one update from the accumulated gradients (missing gradients
  /// count as zero) and advances the step counter.
  void step(double lr);
  void zero_grad();

  const ParamList<T>& params() const { return params_; }
  std::size_t steps() const { return steps_; }
  void set_steps(std::size_t steps) { steps_ = steps; }
  const AdamWHyper& hyper() const { return hyper_; }

  std::vector<std::vector<T>>& first_moments() { return m_; }
  std::vector<std::vector<T>>& second_moments() { return v_; }
  const std::vector<std::vector<T>>& first_moments() const { return m_; }
  const std::vector<std::vector<T>>& second_moments() const { return v_; }

 private:
  ParamList<T> params_;
  AdamWHyper hyper_;
  std::vector<std::vector<T>> m_, v_;
  std::vector<bool> decay_;
  std::size_t steps_ = 0;
};

}  // namespace clmae
