#pragma once

// Two-step alternating training: each iteration first updates the MAE on
// the frozen masking module's hard masks, then updates the masking module
// through soft masks with the MAE frozen.

#include <cstddef>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "clmae/checkpoint.hpp"
#include "clmae/config.hpp"
#include "clmae/dataset.hpp"
#include "clmae/losses.hpp"
#include "clmae/mae.hpp"
#include "clmae/masking.hpp"
#include "clmae/optim.hpp"

namespace clmae {

enum class TrainMode {
  curriculum,  ///< learned masks
  baseline,    ///< uniform random masks at the configured ratio
};

template <typename T>
struct TrainState {
  TrainMode mode = TrainMode::curriculum;
  MaeParams<T> mae;
  CmmParams<T> cmm;  // unused in baseline mode
  AdamW<T> mae_opt, cmm_opt;
  std::size_t step = 0;  // next iteration to run
  Rng rng;
  std::vector<std::size_t> order;  // data order of the current pass
  std::size_t cursor = 0;
};

/// One row of the metrics log. Masking-module fields are empty in baseline
/// mode.
struct StepMetrics {
  std::size_t step = 0;
  double loss_mae = 0;
  std::size_t mask_fallback_count = 0;
  std::optional<double> lambda_cl, loss_cl, loss_gauss, loss_kl, loss_div, loss_joint, soft_mask_ratio;
};

inline constexpr const char* kMetricsHeader =
    "step,lambda_cl,loss_mae,loss_cl,loss_gauss,loss_kl,loss_div,loss_joint,soft_mask_ratio,mask_fallback_count";
std::string format_metrics_row(const StepMetrics& m);

/// Draw order from the seeded stream: data shuffle, then MAE init, then
/// masking-module init.
template <typename T>
TrainState<T> init_state(const TrainConfig& config, std::size_t dataset_size, TrainMode mode);

/// Next `batch` record indices; reshuffles from the state stream whenever a
/// pass is exhausted.
template <typename T>
std::vector<std::size_t> next_batch(TrainState<T>& state, std::size_t batch);

template <typename T>
PatchGrid<T> load_batch(const Dataset& data, std::span<const std::size_t> indices, std::size_t patch);

/// Uniformly random mask hiding round(ratio*n) patches (at least one, at
/// most n-1).
BinaryMask random_mask(std::size_t n, double ratio, Rng& rng);
/// Random masks hiding exactly as many patches as each reference mask.
std::vector<BinaryMask> random_masks_like(std::span<const BinaryMask> reference, Rng& rng);

/// Thresholds soft masks; images whose mask shows nothing or hides nothing
/// get a random mask instead. Returns the number of replacements.
std::size_t masks_with_fallback(const std::vector<SoftMask>& soft, double ratio, Rng& rng,
                                std::vector<BinaryMask>& out);

/// Masked-patch reconstruction loss of the current MAE, no graph recorded.
template <typename T>
double eval_recon_loss(const MaeParams<T>& mae, const PatchGrid<T>& grid, std::span<const BinaryMask> masks);

struct MaeStepResult {
  double loss = 0;
};

/// MAE update on given hard masks. The masking module is not touched.
/// Throws DegenerateMaskError when nothing is masked.
template <typename T>
MaeStepResult step_mae(TrainState<T>& state, const PatchGrid<T>& grid, const ReconTarget<T>& target,
                       std::span<const BinaryMask> masks, double lr);

struct CmmStepResult {
  double lambda = 0, cl = 0, gauss = 0, kl = 0, div = 0, joint = 0;
  double soft_mask_ratio = 0;
  std::size_t degenerate = 0;
};

/// Masking-module update with the MAE frozen. `z` may carry a forward pass
/// of the current module (images x n); when undefined it is computed here.
template <typename T>
CmmStepResult step_cmm(TrainState<T>& state, const PatchGrid<T>& grid, const ReconTarget<T>& target,
                       double lambda, const LossWeights& weights, double lr, Tensor<T> z = {});

/// One full iteration t = state.step: batch, step 1, step 2 (curriculum
/// mode), step counter advance.
template <typename T>
StepMetrics train_iteration(TrainState<T>& state, const Dataset& data, const TrainConfig& config);

template <typename T>
CheckpointData to_checkpoint(const TrainState<T>& state, const TrainConfig& config);
/// Restores into a state built by init_state with the same config. Throws
/// CheckpointError on digest, precision, mode or parameter mismatch.
template <typename T>
void restore_checkpoint(TrainState<T>& state, const TrainConfig& config, const CheckpointData& data);

template <typename T>
struct RunHooks {
  /// Called after every iteration with the state and the finished step index.
  std::function<void(const TrainState<T>&, std::size_t)> after_step;
  bool write_files = true;
};

template <typename T>
struct RunResult {
  TrainState<T> state;
  std::vector<StepMetrics> metrics;
};

/// Runs iterations state.step..T. Writes config.txt, metrics.csv,
/// ckpt_<n>.bin every `checkpoint_every` iterations, final.ckpt and mask
/// dumps under config.out when hooks.write_files is set. On resume, rows of
/// an existing metrics.csv from before the checkpoint are kept and later
/// ones dropped.
template <typename T>
RunResult<T> run_training(const TrainConfig& config, const Dataset& data, TrainMode mode, const RunHooks<T>& hooks = {},
                          const std::optional<CheckpointData>& resume = std::nullopt);

/// Hard masks of the current masking module for the given images (no
/// fallback applied).
template <typename T>
std::vector<BinaryMask> predict_masks(const CmmParams<T>& cmm, const PatchGrid<T>& grid, std::vector<SoftMask>* soft = nullptr);

}  // namespace clmae
