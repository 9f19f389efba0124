#pragma once

// Run configuration and its plain-text `key = value` form.

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "clmae/checkpoint.hpp"
#include "clmae/geometry.hpp"
#include "clmae/losses.hpp"
#include "clmae/optim.hpp"

namespace clmae {

enum class Precision { f32, f64 };

struct TrainConfig {
  std::size_t steps = 3000;
  std::size_t batch_size = 32;
  double lr_mae = 1.5e-4;
  double lr_cmm = 1.5e-4;
  /// Negative = 5% of steps.
  long warmup_steps = -1;
  AdamWHyper adam;
  LossWeights losses;
  double lambda_final = -0.1;
  ModelGeometry geometry;
  std::uint64_t seed = 0;
  std::string dataset;
  std::string out = "run";
  std::size_t checkpoint_every = 500;
  /// Empty = {0, T/4, T/2, 3T/4, T}.
  std::vector<std::size_t> mask_dump_steps;
  std::size_t mask_dump_count = 8;
  Precision precision = Precision::f32;

  std::size_t warmup() const;
  std::vector<std::size_t> dump_steps() const;
  /// Throws ConfigError on the first invalid field.
  void validate() const;
};

/// Every recognised key, in canonical order.
const std::vector<std::string>& config_keys();

/// Sets one key from its text form. Throws ConfigError for unknown keys or
/// unparsable values.
void set_config_value(TrainConfig& config, std::string_view key, std::string_view value);
std::string get_config_value(const TrainConfig& config, std::string_view key);

/// Parses `key = value` lines onto `config`; '#' starts a comment, blank
/// lines are ignored. Errors name the line number.
void apply_config_text(TrainConfig& config, std::string_view text);
void apply_config_file(TrainConfig& config, const std::string& path);

/// Canonical text with every key, suitable for apply_config_text.
std::string format_config(const TrainConfig& config);

/// defaults < file text < overrides.
TrainConfig resolve_config(std::string_view file_text, const std::map<std::string, std::string>& overrides);

/// SHA-256 over the keys that influence the training trajectory (output
/// locations and dump settings are excluded).
Digest config_digest(const TrainConfig& config);

}  // namespace clmae
