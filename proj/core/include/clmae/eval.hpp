#pragma once

// Frozen-feature evaluation: nearest neighbour, linear probing and few-shot
// linear probing, each reporting Acc@1 and Acc@5 in percent.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "clmae/dataset.hpp"
#include "clmae/mae.hpp"

namespace clmae {

struct FeatureSet {
  std::size_t rows = 0, dim = 0;
  std::vector<double> features;  // rows x dim
  std::vector<std::size_t> labels;
  std::size_t classes = 0;

  const double* row(std::size_t i) const { return features.data() + i * dim; }
  /// Throws ShapeError when sizes disagree or a label is out of range.
  void validate() const;
  FeatureSet subset(const std::vector<std::size_t>& indices) const;
};

/// Encoder output over all tokens (no masking), mean of the n patch tokens
/// (CLS excluded). Images are processed `batch` at a time.
template <typename T>
FeatureSet extract_features(const MaeParams<T>& encoder, const Dataset& data, std::size_t patch,
                            std::size_t batch = 64);

/// Raw pixels in [0, 1] as features.
FeatureSet pixel_features(const Dataset& data);

struct ProbeResult {
  std::string protocol;  // "nn", "linear", "fewshot"
  std::optional<std::size_t> shots;
  double acc1 = 0, acc5 = 0;
  std::vector<double> run_acc1, run_acc5;
  std::vector<std::uint64_t> seeds;
};

/// Brute-force Euclidean neighbours, ties broken by lower train index.
/// Acc@5: the true label is among the labels of the 5 nearest neighbours.
ProbeResult nn_classify(const FeatureSet& train, const FeatureSet& test, std::size_t kmax = 5);

struct ProbeOptions {
  std::size_t epochs = 100;
  double lr = 0.01;
  std::uint64_t seed = 0;
  std::size_t runs = 3;
};

/// Softmax layer on standardised frozen features, full-batch AdamW (no weight
/// decay); mean over `runs` runs seeded seed, seed+1, ...
ProbeResult linear_probe(const FeatureSet& train, const FeatureSet& test, const ProbeOptions& options = {});

/// Per run, draws k training rows per class (seeded), then trains one probe
/// with that run's seed. Throws DatasetError naming a class with < k rows.
ProbeResult few_shot_probe(const FeatureSet& train, const FeatureSet& test, std::size_t k,
                           const ProbeOptions& options = {});

/// Rows sampled by few_shot_probe for one run (ascending index order).
std::vector<std::size_t> few_shot_indices(const FeatureSet& train, std::size_t k, std::uint64_t seed);

inline constexpr const char* kResultsHeader = "protocol,backbone,k,acc1,acc5,seeds";
std::string format_result_row(const ProbeResult& r, const std::string& backbone);

}  // namespace clmae
