#include "clmae/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>

#include "clmae/errors.hpp"
#include "clmae/log.hpp"
#include "clmae/optim.hpp"

namespace clmae {

namespace {

// Indices of the `k` largest scores, ties to the lower index.
std::vector<std::size_t> top_k(const std::vector<double>& scores, std::size_t k) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  k = std::min(k, idx.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) { return scores[a] > scores[b] || (scores[a] == scores[b] && a < b); });
  idx.resize(k);
  return idx;
}

void check_compatible(const FeatureSet& train, const FeatureSet& test) {
  train.validate();
  test.validate();
  if (train.rows == 0) throw ShapeError("evaluation needs a non-empty training set");
  if (train.dim != test.dim) {
    throw ShapeError("train features have width " + std::to_string(train.dim) + ", test features " + std::to_string(test.dim));
  }
}

struct Standardizer {
  std::vector<double> mean, inv_std;
};

Standardizer fit_standardizer(const FeatureSet& f) {
  Standardizer s{std::vector<double>(f.dim, 0.0), std::vector<double>(f.dim, 0.0)};
  for (std::size_t r = 0; r < f.rows; ++r)
    for (std::size_t j = 0; j < f.dim; ++j) s.mean[j] += f.row(r)[j];
  for (auto& m : s.mean) m /= static_cast<double>(f.rows);
  for (std::size_t r = 0; r < f.rows; ++r)
    for (std::size_t j = 0; j < f.dim; ++j) {
      const double d = f.row(r)[j] - s.mean[j];
      s.inv_std[j] += d * d;
    }
  for (auto& v : s.inv_std) v = 1.0 / std::sqrt(v / static_cast<double>(f.rows) + 1e-8);
  return s;
}

std::vector<double> standardize(const FeatureSet& f, const Standardizer& s) {
  std::vector<double> out(f.features.size());
  for (std::size_t r = 0; r < f.rows; ++r)
    for (std::size_t j = 0; j < f.dim; ++j) out[r * f.dim + j] = (f.row(r)[j] - s.mean[j]) * s.inv_std[j];
  return out;
}

struct RunAccuracy {
  double acc1, acc5;
};

// One softmax-regression probe: W (dim x classes), b (classes).
RunAccuracy train_probe(const FeatureSet& train, const FeatureSet& test, const ProbeOptions& o, std::uint64_t seed) {
  const std::size_t d = train.dim, c = std::max(train.classes, test.classes), n = train.rows;
  const auto std_fit = fit_standardizer(train);
  const auto x = standardize(train, std_fit);
  const auto xt = standardize(test, std_fit);

  Rng rng(seed);
  std::normal_distribution<double> init(0.0, 0.01);
  std::vector<double> w(d * c), b(c, 0.0), gw(d * c), gb(c);
  for (auto& v : w) v = init(rng);
  std::vector<double> mw(w.size(), 0.0), vw(w.size(), 0.0), mb(c, 0.0), vb(c, 0.0);
  AdamWHyper hyper;
  hyper.weight_decay = 0.0;
  std::vector<double> logits(c);

  for (std::size_t epoch = 0; epoch < o.epochs; ++epoch) {
    std::fill(gw.begin(), gw.end(), 0.0);
    std::fill(gb.begin(), gb.end(), 0.0);
    for (std::size_t r = 0; r < n; ++r) {
      const double* xr = x.data() + r * d;
      for (std::size_t k = 0; k < c; ++k) logits[k] = b[k];
      for (std::size_t j = 0; j < d; ++j)
        for (std::size_t k = 0; k < c; ++k) logits[k] += xr[j] * w[j * c + k];
      const double mx = *std::max_element(logits.begin(), logits.end());
      double total = 0;
      for (auto& l : logits) total += (l = std::exp(l - mx));
      for (std::size_t k = 0; k < c; ++k) {
        const double g = (logits[k] / total - (k == train.labels[r] ? 1.0 : 0.0)) / static_cast<double>(n);
        gb[k] += g;
        for (std::size_t j = 0; j < d; ++j) gw[j * c + k] += xr[j] * g;
      }
    }
    adamw_update<double>(w, gw, mw, vw, epoch + 1, o.lr, hyper, false);
    adamw_update<double>(b, gb, mb, vb, epoch + 1, o.lr, hyper, false);
  }

  std::size_t hit1 = 0, hit5 = 0;
  std::vector<double> scores(c);
  for (std::size_t r = 0; r < test.rows; ++r) {
    const double* xr = xt.data() + r * d;
    for (std::size_t k = 0; k < c; ++k) scores[k] = b[k];
    for (std::size_t j = 0; j < d; ++j)
      for (std::size_t k = 0; k < c; ++k) scores[k] += xr[j] * w[j * c + k];
    const auto top = top_k(scores, 5);
    hit1 += top[0] == test.labels[r];
    hit5 += std::find(top.begin(), top.end(), test.labels[r]) != top.end();
  }
  const double denom = static_cast<double>(std::max<std::size_t>(test.rows, 1));
  return {100.0 * static_cast<double>(hit1) / denom, 100.0 * static_cast<double>(hit5) / denom};
}

void finish_average(ProbeResult& r) {
  r.acc1 = std::accumulate(r.run_acc1.begin(), r.run_acc1.end(), 0.0) / static_cast<double>(r.run_acc1.size());
  r.acc5 = std::accumulate(r.run_acc5.begin(), r.run_acc5.end(), 0.0) / static_cast<double>(r.run_acc5.size());
}

std::size_t distinct_labels(const FeatureSet& f) {
  std::vector<std::size_t> l = f.labels;
  std::sort(l.begin(), l.end());
  return static_cast<std::size_t>(std::unique(l.begin(), l.end()) - l.begin());
}

}  // namespace

void FeatureSet::validate() const {
  if (features.size() != rows * dim) {
    throw ShapeError("feature set holds " + std::to_string(features.size()) + " values for " + std::to_string(rows) +
                     " rows of width " + std::to_string(dim));
  }
  if (labels.size() != rows) throw ShapeError("feature set has " + std::to_string(labels.size()) + " labels for " + std::to_string(rows) + " rows");
  for (std::size_t l : labels) {
    if (l >= classes) throw ShapeError("label " + std::to_string(l) + " outside " + std::to_string(classes) + " classes");
  }
}

FeatureSet FeatureSet::subset(const std::vector<std::size_t>& indices) const {
  FeatureSet out;
  out.dim = dim;
  out.classes = classes;
  out.rows = indices.size();
  for (std::size_t i : indices) {
    out.features.insert(out.features.end(), row(i), row(i) + dim);
    out.labels.push_back(labels[i]);
  }
  return out;
}

template <typename T>
FeatureSet extract_features(const MaeParams<T>& encoder, const Dataset& data, std::size_t patch, std::size_t batch) {
  if (patch == 0 || data.h % patch != 0 || data.w % patch != 0) {
    throw ShapeError("images " + std::to_string(data.h) + "x" + std::to_string(data.w) + " do not tile into patches of " + std::to_string(patch));
  }
  const std::size_t n = (data.h / patch) * (data.w / patch);
  if (n != encoder.num_patches() || patch * patch * data.c != encoder.patch_embed.in_features()) {
    throw ShapeError("encoder expects " + std::to_string(encoder.num_patches()) + " patches of " +
                     std::to_string(encoder.patch_embed.in_features()) + " values, dataset gives " + std::to_string(n) +
                     " of " + std::to_string(patch * patch * data.c));
  }
  NoGradGuard no_grad;
  FeatureSet f;
  f.dim = encoder.patch_embed.out_features();
  f.classes = data.classes;
  f.rows = data.count();
  f.features.reserve(f.rows * f.dim);
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.count(); start += batch) {
    idx.resize(std::min(batch, data.count() - start));
    std::iota(idx.begin(), idx.end(), start);
    const auto grid = patchify(data.images<T>(idx), patch);
    const auto latent = encode(mae_embed(grid, encoder), encoder);
    const auto& t = latent.tokens;
    for (const auto& g : latent.groups) {
      std::vector<double> acc(f.dim, 0.0);
      for (std::size_t r = g.offset + 1; r < g.offset + g.count; ++r)
        for (std::size_t j = 0; j < f.dim; ++j) acc[j] += static_cast<double>(t.at(r, j));
      for (auto& a : acc) a /= static_cast<double>(g.count - 1);
      f.features.insert(f.features.end(), acc.begin(), acc.end());
    }
  }
  for (std::size_t i = 0; i < data.count(); ++i) f.labels.push_back(data.labels[i]);
  return f;
}

template FeatureSet extract_features<float>(const MaeParams<float>&, const Dataset&, std::size_t, std::size_t);
template FeatureSet extract_features<double>(const MaeParams<double>&, const Dataset&, std::size_t, std::size_t);

FeatureSet pixel_features(const Dataset& data) {
  FeatureSet f;
  f.rows = data.count();
  f.dim = data.image_bytes();
  f.classes = data.classes;
  f.features.reserve(data.pixels.size());
  for (auto p : data.pixels) f.features.push_back(static_cast<double>(p) / 255.0);
  f.labels.assign(data.labels.begin(), data.labels.end());
  return f;
}

ProbeResult nn_classify(const FeatureSet& train, const FeatureSet& test, std::size_t kmax) {
  check_compatible(train, test);
  if (kmax == 0) throw DomainError("nn_classify: kmax must be positive");
  if (train.rows < kmax) {
    warn("nn_classify: only " + std::to_string(train.rows) + " training rows; Acc@" + std::to_string(kmax) +
         " uses all of them");
  }
  const std::size_t k = std::min(kmax, train.rows);
  ProbeResult r;
  r.protocol = "nn";
  std::size_t hit1 = 0, hitk = 0;
  std::vector<double> dist(train.rows);
  std::vector<std::size_t> order(train.rows);
  for (std::size_t q = 0; q < test.rows; ++q) {
    const double* a = test.row(q);
    for (std::size_t i = 0; i < train.rows; ++i) {
      const double* b = train.row(i);
      double s = 0;
      for (std::size_t j = 0; j < train.dim; ++j) {
        const double diff = a[j] - b[j];
        s += diff * diff;
      }
      dist[i] = s;
    }
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [&](std::size_t x, std::size_t y) { return dist[x] < dist[y] || (dist[x] == dist[y] && x < y); });
    hit1 += train.labels[order[0]] == test.labels[q];
    bool found = false;
    for (std::size_t i = 0; i < k; ++i) found = found || train.labels[order[i]] == test.labels[q];
    hitk += found;
  }
  const double denom = static_cast<double>(std::max<std::size_t>(test.rows, 1));
  r.acc1 = 100.0 * static_cast<double>(hit1) / denom;
  r.acc5 = 100.0 * static_cast<double>(hitk) / denom;
  r.run_acc1 = {r.acc1};
  r.run_acc5 = {r.acc5};
  return r;
}

ProbeResult linear_probe(const FeatureSet& train, const FeatureSet& test, const ProbeOptions& options) {
  check_compatible(train, test);
  if (distinct_labels(train) < 2) throw DatasetError("linear probe needs at least two classes in the training set");
  if (options.runs == 0) throw DomainError("linear probe needs at least one run");
  ProbeResult r;
  r.protocol = "linear";
  for (std::size_t run = 0; run < options.runs; ++run) {
    const std::uint64_t seed = options.seed + run;
    const auto acc = train_probe(train, test, options, seed);
    r.run_acc1.push_back(acc.acc1);
    r.run_acc5.push_back(acc.acc5);
    r.seeds.push_back(seed);
  }
  finish_average(r);
  return r;
}

std::vector<std::size_t> few_shot_indices(const FeatureSet& train, std::size_t k, std::uint64_t seed) {
  if (k == 0) throw DomainError("few-shot probing needs k >= 1");
  std::vector<std::vector<std::size_t>> by_class(train.classes);
  for (std::size_t i = 0; i < train.rows; ++i) by_class[train.labels[i]].push_back(i);
  for (std::size_t c = 0; c < train.classes; ++c) {
    if (!by_class[c].empty() && by_class[c].size() < k) {
      throw DatasetError("class " + std::to_string(c) + " has " + std::to_string(by_class[c].size()) +
                         " training samples, fewer than k=" + std::to_string(k));
    }
  }
  // Separate stream from the probe initialisation.
  Rng rng(seed ^ 0x5eed5a3b1e5ULL);
  std::vector<std::size_t> picked;
  for (auto& members : by_class) {
    if (members.empty()) continue;
    std::shuffle(members.begin(), members.end(), rng);
    picked.insert(picked.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(k));
  }
  std::sort(picked.begin(), picked.end());
  return picked;
}

ProbeResult few_shot_probe(const FeatureSet& train, const FeatureSet& test, std::size_t k, const ProbeOptions& options) {
  check_compatible(train, test);
  if (options.runs == 0) throw DomainError("few-shot probing needs at least one run");
  ProbeResult r;
  r.protocol = "fewshot";
  r.shots = k;
  for (std::size_t run = 0; run < options.runs; ++run) {
    const std::uint64_t seed = options.seed + run;
    const auto sub = train.subset(few_shot_indices(train, k, seed));
    if (distinct_labels(sub) < 2) throw DatasetError("few-shot probe needs at least two classes");
    const auto acc = train_probe(sub, test, options, seed);
    r.run_acc1.push_back(acc.acc1);
    r.run_acc5.push_back(acc.acc5);
    r.seeds.push_back(seed);
  }
  finish_average(r);
  return r;
}

std::string format_result_row(const ProbeResult& r, const std::string& backbone) {
  char acc[64];
  std::snprintf(acc, sizeof(acc), "%.6f,%.6f", r.acc1, r.acc5);
  std::string seeds;
  for (std::size_t i = 0; i < r.seeds.size(); ++i) seeds += (i ? ";" : "") + std::to_string(r.seeds[i]);
  std::string tag = backbone;
  std::replace(tag.begin(), tag.end(), ',', '_');
  return r.protocol + "," + tag + "," + (r.shots ? std::to_string(*r.shots) : std::string()) + "," + acc + "," + seeds;
}

}  // namespace clmae
