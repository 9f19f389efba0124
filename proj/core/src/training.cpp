#include "clmae/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "clmae/errors.hpp"
#include "clmae/log.hpp"

namespace clmae {

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : std::string(); }

template <typename T>
class FreezeGuard {
 public:
  explicit FreezeGuard(ParamList<T> params) : params_(std::move(params)) {
    for (auto& p : params_) p.tensor.set_requires_grad(false);
  }
  ~FreezeGuard() {
    for (auto& p : params_) p.tensor.set_requires_grad(true);
  }
  FreezeGuard(const FreezeGuard&) = delete;
  FreezeGuard& operator=(const FreezeGuard&) = delete;

 private:
  ParamList<T> params_;
};

void check_finite(const char* term, double v) {
  if (!std::isfinite(v)) throw NonFiniteLossError(term, std::string("non-finite ") + term + " = " + fmt(v));
}

template <typename T>
std::vector<TensorRecord> to_records(const ParamList<T>& params) {
  std::vector<TensorRecord> out;
  for (const auto& p : params) {
    out.push_back({p.name, p.tensor.shape(), std::vector<double>(p.tensor.data().begin(), p.tensor.data().end())});
  }
  return out;
}

template <typename T>
void append_moments(std::vector<TensorRecord>& out, const std::string& prefix, const AdamW<T>& opt) {
  const auto& params = opt.params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& m = opt.first_moments()[i];
    const auto& v = opt.second_moments()[i];
    out.push_back({prefix + ".m:" + params[i].name, params[i].tensor.shape(), std::vector<double>(m.begin(), m.end())});
    out.push_back({prefix + ".v:" + params[i].name, params[i].tensor.shape(), std::vector<double>(v.begin(), v.end())});
  }
}

const TensorRecord& find_record(const std::vector<TensorRecord>& table, const std::string& name, const Shape& shape) {
  for (const auto& r : table) {
    if (r.name != name) continue;
    if (r.shape != shape) {
      throw CheckpointError("checkpoint tensor " + name + " has shape " + shape_string(r.shape) + ", model expects " +
                            shape_string(shape));
    }
    return r;
  }
  throw CheckpointError("checkpoint lacks tensor " + name);
}

template <typename T>
void copy_into(std::span<T> dst, const TensorRecord& r) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(r.values[i]);
}

template <typename T>
void restore_params(ParamList<T> params, const std::vector<TensorRecord>& table) {
  for (auto& p : params) copy_into(p.tensor.mutable_data(), find_record(table, p.name, p.tensor.shape()));
}

template <typename T>
void restore_moments(AdamW<T>& opt, const std::string& prefix, const std::vector<TensorRecord>& table, std::size_t steps) {
  const auto& params = opt.params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    copy_into(std::span<T>(opt.first_moments()[i]), find_record(table, prefix + ".m:" + params[i].name, params[i].tensor.shape()));
    copy_into(std::span<T>(opt.second_moments()[i]), find_record(table, prefix + ".v:" + params[i].name, params[i].tensor.shape()));
  }
  opt.set_steps(steps);
}

std::string encode_rng(const Rng& rng, std::size_t cursor, const std::vector<std::size_t>& order) {
  std::ostringstream os;
  os << rng << '\n' << cursor << '\n' << order.size();
  for (std::size_t i : order) os << ' ' << i;
  return os.str();
}

void decode_rng(const std::string& blob, Rng& rng, std::size_t& cursor, std::vector<std::size_t>& order) {
  std::istringstream is(blob);
  std::size_t count = 0;
  is >> rng >> cursor >> count;
  order.resize(count);
  for (auto& i : order) is >> i;
  if (!is || cursor > count) throw CheckpointError("checkpoint RNG state is malformed");
}

template <typename T>
void dump_masks_at(const TrainState<T>& state, const Dataset& data, const TrainConfig& config, std::size_t t) {
  const std::size_t count = std::min(config.mask_dump_count, data.count());
  if (count == 0) return;
  std::vector<std::size_t> idx(count);
  std::iota(idx.begin(), idx.end(), 0);
  const auto grid = load_batch<T>(data, idx, config.geometry.patch);
  const auto masks = predict_masks(state.cmm, grid);
  const auto dir = std::filesystem::path(config.out) / "masks";
  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < count; ++i) {
    write_mask_pgm(dir / mask_filename(t, i), masks[i], grid.grid_h(), grid.grid_w(), grid.p);
  }
}

}  // namespace

std::string format_metrics_row(const StepMetrics& m) {
  return std::to_string(m.step) + "," + fmt(m.lambda_cl) + "," + fmt(m.loss_mae) + "," + fmt(m.loss_cl) + "," +
         fmt(m.loss_gauss) + "," + fmt(m.loss_kl) + "," + fmt(m.loss_div) + "," + fmt(m.loss_joint) + "," +
         fmt(m.soft_mask_ratio) + "," + std::to_string(m.mask_fallback_count);
}

template <typename T>
TrainState<T> init_state(const TrainConfig& config, std::size_t dataset_size, TrainMode mode) {
  config.validate();
  if (dataset_size == 0) throw DatasetError("training needs a non-empty dataset");
  TrainState<T> s;
  s.mode = mode;
  s.rng.seed(config.seed);
  s.order.resize(dataset_size);
  std::iota(s.order.begin(), s.order.end(), 0);
  std::shuffle(s.order.begin(), s.order.end(), s.rng);
  s.mae = make_mae<T>(config.geometry, s.rng);
  s.mae_opt = AdamW<T>(s.mae.parameters(), config.adam);
  if (mode == TrainMode::curriculum) {
    s.cmm = make_cmm<T>(config.geometry, s.rng);
    s.cmm_opt = AdamW<T>(s.cmm.parameters(), config.adam);
  }
  return s;
}

template <typename T>
std::vector<std::size_t> next_batch(TrainState<T>& state, std::size_t batch) {
  std::vector<std::size_t> out;
  out.reserve(batch);
  while (out.size() < batch) {
    if (state.cursor == state.order.size()) {
      std::shuffle(state.order.begin(), state.order.end(), state.rng);
      state.cursor = 0;
    }
    out.push_back(state.order[state.cursor++]);
  }
  return out;
}

template <typename T>
PatchGrid<T> load_batch(const Dataset& data, std::span<const std::size_t> indices, std::size_t patch) {
  return patchify(data.images<T>(indices), patch);
}

BinaryMask random_mask(std::size_t n, double ratio, Rng& rng) {
  if (n < 2) throw DegenerateMaskError("random mask needs at least two patches");
  const auto masked = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(ratio * static_cast<double>(n))), 1, n - 1);
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  BinaryMask m{std::vector<std::uint8_t>(n, 1)};
  for (std::size_t i = 0; i < masked; ++i) m.visible[perm[i]] = 0;
  return m;
}

std::vector<BinaryMask> random_masks_like(std::span<const BinaryMask> reference, Rng& rng) {
  std::vector<BinaryMask> out;
  for (const auto& ref : reference) {
    const std::size_t n = ref.size();
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    BinaryMask m{std::vector<std::uint8_t>(n, 1)};
    for (std::size_t i = 0; i < ref.count_masked(); ++i) m.visible[perm[i]] = 0;
    out.push_back(std::move(m));
  }
  return out;
}

std::size_t masks_with_fallback(const std::vector<SoftMask>& soft, double ratio, Rng& rng,
                                std::vector<BinaryMask>& out) {
  out = threshold(soft);
  std::size_t fallbacks = 0;
  for (auto& m : out) {
    if (m.count_visible() == 0 || m.count_masked() == 0) {
      m = random_mask(m.size(), ratio, rng);
      ++fallbacks;
    }
  }
  return fallbacks;
}

template <typename T>
std::vector<BinaryMask> predict_masks(const CmmParams<T>& cmm, const PatchGrid<T>& grid, std::vector<SoftMask>* soft) {
  NoGradGuard no_grad;
  auto z = to_soft_masks(cmm_forward(grid, cmm));
  auto masks = threshold(z);
  if (soft) *soft = std::move(z);
  return masks;
}

template <typename T>
double eval_recon_loss(const MaeParams<T>& mae, const PatchGrid<T>& grid, std::span<const BinaryMask> masks) {
  NoGradGuard no_grad;
  const auto target = normalize_target(grid);
  const auto sel = select_visible(mae_embed(grid, mae), masks);
  const auto pred = decode(encode(sel.tokens, mae), sel.map, mae);
  return static_cast<double>(recon_loss(pred, target, masks).item());
}

template <typename T>
MaeStepResult step_mae(TrainState<T>& state, const PatchGrid<T>& grid, const ReconTarget<T>& target,
                       std::span<const BinaryMask> masks, double lr) {
  const auto sel = select_visible(mae_embed(grid, state.mae), masks);
  const auto pred = decode(encode(sel.tokens, state.mae), sel.map, state.mae);
  const auto loss = recon_loss(pred, target, masks);
  const double value = static_cast<double>(loss.item());
  check_finite("loss_mae", value);
  state.mae_opt.zero_grad();
  loss.backward();
  state.mae_opt.step(lr);
  state.mae_opt.zero_grad();
  return {value};
}

template <typename T>
CmmStepResult step_cmm(TrainState<T>& state, const PatchGrid<T>& grid, const ReconTarget<T>& target,
                       double lambda, const LossWeights& weights, double lr, Tensor<T> z) {
  if (state.mode != TrainMode::curriculum) throw ConfigError("step_cmm needs a masking module");
  FreezeGuard<T> freeze(state.mae.parameters());
  if (!z.defined()) z = cmm_forward(grid, state.cmm);
  const auto soft = apply_soft_mask(mae_embed(grid, state.mae), z);
  const auto pred = decode(encode(soft, state.mae), full_index_map(grid.images, grid.n()), state.mae);

  CmmStepResult r;
  r.lambda = lambda;
  LossParts<T> parts;
  parts.cl = curriculum_loss(pred, target.target, z, static_cast<T>(lambda), &r.degenerate);
  parts.gauss = gaussian_loss(z, static_cast<T>(weights.mu), static_cast<T>(weights.sigma));
  parts.kl = kl_ratio_loss(z, static_cast<T>(weights.mask_ratio));
  parts.div = diversity_loss(z);
  const auto total = joint_loss(parts, weights);
  r.cl = static_cast<double>(parts.cl.item());
  r.gauss = static_cast<double>(parts.gauss.item());
  r.kl = static_cast<double>(parts.kl.item());
  r.div = static_cast<double>(parts.div.item());
  r.joint = static_cast<double>(total.item());
  check_finite("loss_joint", r.joint);
  double visible = 0;
  for (T v : z.data()) visible += static_cast<double>(v);
  r.soft_mask_ratio = 1.0 - visible / static_cast<double>(z.numel());

  state.cmm_opt.zero_grad();
  total.backward();
  state.cmm_opt.step(lr);
  state.cmm_opt.zero_grad();
  return r;
}

template <typename T>
StepMetrics train_iteration(TrainState<T>& state, const Dataset& data, const TrainConfig& config) {
  const std::size_t t = state.step;
  if (t > config.steps) throw ConfigError("iteration " + std::to_string(t) + " beyond steps=" + std::to_string(config.steps));
  const auto indices = next_batch(state, config.batch_size);
  const auto grid = load_batch<T>(data, indices, config.geometry.patch);
  const auto target = normalize_target(grid);
  const std::size_t total = config.steps + 1;
  const std::size_t warmup = config.warmup();

  StepMetrics m;
  m.step = t;
  std::vector<BinaryMask> masks;
  Tensor<T> z;
  if (state.mode == TrainMode::curriculum) {
    // The module is unchanged by step 1, so one forward serves both steps.
    z = cmm_forward(grid, state.cmm);
    m.mask_fallback_count = masks_with_fallback(to_soft_masks(z), config.losses.mask_ratio, state.rng, masks);
  } else {
    for (std::size_t b = 0; b < grid.images; ++b) masks.push_back(random_mask(grid.n(), config.losses.mask_ratio, state.rng));
  }
  m.loss_mae = step_mae(state, grid, target, masks, warmup_cosine_lr(t, config.lr_mae, warmup, total)).loss;

  if (state.mode == TrainMode::curriculum) {
    const CurriculumSchedule schedule(config.steps, config.lambda_final);
    const auto r = step_cmm(state, grid, target, schedule.at(t), config.losses,
                            warmup_cosine_lr(t, config.lr_cmm, warmup, total), z);
    m.lambda_cl = r.lambda;
    m.loss_cl = r.cl;
    m.loss_gauss = r.gauss;
    m.loss_kl = r.kl;
    m.loss_div = r.div;
    m.loss_joint = r.joint;
    m.soft_mask_ratio = r.soft_mask_ratio;
  }
  ++state.step;
  return m;
}

template <typename T>
CheckpointData to_checkpoint(const TrainState<T>& state, const TrainConfig& config) {
  CheckpointData d;
  d.f64 = sizeof(T) == 8;
  d.config_digest = config_digest(config);
  d.params = to_records(state.mae.parameters());
  append_moments(d.moments, "mae_opt", state.mae_opt);
  if (state.mode == TrainMode::curriculum) {
    auto cmm = to_records(state.cmm.parameters());
    d.params.insert(d.params.end(), cmm.begin(), cmm.end());
    append_moments(d.moments, "cmm_opt", state.cmm_opt);
  }
  d.step = state.step;
  d.rng_state = encode_rng(state.rng, state.cursor, state.order);
  return d;
}

template <typename T>
void restore_checkpoint(TrainState<T>& state, const TrainConfig& config, const CheckpointData& data) {
  if (data.config_digest != config_digest(config)) {
    throw CheckpointError("checkpoint was written under a different configuration (digest " +
                          digest_hex(data.config_digest) + ", current " + digest_hex(config_digest(config)) + ")");
  }
  if (data.f64 != (sizeof(T) == 8)) throw CheckpointError("checkpoint precision differs from the requested precision");
  const bool has_cmm = std::any_of(data.params.begin(), data.params.end(),
                                   [](const TensorRecord& r) { return r.name.starts_with("cmm."); });
  if (has_cmm != (state.mode == TrainMode::curriculum)) {
    throw CheckpointError(has_cmm ? "checkpoint holds a masking module but a baseline run was requested"
                                  : "checkpoint holds no masking module but a curriculum run was requested");
  }
  if (data.step > config.steps + 1) throw CheckpointError("checkpoint step " + std::to_string(data.step) + " beyond the run");
  restore_params(state.mae.parameters(), data.params);
  restore_moments(state.mae_opt, "mae_opt", data.moments, data.step);
  if (has_cmm) {
    restore_params(state.cmm.parameters(), data.params);
    restore_moments(state.cmm_opt, "cmm_opt", data.moments, data.step);
  }
  state.step = data.step;
  decode_rng(data.rng_state, state.rng, state.cursor, state.order);
}

template <typename T>
RunResult<T> run_training(const TrainConfig& config, const Dataset& data, TrainMode mode, const RunHooks<T>& hooks,
                          const std::optional<CheckpointData>& resume) {
  if (data.h != config.geometry.image_h || data.w != config.geometry.image_w || data.c != config.geometry.channels) {
    throw ConfigError("dataset images are " + std::to_string(data.h) + "x" + std::to_string(data.w) + "x" +
                      std::to_string(data.c) + " but the model expects " + std::to_string(config.geometry.image_h) +
                      "x" + std::to_string(config.geometry.image_w) + "x" + std::to_string(config.geometry.channels));
  }
  RunResult<T> result{init_state<T>(config, data.count(), mode), {}};
  TrainState<T>& state = result.state;
  if (resume) restore_checkpoint(state, config, *resume);

  const std::filesystem::path out(config.out);
  std::ofstream csv;
  if (hooks.write_files) {
    std::filesystem::create_directories(out);
    {
      std::ofstream cfg(out / "config.txt");
      cfg << format_config(config);
    }
    // A resumed run keeps the rows logged before its checkpoint, so the final
    // file matches an uninterrupted run.
    std::vector<std::string> kept;
    if (resume) {
      std::ifstream old(out / "metrics.csv");
      std::string line;
      if (std::getline(old, line) && line == kMetricsHeader) {
        while (std::getline(old, line)) {
          if (!line.empty() && std::stoull(line.substr(0, line.find(','))) < state.step) kept.push_back(line);
        }
      }
    }
    csv.open(out / "metrics.csv");
    if (!csv) throw ConfigError("cannot write " + (out / "metrics.csv").string());
    csv << kMetricsHeader << '\n';
    for (const auto& line : kept) csv << line << '\n';
  }
  const auto dumps = config.dump_steps();

  while (state.step <= config.steps) {
    const std::size_t t = state.step;
    if (hooks.write_files && mode == TrainMode::curriculum && std::find(dumps.begin(), dumps.end(), t) != dumps.end()) {
      dump_masks_at(state, data, config, t);
    }
    auto m = train_iteration(state, data, config);
    if (m.mask_fallback_count) {
      warn("step " + std::to_string(t) + ": " + std::to_string(m.mask_fallback_count) + " degenerate mask(s) replaced by random masks");
    }
    if (hooks.write_files) {
      csv << format_metrics_row(m) << '\n';
      if (state.step % config.checkpoint_every == 0) {
        csv.flush();
        save_checkpoint(out / ("ckpt_" + std::to_string(state.step) + ".bin"), to_checkpoint(state, config));
      }
    }
    result.metrics.push_back(std::move(m));
    if (hooks.after_step) hooks.after_step(state, t);
  }
  if (hooks.write_files) save_checkpoint(out / "final.ckpt", to_checkpoint(state, config));
  return result;
}

#define CLMAE_INSTANTIATE_TRAINING(T)                                                                           \
  template TrainState<T> init_state<T>(const TrainConfig&, std::size_t, TrainMode);                             \
  template std::vector<std::size_t> next_batch<T>(TrainState<T>&, std::size_t);                                 \
  template PatchGrid<T> load_batch<T>(const Dataset&, std::span<const std::size_t>, std::size_t);               \
  template double eval_recon_loss<T>(const MaeParams<T>&, const PatchGrid<T>&, std::span<const BinaryMask>);    \
  template MaeStepResult step_mae<T>(TrainState<T>&, const PatchGrid<T>&, const ReconTarget<T>&,                \
                                     std::span<const BinaryMask>, double);                                      \
  template CmmStepResult step_cmm<T>(TrainState<T>&, const PatchGrid<T>&, const ReconTarget<T>&, double,        \
                                     const LossWeights&, double, Tensor<T>);                                    \
  template StepMetrics train_iteration<T>(TrainState<T>&, const Dataset&, const TrainConfig&);                  \
  template CheckpointData to_checkpoint<T>(const TrainState<T>&, const TrainConfig&);                           \
  template void restore_checkpoint<T>(TrainState<T>&, const TrainConfig&, const CheckpointData&);               \
  template RunResult<T> run_training<T>(const TrainConfig&, const Dataset&, TrainMode, const RunHooks<T>&,         \
                                        const std::optional<CheckpointData>&);                                  \
  template std::vector<BinaryMask> predict_masks<T>(const CmmParams<T>&, const PatchGrid<T>&, std::vector<SoftMask>*);

CLMAE_INSTANTIATE_TRAINING(float)
CLMAE_INSTANTIATE_TRAINING(double)

}  // namespace clmae
