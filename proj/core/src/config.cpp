#include "clmae/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

#include "clmae/errors.hpp"

namespace clmae {

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

double parse_double(std::string_view key, std::string_view text) {
  double v = 0;
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end) {
    throw ConfigError("key " + std::string(key) + ": '" + std::string(text) + "' is not a number");
  }
  return v;
}

template <typename Int>
Int parse_int(std::string_view key, std::string_view text) {
  Int v = 0;
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end) {
    throw ConfigError("key " + std::string(key) + ": '" + std::string(text) + "' is not an integer");
  }
  return v;
}

std::vector<std::size_t> parse_list(std::string_view key, std::string_view text) {
  std::vector<std::size_t> out;
  while (!text.empty()) {
    const auto comma = text.find(',');
    const auto item = trim(text.substr(0, comma));
    if (!item.empty()) out.push_back(parse_int<std::size_t>(key, item));
    if (comma == std::string_view::npos) break;
    text.remove_prefix(comma + 1);
  }
  return out;
}

struct Field {
  std::string key;
  bool trajectory;  // part of the config digest
  std::function<void(TrainConfig&, std::string_view)> set;
  std::function<std::string(const TrainConfig&)> get;
};

#define SIZE_FIELD(name, member, traj)                                                       \
  Field{name, traj, [](TrainConfig& c, std::string_view v) { c.member = parse_int<std::size_t>(name, v); }, \
        [](const TrainConfig& c) { return std::to_string(c.member); }}
#define DOUBLE_FIELD(name, member)                                                             \
  Field{name, true, [](TrainConfig& c, std::string_view v) { c.member = parse_double(name, v); }, \
        [](const TrainConfig& c) { return fmt_double(c.member); }}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      SIZE_FIELD("steps", steps, true),
      SIZE_FIELD("batch_size", batch_size, true),
      DOUBLE_FIELD("lr_mae", lr_mae),
      DOUBLE_FIELD("lr_cmm", lr_cmm),
      Field{"warmup_steps", true,
            [](TrainConfig& c, std::string_view v) { c.warmup_steps = parse_int<long>("warmup_steps", v); },
            [](const TrainConfig& c) { return std::to_string(c.warmup_steps); }},
      DOUBLE_FIELD("weight_decay", adam.weight_decay),
      DOUBLE_FIELD("beta1", adam.beta1),
      DOUBLE_FIELD("beta2", adam.beta2),
      DOUBLE_FIELD("adam_eps", adam.eps),
      DOUBLE_FIELD("lambda_gauss", losses.gauss),
      DOUBLE_FIELD("lambda_kl", losses.kl),
      DOUBLE_FIELD("lambda_div", losses.div),
      DOUBLE_FIELD("gauss_mu", losses.mu),
      DOUBLE_FIELD("gauss_sigma", losses.sigma),
      DOUBLE_FIELD("mask_ratio", losses.mask_ratio),
      DOUBLE_FIELD("lambda_final", lambda_final),
      SIZE_FIELD("image_h", geometry.image_h, true),
      SIZE_FIELD("image_w", geometry.image_w, true),
      SIZE_FIELD("channels", geometry.channels, true),
      SIZE_FIELD("patch", geometry.patch, true),
      SIZE_FIELD("embed_dim", geometry.embed_dim, true),
      SIZE_FIELD("heads", geometry.heads, true),
      SIZE_FIELD("encoder_depth", geometry.encoder_depth, true),
      SIZE_FIELD("decoder_depth", geometry.decoder_depth, true),
      SIZE_FIELD("decoder_dim", geometry.decoder_dim, true),
      SIZE_FIELD("decoder_heads", geometry.decoder_heads, true),
      SIZE_FIELD("cmm_depth", geometry.cmm_depth, true),
      SIZE_FIELD("mlp_ratio", geometry.mlp_ratio, true),
      Field{"seed", true, [](TrainConfig& c, std::string_view v) { c.seed = parse_int<std::uint64_t>("seed", v); },
            [](const TrainConfig& c) { return std::to_string(c.seed); }},
      Field{"dataset", true, [](TrainConfig& c, std::string_view v) { c.dataset = std::string(v); },
            [](const TrainConfig& c) { return c.dataset; }},
      Field{"out", false, [](TrainConfig& c, std::string_view v) { c.out = std::string(v); },
            [](const TrainConfig& c) { return c.out; }},
      SIZE_FIELD("checkpoint_every", checkpoint_every, false),
      Field{"mask_dump_steps", false,
            [](TrainConfig& c, std::string_view v) { c.mask_dump_steps = parse_list("mask_dump_steps", v); },
            [](const TrainConfig& c) {
              std::string s;
              for (std::size_t i = 0; i < c.mask_dump_steps.size(); ++i) {
                s += (i ? "," : "") + std::to_string(c.mask_dump_steps[i]);
              }
              return s;
            }},
      SIZE_FIELD("mask_dump_count", mask_dump_count, false),
      Field{"precision", true,
            [](TrainConfig& c, std::string_view v) {
              if (v == "f32") c.precision = Precision::f32;
              else if (v == "f64") c.precision = Precision::f64;
              else throw ConfigError("key precision: expected f32 or f64, got '" + std::string(v) + "'");
            },
            [](const TrainConfig& c) { return std::string(c.precision == Precision::f32 ? "f32" : "f64"); }},
  };
  return table;
}

#undef SIZE_FIELD
#undef DOUBLE_FIELD

const Field& find_field(std::string_view key) {
  for (const auto& f : fields()) {
    if (f.key == key) return f;
  }
  throw ConfigError("unknown config key '" + std::string(key) + "'");
}

}  // namespace

std::size_t TrainConfig::warmup() const {
  if (warmup_steps >= 0) return static_cast<std::size_t>(warmup_steps);
  return steps / 20;
}

std::vector<std::size_t> TrainConfig::dump_steps() const {
  if (!mask_dump_steps.empty()) return mask_dump_steps;
  std::vector<std::size_t> out = {0, steps / 4, steps / 2, 3 * steps / 4, steps};
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

void TrainConfig::validate() const {
  if (steps == 0) throw ConfigError("steps must be positive");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(lr_mae > 0) || !(lr_cmm > 0)) throw ConfigError("learning rates must be positive");
  if (adam.weight_decay < 0) throw ConfigError("weight_decay must be non-negative");
  if (!(adam.beta1 >= 0 && adam.beta1 < 1) || !(adam.beta2 >= 0 && adam.beta2 < 1)) {
    throw ConfigError("beta1 and beta2 must lie in [0, 1)");
  }
  if (!(adam.eps > 0)) throw ConfigError("adam_eps must be positive");
  if (!(lambda_final >= -1.0 && lambda_final <= 1.0)) {
    throw ConfigError("lambda_final " + fmt_double(lambda_final) + " outside [-1, 1]");
  }
  if (checkpoint_every == 0) throw ConfigError("checkpoint_every must be positive");
  losses.validate();
  geometry.validate();
  for (std::size_t s : mask_dump_steps) {
    if (s > steps) throw ConfigError("mask dump step " + std::to_string(s) + " beyond steps=" + std::to_string(steps));
  }
}

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const auto& f : fields()) k.push_back(f.key);
    return k;
  }();
  return keys;
}

void set_config_value(TrainConfig& config, std::string_view key, std::string_view value) {
  find_field(key).set(config, trim(value));
}

std::string get_config_value(const TrainConfig& config, std::string_view key) {
  return find_field(key).get(config);
}

void apply_config_text(TrainConfig& config, std::string_view text) {
  std::size_t line_no = 0;
  while (!text.empty()) {
    ++line_no;
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected 'key = value'");
    }
    try {
      set_config_value(config, trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(line_no) + ": " + e.what());
    }
  }
}

void apply_config_file(TrainConfig& config, const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  apply_config_text(config, ss.str());
}

std::string format_config(const TrainConfig& config) {
  std::string out;
  for (const auto& f : fields()) out += f.key + " = " + f.get(config) + "\n";
  return out;
}

TrainConfig resolve_config(std::string_view file_text, const std::map<std::string, std::string>& overrides) {
  TrainConfig config;
  apply_config_text(config, file_text);
  for (const auto& [key, value] : overrides) set_config_value(config, key, value);
  return config;
}

Digest config_digest(const TrainConfig& config) {
  std::string canon;
  for (const auto& f : fields()) {
    if (f.trajectory) canon += f.key + "=" + f.get(config) + "\n";
  }
  return sha256(canon);
}

}  // namespace clmae
