#include "clmae/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <limits>
#include <numbers>
#include <random>

#include "clmae/errors.hpp"

namespace clmae {

namespace {

void put_u8(std::string& out, std::uint8_t v) { out.push_back(static_cast<char>(v)); }
void put_u16(std::string& out, std::uint16_t v) {
  put_u8(out, v & 0xFF);
  put_u8(out, v >> 8);
}
void put_u32(std::string& out, std::uint32_t v) {
  put_u16(out, v & 0xFFFF);
  put_u16(out, v >> 16);
}

std::uint8_t get_u8(std::string_view in, std::size_t& pos) { return static_cast<std::uint8_t>(in[pos++]); }
std::uint16_t get_u16(std::string_view in, std::size_t& pos) {
  const std::uint16_t lo = get_u8(in, pos);
  return static_cast<std::uint16_t>(lo | (get_u8(in, pos) << 8));
}
std::uint32_t get_u32(std::string_view in, std::size_t& pos) {
  const std::uint32_t lo = get_u16(in, pos);
  return lo | (static_cast<std::uint32_t>(get_u16(in, pos)) << 16);
}

constexpr char kMagic[6] = {'C', 'L', 'M', 'D', 'S', '\0'};

struct Rgb {
  double r, g, b;
};

Rgb hue_to_rgb(double hue) {
  const double h6 = 6.0 * (hue - std::floor(hue));
  auto channel = [&](double shift) {
    const double x = std::fmod(h6 + shift, 6.0);
    return std::clamp(std::abs(x - 3.0) - 1.0, 0.0, 1.0);
  };
  return {channel(0.0), channel(4.0), channel(2.0)};
}

// Fixed per-class appearance; independent of the seed so that sets
// generated with different seeds share their classes.
struct ClassStyle {
  int texture;  // 0 horizontal, 1 vertical, 2 diagonal, 3 anti-diagonal, 4 checker
  bool fine;    // period patch/2 instead of patch
  double hue;
  int shape;  // 0 disk, 1 square, 2 ring, 3 cross
};

ClassStyle class_style(std::size_t k, std::size_t classes) {
  ClassStyle s;
  s.texture = static_cast<int>(k % 5);
  s.fine = (k / 5) % 2 == 1;
  s.hue = static_cast<double>(k) / static_cast<double>(classes);
  s.shape = static_cast<int>(k % 4);
  return s;
}

double texture_value(int kind, double x, double y, double period, double phase_x, double phase_y) {
  const double w = 2.0 * std::numbers::pi / period;
  switch (kind) {
    case 0: return std::sin(w * y + phase_y);
    case 1: return std::sin(w * x + phase_x);
    case 2: return std::sin(w * (x + y) + phase_x);
    case 3: return std::sin(w * (x - y) + phase_x);
    default: return std::sin(w * x + phase_x) * std::sin(w * y + phase_y);
  }
}

bool inside_shape(int kind, double dx, double dy, double r) {
  switch (kind) {
    case 0: return dx * dx + dy * dy <= r * r;
    case 1: return std::abs(dx) <= r * 0.85 && std::abs(dy) <= r * 0.85;
    case 2: {
      const double d2 = dx * dx + dy * dy;
      return d2 <= r * r && d2 >= 0.36 * r * r;
    }
    default: return (std::abs(dx) <= r * 0.3 && std::abs(dy) <= r) || (std::abs(dy) <= r * 0.3 && std::abs(dx) <= r);
  }
}

}  // namespace

std::span<const std::uint8_t> Dataset::record(std::size_t i) const {
  if (i >= count()) throw DatasetError("record " + std::to_string(i) + " out of range (" + std::to_string(count()) + ")");
  return std::span<const std::uint8_t>(pixels).subspan(i * image_bytes(), image_bytes());
}

template <typename T>
Image<T> Dataset::image(std::size_t i) const {
  Image<T> img{h, w, c, {}};
  const auto rec = record(i);
  img.pixels.resize(rec.size());
  for (std::size_t k = 0; k < rec.size(); ++k) img.pixels[k] = static_cast<T>(rec[k]) / T(255);
  return img;
}

template <typename T>
std::vector<Image<T>> Dataset::images(std::span<const std::size_t> indices) const {
  std::vector<Image<T>> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(image<T>(i));
  return out;
}

template Image<float> Dataset::image<float>(std::size_t) const;
template Image<double> Dataset::image<double>(std::size_t) const;
template std::vector<Image<float>> Dataset::images<float>(std::span<const std::size_t>) const;
template std::vector<Image<double>> Dataset::images<double>(std::span<const std::size_t>) const;

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out;
  out.h = h;
  out.w = w;
  out.c = c;
  out.classes = classes;
  for (std::size_t i : indices) {
    const auto rec = record(i);
    out.labels.push_back(labels[i]);
    out.pixels.insert(out.pixels.end(), rec.begin(), rec.end());
  }
  return out;
}

void Dataset::validate() const {
  if (h == 0 || w == 0 || c == 0) throw DatasetError("dataset extents must be positive");
  if (h > 0xFFFF || w > 0xFFFF || c > 0xFF || classes > 0xFFFF) throw DatasetError("dataset extents exceed the file format");
  if (classes == 0) throw DatasetError("dataset needs at least one class");
  if (pixels.size() != count() * image_bytes()) {
    throw DatasetError("dataset holds " + std::to_string(pixels.size()) + " pixel bytes, expected " +
                       std::to_string(count() * image_bytes()));
  }
  for (std::size_t i = 0; i < count(); ++i) {
    if (labels[i] >= classes) {
      throw DatasetError("record " + std::to_string(i) + " has label " + std::to_string(labels[i]) +
                         " but only " + std::to_string(classes) + " classes");
    }
  }
}

std::string encode_dataset(const Dataset& data) {
  data.validate();
  std::string out(kMagic, sizeof(kMagic));
  put_u16(out, kDatasetVersion);
  put_u32(out, static_cast<std::uint32_t>(data.count()));
  put_u16(out, static_cast<std::uint16_t>(data.h));
  put_u16(out, static_cast<std::uint16_t>(data.w));
  put_u8(out, static_cast<std::uint8_t>(data.c));
  put_u16(out, static_cast<std::uint16_t>(data.classes));
  out.reserve(kDatasetHeaderBytes + data.count() * (2 + data.image_bytes()));
  for (std::size_t i = 0; i < data.count(); ++i) {
    put_u16(out, data.labels[i]);
    const auto rec = data.record(i);
    out.append(reinterpret_cast<const char*>(rec.data()), rec.size());
  }
  return out;
}

Dataset decode_dataset(std::string_view bytes) {
  if (bytes.size() < kDatasetHeaderBytes) throw DatasetError("dataset file truncated in header");
  if (bytes.substr(0, sizeof(kMagic)) != std::string_view(kMagic, sizeof(kMagic))) {
    throw DatasetError("not a dataset file: bad magic");
  }
  std::size_t pos = sizeof(kMagic);
  const auto version = get_u16(bytes, pos);
  if (version != kDatasetVersion) {
    throw DatasetError("dataset version " + std::to_string(version) + " unsupported (expected " +
                       std::to_string(kDatasetVersion) + ")");
  }
  Dataset d;
  const std::size_t count = get_u32(bytes, pos);
  d.h = get_u16(bytes, pos);
  d.w = get_u16(bytes, pos);
  d.c = get_u8(bytes, pos);
  d.classes = get_u16(bytes, pos);
  const std::size_t expected = kDatasetHeaderBytes + count * (2 + d.image_bytes());
  if (bytes.size() != expected) {
    throw DatasetError("dataset file is " + std::to_string(bytes.size()) + " bytes, header implies " +
                       std::to_string(expected));
  }
  d.labels.resize(count);
  d.pixels.resize(count * d.image_bytes());
  for (std::size_t i = 0; i < count; ++i) {
    d.labels[i] = get_u16(bytes, pos);
    std::copy_n(bytes.data() + pos, d.image_bytes(), reinterpret_cast<char*>(d.pixels.data() + i * d.image_bytes()));
    pos += d.image_bytes();
  }
  d.validate();
  return d;
}

void write_dataset(const std::filesystem::path& path, const Dataset& data) {
  const std::string bytes = encode_dataset(data);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DatasetError("cannot write dataset " + path.string());
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw DatasetError("short write to " + path.string());
}

Dataset read_dataset(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DatasetError("cannot open dataset " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return decode_dataset(bytes);
}

Dataset gen_synthetic(const SyntheticSpec& spec) {
  if (spec.classes == 0 || spec.per_class == 0) throw DatasetError("need at least one class and one image per class");
  if (spec.h == 0 || spec.w == 0 || spec.c == 0) throw DatasetError("image extents must be positive");
  if (spec.patch == 0 || spec.h % spec.patch != 0 || spec.w % spec.patch != 0) {
    throw DatasetError("image extents " + std::to_string(spec.h) + "x" + std::to_string(spec.w) +
                       " not divisible by patch size " + std::to_string(spec.patch));
  }
  Dataset d;
  d.h = spec.h;
  d.w = spec.w;
  d.c = spec.c;
  d.classes = spec.classes;
  const std::size_t count = spec.classes * spec.per_class;
  d.labels.resize(count);
  d.pixels.resize(count * d.image_bytes());

  Rng rng(spec.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  if (spec.noise < 0) throw DatasetError("noise level must be non-negative");
  std::normal_distribution<double> noise(0.0, spec.noise);
  const double hh = static_cast<double>(spec.h), ww = static_cast<double>(spec.w);
  std::vector<double> px(d.image_bytes());

  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t k = i % spec.classes;
    const ClassStyle style = class_style(k, spec.classes);
    // The texture period divides the patch size, so every background patch
    // carries the same pattern up to the slow ramp.
    const double period = static_cast<double>(style.fine && spec.patch >= 4 ? spec.patch / 2 : spec.patch);
    const double phase_x = 2.0 * std::numbers::pi * unit(rng);
    const double phase_y = 2.0 * std::numbers::pi * unit(rng);
    const double ramp_angle = 2.0 * std::numbers::pi * unit(rng);
    const double ramp_gain = 0.3 * unit(rng);
    const double contrast = 0.15 + 0.15 * unit(rng);
    // Photometric nuisance: global gain, offset and colour cast.
    const double gain = 0.5 + unit(rng);
    const double offset = 0.5 * (unit(rng) - 0.5);
    const Rgb cast = hue_to_rgb(unit(rng));
    const double cast_amount = 0.2 * unit(rng);
    const double ramp_co = std::cos(ramp_angle), ramp_si = std::sin(ramp_angle);
    const double radius = std::min(hh, ww) * (0.12 + 0.06 * unit(rng));
    const double cy = radius + (hh - 2 * radius) * unit(rng);
    const double cx = radius + (ww - 2 * radius) * unit(rng);
    const Rgb colour = hue_to_rgb(style.hue + 0.04 * (unit(rng) - 0.5));

    for (std::size_t y = 0; y < spec.h; ++y) {
      for (std::size_t x = 0; x < spec.w; ++x) {
        const double u = (static_cast<double>(x) + 0.5) / ww - 0.5;
        const double v = (static_cast<double>(y) + 0.5) / hh - 0.5;
        const double ramp = ramp_gain * (u * ramp_co + v * ramp_si);
        const double pattern = texture_value(style.texture, static_cast<double>(x), static_cast<double>(y), period, phase_x, phase_y);
        const double base = ramp + contrast * pattern;
        const bool in_shape = inside_shape(style.shape, static_cast<double>(x) + 0.5 - cx, static_cast<double>(y) + 0.5 - cy, radius);
        for (std::size_t ch = 0; ch < spec.c; ++ch) {
          const double cast_c = spec.c == 3 ? (ch == 0 ? cast.r : ch == 1 ? cast.g : cast.b) : 0.5;
          const double tint = spec.c == 3 ? (ch == 0 ? colour.r : ch == 1 ? colour.g : colour.b) : (colour.r + colour.g + colour.b) / 3.0;
          const double value = in_shape ? 0.8 * tint - 0.4 : base;
          px[(y * spec.w + x) * spec.c + ch] = 0.5 + offset + cast_amount * (cast_c - 0.5) + gain * value + noise(rng);
        }
      }
    }
    d.labels[i] = static_cast<std::uint16_t>(k);
    auto* dst = d.pixels.data() + i * d.image_bytes();
    for (std::size_t p = 0; p < px.size(); ++p) {
      dst[p] = static_cast<std::uint8_t>(std::lround(std::clamp(px[p], 0.0, 1.0) * 255.0));
    }
  }
  return d;
}

double pixel_nn_accuracy(const Dataset& data) {
  const std::size_t n = data.count(), dim = data.image_bytes();
  if (n < 2) throw DatasetError("pixel_nn_accuracy needs at least two records");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto a = data.record(i);
    std::uint64_t best = std::numeric_limits<std::uint64_t>::max();
    std::size_t best_j = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const auto b = data.record(j);
      std::uint64_t dist = 0;
      for (std::size_t e = 0; e < dim; ++e) {
        const int diff = static_cast<int>(a[e]) - static_cast<int>(b[e]);
        dist += static_cast<std::uint64_t>(diff * diff);
      }
      if (dist < best) {
        best = dist;
        best_j = j;
      }
    }
    correct += data.labels[best_j] == data.labels[i];
  }
  return 100.0 * static_cast<double>(correct) / static_cast<double>(n);
}

DatasetSplit split_per_class(const Dataset& data, std::size_t train_per_class) {
  std::vector<std::size_t> seen(data.classes, 0), train, test;
  for (std::size_t i = 0; i < data.count(); ++i) {
    (seen[data.labels[i]]++ < train_per_class ? train : test).push_back(i);
  }
  return {data.subset(train), data.subset(test)};
}

}  // namespace clmae
