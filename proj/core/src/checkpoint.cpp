#include "clmae/checkpoint.hpp"

#include <openssl/evp.h>
#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include "clmae/errors.hpp"

namespace clmae {

namespace {

class Writer {
 public:
  template <typename U>
  void put(U value) {
    using Bits = std::conditional_t<sizeof(U) == 8, std::uint64_t,
                                    std::conditional_t<sizeof(U) == 4, std::uint32_t,
                                                       std::conditional_t<sizeof(U) == 2, std::uint16_t, std::uint8_t>>>;
    const auto bits = std::bit_cast<Bits>(value);
    for (std::size_t i = 0; i < sizeof(U); ++i) out_.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
  }
  void bytes(std::string_view s) { out_.append(s); }
  std::string& str() { return out_; }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(std::string_view in) : in_(in) {}

  template <typename U>
  U get() {
    using Bits = std::conditional_t<sizeof(U) == 8, std::uint64_t,
                                    std::conditional_t<sizeof(U) == 4, std::uint32_t,
                                                       std::conditional_t<sizeof(U) == 2, std::uint16_t, std::uint8_t>>>;
    need(sizeof(U));
    Bits bits = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      bits |= static_cast<Bits>(static_cast<std::uint8_t>(in_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(U);
    return std::bit_cast<U>(bits);
  }
  std::string_view bytes(std::size_t n) {
    need(n);
    auto s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return in_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (in_.size() - pos_ < n) {
      throw CheckpointError("checkpoint truncated: needed " + std::to_string(n) + " bytes at offset " +
                            std::to_string(pos_) + ", " + std::to_string(in_.size() - pos_) + " left");
    }
  }
  std::string_view in_;
  std::size_t pos_ = 0;
};

void write_table(Writer& w, const std::vector<TensorRecord>& table, bool f64) {
  w.put(static_cast<std::uint32_t>(table.size()));
  for (const auto& r : table) {
    if (shape_numel(r.shape) != r.values.size()) {
      throw CheckpointError("tensor " + r.name + ": shape " + shape_string(r.shape) + " holds " +
                            std::to_string(shape_numel(r.shape)) + " values, got " +
                            std::to_string(r.values.size()));
    }
    w.put(static_cast<std::uint32_t>(r.name.size()));
    w.bytes(r.name);
    w.put(static_cast<std::uint32_t>(r.shape.size()));
    for (std::size_t e : r.shape) w.put(static_cast<std::uint32_t>(e));
    w.put(static_cast<std::uint64_t>(r.values.size() * (f64 ? 8 : 4)));
    for (double v : r.values) {
      if (f64) w.put(v);
      else w.put(static_cast<float>(v));
    }
  }
}

std::vector<TensorRecord> read_table(Reader& r, bool f64) {
  const auto count = r.get<std::uint32_t>();
  std::vector<TensorRecord> table;
  for (std::uint32_t i = 0; i < count; ++i) {
    TensorRecord rec;
    rec.name = std::string(r.bytes(r.get<std::uint32_t>()));
    const auto rank = r.get<std::uint32_t>();
    if (rank > 8) throw CheckpointError("tensor " + rec.name + ": implausible rank " + std::to_string(rank));
    for (std::uint32_t k = 0; k < rank; ++k) rec.shape.push_back(r.get<std::uint32_t>());
    const auto payload = r.get<std::uint64_t>();
    const std::size_t width = f64 ? 8 : 4;
    if (payload != shape_numel(rec.shape) * width) {
      throw CheckpointError("tensor " + rec.name + ": shape " + shape_string(rec.shape) +
                            " inconsistent with " + std::to_string(payload) + "-byte payload");
    }
    rec.values.resize(shape_numel(rec.shape));
    for (auto& v : rec.values) v = f64 ? r.get<double>() : static_cast<double>(r.get<float>());
    table.push_back(std::move(rec));
  }
  return table;
}

std::uint32_t crc32_of(std::string_view bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size()));
  return static_cast<std::uint32_t>(crc);
}

}  // namespace

std::string encode_checkpoint(const CheckpointData& data) {
  Writer w;
  w.bytes(std::string_view(kCheckpointMagic, sizeof(kCheckpointMagic)));
  w.put(data.version);
  w.put(static_cast<std::uint8_t>(data.f64 ? 8 : 4));
  w.bytes(std::string_view(reinterpret_cast<const char*>(data.config_digest.data()), data.config_digest.size()));
  write_table(w, data.params, data.f64);
  write_table(w, data.moments, data.f64);
  w.put(data.step);
  w.put(static_cast<std::uint32_t>(data.rng_state.size()));
  w.bytes(data.rng_state);
  const std::string_view body = std::string_view(w.str()).substr(sizeof(kCheckpointMagic));
  w.put(crc32_of(body));
  return std::move(w.str());
}

CheckpointData decode_checkpoint(std::string_view bytes) {
  Reader r(bytes);
  if (r.bytes(sizeof(kCheckpointMagic)) != std::string_view(kCheckpointMagic, sizeof(kCheckpointMagic))) {
    throw CheckpointError("not a checkpoint: bad magic");
  }
  CheckpointData d;
  d.version = r.get<std::uint16_t>();
  if (d.version != kCheckpointVersion) {
    throw CheckpointError("checkpoint version " + std::to_string(d.version) +
                          " is not supported (expected version " + std::to_string(kCheckpointVersion) + ")");
  }
  if (bytes.size() < sizeof(kCheckpointMagic) + 4) throw CheckpointError("checkpoint truncated");
  const std::string_view body = bytes.substr(sizeof(kCheckpointMagic), bytes.size() - sizeof(kCheckpointMagic) - 4);
  Reader tail(bytes.substr(bytes.size() - 4));
  const auto stored_crc = tail.get<std::uint32_t>();

  const auto width = r.get<std::uint8_t>();
  if (width != 4 && width != 8) {
    throw CheckpointError("checkpoint element width " + std::to_string(width) + " is neither 4 nor 8");
  }
  d.f64 = width == 8;
  auto digest = r.bytes(d.config_digest.size());
  std::memcpy(d.config_digest.data(), digest.data(), digest.size());
  d.params = read_table(r, d.f64);
  d.moments = read_table(r, d.f64);
  d.step = r.get<std::uint64_t>();
  d.rng_state = std::string(r.bytes(r.get<std::uint32_t>()));
  if (r.remaining() != 4) {
    throw CheckpointError("checkpoint has " + std::to_string(r.remaining()) + " trailing bytes before the CRC (expected 4)");
  }
  if (crc32_of(body) != stored_crc) throw CheckpointError("checkpoint CRC mismatch: file is corrupted");
  return d;
}

void save_checkpoint(const std::filesystem::path& path, const CheckpointData& data) {
  const std::string bytes = encode_checkpoint(data);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("cannot write checkpoint " + path.string());
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw CheckpointError("short write to " + path.string());
}

CheckpointData load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

Digest sha256(std::string_view bytes) {
  Digest out{};
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  EVP_DigestUpdate(ctx, bytes.data(), bytes.size());
  EVP_DigestFinal_ex(ctx, out.data(), &len);
  EVP_MD_CTX_free(ctx);
  return out;
}

std::string digest_hex(const Digest& digest) {
  static const char* hex = "0123456789abcdef";
  std::string s;
  for (auto b : digest) {
    s.push_back(hex[b >> 4]);
    s.push_back(hex[b & 0xF]);
  }
  return s;
}

}  // namespace clmae
