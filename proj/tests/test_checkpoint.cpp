#include <gtest/gtest.h>

#include <filesystem>

#include "clmae/checkpoint.hpp"
#include "clmae/errors.hpp"

using namespace clmae;

namespace {

CheckpointData sample(bool f64) {
  CheckpointData d;
  d.f64 = f64;
  d.config_digest = sha256("config");
  d.params = {{"mae.w", {2, 3}, {1, 2, 3, 4, 5, 6.5}}, {"mae.b", {3}, {-1, 0, 1}}};
  d.moments = {{"mae_opt.m:mae.w", {2, 3}, {0, 0, 0, 0, 0, 0.25}}};
  d.step = 1234;
  d.rng_state = "state\n1\n2 0 1";
  return d;
}

}  // namespace

TEST(Checkpoint, Sha256KnownAnswer) {
  EXPECT_EQ(digest_hex(sha256("abc")), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Checkpoint, EncodeDecodeEncodeIsByteIdentical) {
  for (bool f64 : {false, true}) {
    const std::string a = encode_checkpoint(sample(f64));
    const CheckpointData d = decode_checkpoint(a);
    EXPECT_EQ(encode_checkpoint(d), a);
    EXPECT_EQ(d.step, 1234u);
    EXPECT_EQ(d.params[0].values[5], 6.5);
    EXPECT_EQ(d.params[1].shape, (Shape{3}));
    EXPECT_EQ(d.rng_state, "state\n1\n2 0 1");
    EXPECT_EQ(d.f64, f64);
  }
}

TEST(Checkpoint, FileRoundTrip) {
  const auto path = std::filesystem::temp_directory_path() / "clmae_test_ckpt.bin";
  save_checkpoint(path, sample(true));
  const CheckpointData back = load_checkpoint(path);
  save_checkpoint(path, back);
  const CheckpointData again = load_checkpoint(path);
  std::filesystem::remove(path);
  EXPECT_EQ(encode_checkpoint(again), encode_checkpoint(sample(true)));
}

TEST(Checkpoint, MagicIsCheckedFirst) {
  std::string bytes = encode_checkpoint(sample(false));
  EXPECT_EQ(bytes.substr(0, 6), std::string("CLMAE\0", 6));
  bytes[1] = 'X';
  EXPECT_THROW(decode_checkpoint(bytes), CheckpointError);
}

TEST(Checkpoint, EveryPayloadByteIsCovered) {
  const std::string bytes = encode_checkpoint(sample(false));
  for (std::size_t i = 6; i < bytes.size(); ++i) {
    std::string bad = bytes;
    bad[i] = static_cast<char>(bad[i] ^ 0x10);
    EXPECT_THROW(decode_checkpoint(bad), CheckpointError) << "byte " << i;
  }
}

TEST(Checkpoint, WrongVersionNamesBoth) {
  CheckpointData d = sample(false);
  d.version = 7;
  try {
    decode_checkpoint(encode_checkpoint(d));
    FAIL();
  } catch (const CheckpointError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find('7'), std::string::npos) << msg;
    EXPECT_NE(msg.find(std::to_string(kCheckpointVersion)), std::string::npos) << msg;
  }
}

TEST(Checkpoint, TruncationDetected) {
  const std::string bytes = encode_checkpoint(sample(false));
  for (std::size_t keep : {std::size_t{3}, std::size_t{10}, bytes.size() / 2, bytes.size() - 1}) {
    EXPECT_THROW(decode_checkpoint(bytes.substr(0, keep)), CheckpointError) << keep;
  }
}

TEST(Checkpoint, ShapeTableMustMatchPayload) {
  CheckpointData d = sample(false);
  d.params[0].shape = {4, 3};
  EXPECT_THROW(encode_checkpoint(d), CheckpointError);
}
