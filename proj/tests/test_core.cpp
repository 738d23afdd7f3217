#include "tra/binary_io.hpp"
#include "tra/core.hpp"
#include "tra/vocab.hpp"

#include <gtest/gtest.h>

using namespace tra;

TEST(Rng, StreamsAreDeterministicAndDistinct) {
  Rng a = make_rng(42, 1), b = make_rng(42, 1), c = make_rng(42, 2), d = make_rng(43, 1);
  const auto x = a();
  EXPECT_EQ(x, b());
  EXPECT_NE(x, c());
  EXPECT_NE(x, d());
}

TEST(Rng, UniformIntCoversInclusiveRange) {
  Rng r = make_rng(1);
  std::vector<int> seen(5, 0);
  for (int i = 0; i < 5000; ++i) seen[uniform_int(r, 0, 4)]++;
  for (int n : seen) EXPECT_GT(n, 800);
}

TEST(Errors, KindIsCarried) {
  try {
    require(false, ErrorKind::Config, "bad field");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Config);
    EXPECT_NE(std::string(e.what()).find("bad field"), std::string::npos);
  }
}

TEST(BinaryIo, RoundTripsScalars) {
  ByteWriter w;
  w.magic("ABCD");
  w.u8(7);
  w.u32(0xDEADBEEF);
  w.u64(1ULL << 40);
  w.i64(-5);
  w.f32(1.5f);
  w.f64(-2.25);
  ByteReader r(w.data());
  EXPECT_TRUE(r.has_magic("ABCD"));
  EXPECT_EQ(r.u8(), 7);
  EXPECT_EQ(r.u32(), 0xDEADBEEFu);
  EXPECT_EQ(r.u64(), 1ULL << 40);
  EXPECT_EQ(r.i64(), -5);
  EXPECT_EQ(r.f32(), 1.5f);
  EXPECT_EQ(r.f64(), -2.25);
  EXPECT_EQ(r.remaining(), 0u);
  try {
    r.u8();
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::CorruptFile);
  }
}

TEST(Vocab, ValidationAndText) {
  EXPECT_NO_THROW(validate_instruction({tok::MOVE, tok::OBJ1, tok::TO, tok::CTR0}));
  EXPECT_THROW(validate_instruction({}), Error);
  EXPECT_THROW(validate_instruction(Instruction(kMaxInstructionLength + 1, tok::THE)), Error);
  EXPECT_THROW(validate_instruction({kVocabSize}), Error);
  EXPECT_EQ(to_text({tok::PUT, tok::FOOD, tok::IN, tok::CTR0}), "PUT FOOD IN CTR0");
  EXPECT_LE(tok::kCount, kVocabSize);
}
