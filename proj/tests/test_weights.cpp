#include <gtest/gtest.h>

#include <fstream>

#include "fckit/weights_io.hpp"
#include "support.hpp"

using namespace fckit;
using fckit::test::TempDir;

namespace {

Errc code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected an fckit::Error";
  return Errc::invariant;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void dump(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  out << bytes;
}

}  // namespace

TEST(WeightsFormat, ExactByteLayout) {
  std::vector<TensorRecord> recs{{"ab", Tensorf({2}, {1.0f, -2.5f})}};
  const std::string bytes = encode_records(recs);
  const unsigned char expected[] = {
      'F', 'C', 'W', '1',                                   // magic
      1, 0, 0, 0,                                           // version
      1, 0, 0, 0,                                           // record count
      2, 0, 0, 0, 'a', 'b',                                 // name
      1, 0, 0, 0, 2, 0, 0, 0,                               // ndim, dims
      0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x20, 0xc0};      // 1.0f, -2.5f
  ASSERT_EQ(bytes.size(), sizeof(expected));
  for (std::size_t i = 0; i < bytes.size(); ++i) EXPECT_EQ(static_cast<unsigned char>(bytes[i]), expected[i]) << i;
  auto back = decode_records(bytes);
  ASSERT_EQ(back.size(), 1u);
  EXPECT_EQ(back[0].name, "ab");
  EXPECT_TRUE(bitwise_equal(back[0].value, recs[0].value));
}

TEST(WeightsFormat, RoundTripFrameModelBitExact) {
  TempDir dir("weights");
  auto m = build_facechannel(7, 3);
  m.param("conv1.b").value[0] = -0.0f;  // signed zero survives
  save_weights(m, dir.file("fc.fcw"));
  auto back = load_weights(dir.file("fc.fcw"));
  EXPECT_EQ(back.variant(), Variant::frame);
  ASSERT_EQ(back.params().size(), m.params().size());
  for (const auto& p : m.params()) EXPECT_TRUE(bitwise_equal(p.value, back.param(p.name).value)) << p.name;
}

TEST(WeightsFormat, RoundTripSequenceModelInfersVariant) {
  TempDir dir("weights");
  for (auto wiring : {FcsWiring::sequential, FcsWiring::concat}) {
    auto s = build_facechannels(build_facechannel(5, 3), FcsMode::fine_tune, 4, wiring);
    save_weights(s, dir.file("fcs.fcw"));
    auto back = load_weights(dir.file("fcs.fcw"));
    EXPECT_EQ(back.variant(), Variant::sequence);
    EXPECT_EQ(back.num_classes(), 5);
    EXPECT_EQ(back.wiring(), wiring);
    for (const auto& p : s.params()) EXPECT_TRUE(bitwise_equal(p.value, back.param(p.name).value)) << p.name;
  }
}

TEST(WeightsFormat, BadMagic) {
  TempDir dir("weights");
  save_weights(build_facechannel(7, 1), dir.file("w.fcw"));
  auto bytes = slurp(dir.file("w.fcw"));
  bytes[3] = '2';
  dump(dir.file("bad.fcw"), bytes);
  EXPECT_EQ(code_of([&] { load_weights(dir.file("bad.fcw")); }), Errc::bad_magic);
  dump(dir.file("empty.fcw"), "");
  EXPECT_EQ(code_of([&] { load_weights(dir.file("empty.fcw")); }), Errc::bad_magic);
}

TEST(WeightsFormat, BadVersion) {
  auto bytes = encode_records({{"x", Tensorf({1})}});
  bytes[4] = 2;
  EXPECT_EQ(code_of([&] { decode_records(bytes); }), Errc::bad_version);
}

TEST(WeightsFormat, Truncated) {
  const auto bytes = encode_records({{"x", Tensorf({3}, 1.0f)}, {"y", Tensorf({2, 2}, 2.0f)}});
  for (std::size_t cut : {6ul, 12ul, 15ul, 20ul, bytes.size() - 1})
    EXPECT_EQ(code_of([&] { decode_records(bytes.substr(0, cut)); }), Errc::truncated) << cut;
  EXPECT_EQ(code_of([&] { decode_records(bytes + "x"); }), Errc::truncated);
}

TEST(WeightsFormat, HugeDimsRejectedWithoutAllocating) {
  std::string bytes(kWeightsMagic, 4);
  for (std::uint32_t v : {1u, 1u, 1u}) bytes.append(reinterpret_cast<const char*>(&v), 4);
  bytes += "x";
  for (std::uint32_t v : {2u, 0xFFFFFFFFu, 0xFFFFFFFFu}) bytes.append(reinterpret_cast<const char*>(&v), 4);
  EXPECT_EQ(code_of([&] { decode_records(bytes); }), Errc::truncated);
}

TEST(WeightsFormat, ShapeMismatchNamesTensor) {
  TempDir dir("weights");
  auto m = build_facechannel(7, 1);
  std::vector<TensorRecord> recs;
  for (const auto& p : m.params())
    recs.push_back({p.name, p.name == "conv3.w" ? Tensorf({3, 3, 16, 31}) : p.value});
  write_records(dir.file("w.fcw"), recs);
  try {
    load_weights(dir.file("w.fcw"));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::tensor_shape_mismatch);
    EXPECT_NE(std::string(e.what()).find("conv3.w"), std::string::npos);
  }
}

TEST(WeightsFormat, MissingAndUnknownTensors) {
  TempDir dir("weights");
  auto m = build_facechannel(7, 1);
  std::vector<TensorRecord> recs;
  for (const auto& p : m.params())
    if (p.name != "trunk.b") recs.push_back({p.name, p.value});
  write_records(dir.file("missing.fcw"), recs);
  EXPECT_EQ(code_of([&] { load_weights(dir.file("missing.fcw")); }), Errc::missing_tensor);
  recs.push_back({"trunk.b", m.param("trunk.b").value});
  recs.push_back({"bogus", Tensorf({1})});
  write_records(dir.file("unknown.fcw"), recs);
  EXPECT_EQ(code_of([&] { load_weights(dir.file("unknown.fcw")); }), Errc::unknown_tensor);
}

TEST(WeightsFormat, MissingFileIsIoError) {
  EXPECT_EQ(code_of([] { load_weights("/nonexistent/dir/w.fcw"); }), Errc::io_error);
  EXPECT_EQ(category_of(Errc::bad_magic), ErrorCategory::io);
}
