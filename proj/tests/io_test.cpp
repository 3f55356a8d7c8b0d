#include "rtc/io.hpp"

#include <gtest/gtest.h>

#include <cstdio>
#include <string>

#include "rtc/random.hpp"

namespace {

std::string temp_path(const char* name) {
    return std::string(::testing::TempDir()) + "/" + name;
}

TEST(Rtt1, RoundTrip) {
    rtc::Rng rng(3);
    std::vector<double> vals(24);
    for (auto& v : vals) v = rng.uniform(-10.0, 10.0);
    rtc::Tensor t = rtc::Tensor::from({2, 3, 4}, vals);
    const std::string path = temp_path("t.rtt");
    rtc::io::save_tensor(t, path);
    rtc::Tensor back = rtc::io::load_tensor(path);
    EXPECT_EQ(back.shape(), t.shape());
    EXPECT_EQ(back.values(), t.values());
    std::remove(path.c_str());
}

TEST(Rtt1, ExactLayout) {
    rtc::Tensor t = rtc::Tensor::from({1, 2}, {1.0, -2.0});
    const std::string buf = rtc::io::encode_tensor(t);
    // magic + rank + 2 extents + 2 doubles
    ASSERT_EQ(buf.size(), 4u + 4u + 2u * 8u + 2u * 8u);
    EXPECT_EQ(buf.substr(0, 4), "RTT1");
    EXPECT_EQ(static_cast<unsigned char>(buf[4]), 2u);  // rank, little-endian
    EXPECT_EQ(static_cast<unsigned char>(buf[8]), 1u);  // extent 0
    EXPECT_EQ(static_cast<unsigned char>(buf[16]), 2u);  // extent 1
}

TEST(Rtt1, TruncatedFileReportsOffset) {
    rtc::Tensor t = rtc::Tensor::from({4}, {1.0, 2.0, 3.0, 4.0});
    std::string buf = rtc::io::encode_tensor(t);
    buf.resize(buf.size() - 5);
    rtc::io::detail::Reader r{buf};
    try {
        rtc::io::decode_tensor(r);
        FAIL() << "expected parse_error";
    } catch (const rtc::io::parse_error& e) {
        EXPECT_GT(e.offset(), 0u);
    }
}

TEST(Rtc1, CheckpointRoundTripPreservesOrder) {
    rtc::io::NamedTensors sections;
    sections.emplace_back("stem1.kernel", rtc::Tensor::full({2, 2}, 0.5));
    sections.emplace_back("stem1.bias", rtc::Tensor::from({2}, {1.0, -1.0}));
    sections.emplace_back("classifier", rtc::Tensor::from({1, 3}, {0.1, 0.2, 0.3}));
    const std::string path = temp_path("ckpt.rtc1");
    rtc::io::save_checkpoint(sections, path);
    auto back = rtc::io::load_checkpoint(path);
    ASSERT_EQ(back.size(), sections.size());
    for (std::size_t i = 0; i < sections.size(); ++i) {
        EXPECT_EQ(back[i].first, sections[i].first);
        EXPECT_EQ(back[i].second.values(), sections[i].second.values());
        EXPECT_EQ(back[i].second.shape(), sections[i].second.shape());
    }
    std::remove(path.c_str());
}

TEST(Pgm, RoundTripIdentity) {
    rtc::io::Mask m;
    m.height = 3;
    m.width = 5;
    m.labels = {0, 1, 2, 3, 4, 4, 3, 2, 1, 0, 0, 0, 2, 2, 1};
    const std::string path = temp_path("m.pgm");
    rtc::io::save_mask(m, path);
    rtc::io::Mask back = rtc::io::load_mask(path);
    EXPECT_EQ(back.height, m.height);
    EXPECT_EQ(back.width, m.width);
    EXPECT_EQ(back.labels, m.labels);
    std::remove(path.c_str());
}

TEST(Pgm, EmptyMaskPayloadIsAllZero) {
    rtc::io::Mask m;
    m.height = 2;
    m.width = 3;
    m.labels.assign(6, 0);
    const std::string buf = rtc::io::encode_mask(m);
    const std::string expect_header = "P5\n3 2\n255\n";
    ASSERT_EQ(buf.size(), expect_header.size() + 6);
    for (std::size_t i = 0; i < 6; ++i)
        EXPECT_EQ(buf[expect_header.size() + i], '\0');
}

// Frozen byte-level layout for a known 2x2 mask.
TEST(Pgm, ExactBytes) {
    rtc::io::Mask m;
    m.height = 2;
    m.width = 2;
    m.labels = {0, 1, 2, 0};
    const std::string buf = rtc::io::encode_mask(m);
    std::string expect = "P5\n2 2\n255\n";
    expect.push_back('\0');
    expect.push_back('\1');
    expect.push_back('\2');
    expect.push_back('\0');
    EXPECT_EQ(buf, expect);
}

TEST(Pgm, MalformedHeaderReportsOffset) {
    try {
        rtc::io::decode_mask("P5\nxx 2\n255\n....");
        FAIL() << "expected parse_error";
    } catch (const rtc::io::parse_error& e) {
        EXPECT_EQ(e.offset(), 3u);
    }
    EXPECT_THROW(rtc::io::decode_mask("P6\n2 2\n255\nabcd"), rtc::io::parse_error);
}

}  // namespace
