#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "neuvv/image.hpp"

using namespace neuvv;

namespace {

std::filesystem::path tmp(const char* name) { return std::filesystem::temp_directory_path() / name; }

}  // namespace

TEST(Image, PngRoundTripIsExactOnQuantizedValues) {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> u(0, 255);
  for (int channels : {1, 3, 4}) {
    ImageF img(7, 5, channels);
    for (auto& v : img.data) v = static_cast<float>(u(rng) / 255.0);
    const auto back = decode_png(encode_png(img));
    ASSERT_EQ(back.channels, channels);
    EXPECT_EQ(back, img);
  }
}

TEST(Image, QuantizeMatchesPngStorage) {
  ImageD img(3, 1, 1);
  img.data = {0.1, 0.5, 1.7};
  quantize_u8(img);
  EXPECT_DOUBLE_EQ(img.data[0], 26 / 255.0);
  EXPECT_DOUBLE_EQ(img.data[1], 128 / 255.0);
  EXPECT_DOUBLE_EQ(img.data[2], 1.0);
}

TEST(Image, PfmRoundTripPreservesFloats) {
  ImageF img(4, 3, 1);
  for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = 0.1f * static_cast<float>(i) - 0.3f;
  const auto p = tmp("neuvv_test.pfm");
  write_pfm(p, img);
  EXPECT_EQ(read_pfm(p), img);
  std::filesystem::remove(p);
}

TEST(Image, FileErrors) {
  EXPECT_THROW(read_png(tmp("neuvv_does_not_exist.png")), IoError);
  EXPECT_THROW(decode_png({1, 2, 3}), IoError);
  ImageF two(2, 2, 2);
  EXPECT_THROW(encode_png(two), InvalidArgument);
}
