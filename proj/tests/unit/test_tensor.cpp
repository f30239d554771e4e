#include <gtest/gtest.h>

#include <sstream>

#include "latentedit/errors.hpp"
#include "latentedit/tensor.hpp"
#include "latentedit/tensor_io.hpp"
#include "test_util.hpp"

using namespace latentedit;
using latentedit::testing::random_latent;
using latentedit::testing::random_mask;

TEST(LatentImage, RejectsNonFiniteAndEmpty) {
  LatentImage z(2, 2);
  EXPECT_NO_THROW(z.validate());
  z.at(1, 1, 3) = std::nan("");
  EXPECT_THROW(z.validate(), ValidationError);
  EXPECT_THROW(LatentImage(0, 3).validate(), ValidationError);
}

TEST(Mask, UnionIouAndComplement) {
  const Mask a = latentedit::testing::rect_mask(4, 4, 0, 0, 2, 4);
  const Mask b = latentedit::testing::rect_mask(4, 4, 1, 0, 3, 4);
  EXPECT_EQ(mask_union(a, b).area(), 12u);
  EXPECT_DOUBLE_EQ(mask_iou(a, b), 4.0 / 12.0);
  EXPECT_DOUBLE_EQ(mask_iou(Mask(3, 3), Mask(3, 3)), 1.0);
  EXPECT_EQ(a.complement().area(), 8u);
  EXPECT_TRUE(a.subset_of(mask_union(a, b)));
  EXPECT_FALSE(mask_union(a, b).subset_of(a));
}

TEST(Mask, DilateSinglePixelGivesThreeByThree) {
  Mask m(5, 5);
  m.at(2, 2) = 1;
  const Mask d = dilate(m, 1);
  EXPECT_EQ(d.area(), 9u);
  EXPECT_EQ(d.at(1, 1), 1);
  EXPECT_EQ(d.at(0, 2), 0);
}

TEST(TensorIo, RoundTripFloat64IsBitExact) {
  const LatentImage z = random_latent(5, 3, 1);
  std::stringstream ss;
  write_tensor(ss, to_blob(z, DType::kFloat64));
  EXPECT_EQ(ss.str().size(), kTensorHeaderBytes + z.size() * 8);
  EXPECT_EQ(ss.str().substr(0, 4), "LTE1");
  const LatentImage back = latent_from_blob(read_tensor(ss));
  EXPECT_EQ(back, z);
}

TEST(TensorIo, Float32PayloadRoundsOnce) {
  const LatentImage z = random_latent(2, 2, 2);
  std::stringstream ss;
  write_tensor(ss, to_blob(z));
  EXPECT_EQ(ss.str().size(), kTensorHeaderBytes + z.size() * 4);
  const LatentImage back = latent_from_blob(read_tensor(ss));
  for (std::size_t i = 0; i < z.size(); ++i) {
    EXPECT_EQ(back.values()[i], static_cast<double>(static_cast<float>(z.values()[i])));
  }
}

TEST(TensorIo, RejectsBadMagicAndTruncation) {
  std::stringstream ss;
  write_tensor(ss, to_blob(random_latent(2, 2, 3)));
  std::string bytes = ss.str();
  std::string bad = bytes;
  bad[0] = 'X';
  std::stringstream s1(bad);
  EXPECT_THROW(read_tensor(s1), FormatError);
  std::stringstream s2(bytes.substr(0, bytes.size() - 3));
  EXPECT_THROW(read_tensor(s2), FormatError);
}

TEST(TensorIo, LatentNeedsFourChannels) {
  TensorBlob blob;
  blob.dims = {2, 2, 3};
  blob.values.assign(12, 0.0);
  EXPECT_THROW(latent_from_blob(blob), Error);
}

TEST(Mask, RandomMasksAreBinary) {
  const Mask m = random_mask(7, 9, 4);
  for (auto v : m.values()) EXPECT_TRUE(v == 0 || v == 1);
}
