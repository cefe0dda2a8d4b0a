#include <gtest/gtest.h>

#include <set>

#include "minsharp/dataset.hpp"

using namespace minsharp;

namespace {

std::vector<std::uint8_t> handcrafted_images() {
  return {0x00, 0x00, 0x08, 0x03, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2, 0, 255, 128, 0};
}

std::vector<std::uint8_t> handcrafted_labels() { return {0x00, 0x00, 0x08, 0x01, 0, 0, 0, 2, 3, 9}; }

IdxError::Kind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const IdxError& e) {
    return e.kind();
  }
  ADD_FAILURE() << "expected IdxError";
  return IdxError::Kind::BadValue;
}

}  // namespace

TEST(Idx, ParsesHandcraftedImage) {
  const Matrix m = parse_idx_images(handcrafted_images());
  ASSERT_EQ(m.rows(), 1u);
  ASSERT_EQ(m.cols(), 4u);
  EXPECT_EQ(m(0, 0), 0.0);
  EXPECT_EQ(m(0, 1), 1.0);
  EXPECT_EQ(m(0, 2), 128.0 / 255.0);
  EXPECT_EQ(m(0, 3), 0.0);
}

TEST(Idx, ParsesLabels) {
  EXPECT_EQ(parse_idx_labels(handcrafted_labels()), (std::vector<Label>{3, 9}));
}

TEST(Idx, DistinctErrors) {
  auto labels_as_images = handcrafted_labels();
  EXPECT_EQ(kind_of([&] { (void)parse_idx_images(labels_as_images); }), IdxError::Kind::WrongMagic);

  auto truncated = handcrafted_images();
  truncated.pop_back();
  EXPECT_EQ(kind_of([&] { (void)parse_idx_images(truncated); }), IdxError::Kind::Truncated);

  auto short_header = handcrafted_images();
  short_header.resize(10);
  EXPECT_EQ(kind_of([&] { (void)parse_idx_images(short_header); }), IdxError::Kind::Truncated);

  auto truncated_labels = handcrafted_labels();
  truncated_labels.pop_back();
  EXPECT_EQ(kind_of([&] { (void)parse_idx_labels(truncated_labels); }), IdxError::Kind::Truncated);

  // one image, two labels
  EXPECT_EQ(kind_of([&] { (void)dataset_from_idx(handcrafted_images(), handcrafted_labels()); }),
            IdxError::Kind::CountMismatch);
}

TEST(Idx, WrongMagicMessage) {
  try {
    (void)parse_idx_images(handcrafted_labels());
  } catch (const IdxError& e) {
    EXPECT_NE(std::string(e.what()).find("wrong magic"), std::string::npos);
  }
}

TEST(Idx, RoundTripProperty) {
  Rng rng(21);
  for (int trial = 0; trial < 5; ++trial) {
    const std::size_t n = 1 + rng.below(20);
    Dataset d;
    d.num_classes = 10;
    d.features = Matrix(n, 12);
    for (double& v : d.features.data()) v = static_cast<double>(rng.below(256)) / 255.0;
    for (std::size_t i = 0; i < n; ++i) d.labels.push_back(rng.below(10));

    const auto images = serialize_idx_images(d.features, 3, 4);
    const auto labels = serialize_idx_labels(d.labels);
    const Dataset back = dataset_from_idx(images, labels);
    EXPECT_EQ(back.features, d.features);
    EXPECT_EQ(back.labels, d.labels);
  }
}

TEST(Idx, LoadMissingFileIsIoError) {
  EXPECT_THROW((void)load_idx_dataset("/nonexistent/images", "/nonexistent/labels"), IoError);
}

#ifdef MINSHARP_DATA_DIR
TEST(Idx, BundledMnistSubset) {
  const auto train = load_idx_dataset(std::string(MINSHARP_DATA_DIR) + "/mnist/train-images-idx3-ubyte",
                                      std::string(MINSHARP_DATA_DIR) + "/mnist/train-labels-idx1-ubyte");
  EXPECT_EQ(train.size(), 2000u);
  EXPECT_EQ(train.input_dim(), 784u);
  for (double v : train.features.data()) {
    ASSERT_GE(v, 0.0);
    ASSERT_LE(v, 1.0);
  }
}
#endif

namespace {

Dataset labelled(std::size_t n, std::size_t k, Rng& rng) {
  Dataset d;
  d.num_classes = k;
  d.features = gaussian_fill(rng, n, 3, 1.0);
  for (std::size_t i = 0; i < n; ++i) d.labels.push_back(i % k);
  return d;
}

}  // namespace

TEST(CorruptLabels, ZeroRatioIsIdentity) {
  Rng rng(1);
  const Dataset d = labelled(100, 10, rng);
  Rng r2(7);
  const Dataset c = corrupt_labels(d, 0.0, r2);
  EXPECT_EQ(c.labels, d.labels);
  EXPECT_EQ(c.features, d.features);
}

TEST(CorruptLabels, FullRatioChangesAboutNineTenths) {
  Rng rng(1);
  const Dataset d = labelled(10000, 10, rng);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng r(seed);
    const Dataset c = corrupt_labels(d, 1.0, r);
    std::size_t changed = 0;
    for (std::size_t i = 0; i < d.size(); ++i) changed += c.labels[i] != d.labels[i];
    EXPECT_NEAR(static_cast<double>(changed) / d.size(), 0.9, 0.02) << "seed " << seed;
    EXPECT_EQ(c.features, d.features);
  }
}

TEST(CorruptLabels, Deterministic) {
  Rng rng(1);
  const Dataset d = labelled(500, 10, rng);
  Rng a(99), b(99);
  EXPECT_EQ(corrupt_labels(d, 0.3, a).labels, corrupt_labels(d, 0.3, b).labels);
}

TEST(CorruptLabels, SelectsExactlyRoundedCount) {
  Rng rng(1);
  const Dataset d = labelled(37, 4, rng);
  for (double ratio : {0.1, 0.25, 0.5, 0.9}) {
    Rng a(5), b(5);
    const auto idx = corruption_indices(d.size(), ratio, a);
    EXPECT_EQ(idx.size(), static_cast<std::size_t>(std::llround(ratio * 37)));
    EXPECT_EQ(std::set<std::size_t>(idx.begin(), idx.end()).size(), idx.size());
    // positions outside the selection keep their label
    const Dataset c = corrupt_labels(d, ratio, b);
    std::set<std::size_t> sel(idx.begin(), idx.end());
    for (std::size_t i = 0; i < d.size(); ++i)
      if (!sel.count(i)) {
        EXPECT_EQ(c.labels[i], d.labels[i]);
      }
  }
}

TEST(CorruptLabels, RejectsOutOfRangeRatio) {
  Rng rng(1);
  const Dataset d = labelled(10, 2, rng);
  EXPECT_THROW((void)corrupt_labels(d, 1.5, rng), std::invalid_argument);
  EXPECT_THROW((void)corrupt_labels(d, -0.1, rng), std::invalid_argument);
}

TEST(SyntheticBlobs, BalancedClasses) {
  Rng rng(3);
  const Dataset d = synthetic_blobs(10, 4, 2, 1.0, rng);
  std::size_t zeros = 0;
  for (Label y : d.labels) zeros += y == 0;
  EXPECT_EQ(zeros, 5u);

  const Dataset e = synthetic_blobs(103, 4, 10, 1.0, rng);
  std::vector<std::size_t> counts(10, 0);
  for (Label y : e.labels) ++counts[y];
  const auto [lo, hi] = std::minmax_element(counts.begin(), counts.end());
  EXPECT_LE(*hi - *lo, 1u);
}

TEST(SyntheticBlobs, RejectsInvalidCounts) {
  Rng rng(3);
  EXPECT_THROW((void)synthetic_blobs(3, 4, 5, 1.0, rng), std::invalid_argument);
  EXPECT_THROW((void)synthetic_blobs(10, 0, 2, 1.0, rng), std::invalid_argument);
  EXPECT_THROW((void)synthetic_blobs(10, 4, 2, -1.0, rng), std::invalid_argument);
}

TEST(Dataset, ValidateCatchesBadLabels) {
  Dataset d;
  d.num_classes = 2;
  d.features = Matrix(2, 1);
  d.labels = {0, 2};
  EXPECT_THROW(d.validate(), std::invalid_argument);
  d.labels = {0};
  EXPECT_THROW(d.validate(), std::invalid_argument);
}

TEST(Dataset, ShuffledSubsetAndFingerprint) {
  Rng rng(3);
  const Dataset d = synthetic_blobs(50, 4, 5, 2.0, rng);
  Rng a(1), b(1);
  const Dataset s1 = shuffled_subset(d, 20, a);
  const Dataset s2 = shuffled_subset(d, 20, b);
  EXPECT_EQ(s1.labels, s2.labels);
  EXPECT_EQ(fingerprint(s1), fingerprint(s2));
  EXPECT_NE(fingerprint(s1), fingerprint(d));
  EXPECT_THROW((void)shuffled_subset(d, 51, a), std::invalid_argument);
}
