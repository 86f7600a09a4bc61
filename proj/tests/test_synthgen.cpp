#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "dalab/detector.hpp"
#include "dalab/synthgen.hpp"

using namespace dalab;

namespace {

std::vector<double> row(const Tensor& cells, std::size_t c) {
  const std::size_t d = cells.shape().back();
  return {cells.values().begin() + static_cast<std::ptrdiff_t>(c * d),
          cells.values().begin() + static_cast<std::ptrdiff_t>((c + 1) * d)};
}

double distance(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

}  // namespace

TEST(GenConfig, Validation) {
  GenConfig c;
  EXPECT_NO_THROW(c.validate());
  c.class_gap = {0.0, 0.5};
  EXPECT_THROW(c.validate(), Error);
  c = GenConfig{};
  c.num_classes = 0;
  c.class_gap = {};
  EXPECT_THROW(c.validate(), Error);
  c = GenConfig{};
  c.grid_size = 1;
  c.max_objects = 2;
  EXPECT_THROW(c.validate(), Error);
  c = GenConfig{};
  c.noise_sigma = -0.1;
  EXPECT_THROW(c.validate(), Error);
  c = GenConfig{};
  c.class_gap = {0.0, -0.5, 1.0};
  EXPECT_THROW(c.validate(), Error);
}

TEST(Generate, CountMustBePositive) {
  EXPECT_THROW(generate_dataset(GenConfig{}, Domain::kSource, 0, 1), Error);
  EXPECT_THROW(generate_dataset(GenConfig{}, Domain::kSource, -3, 1), Error);
}

TEST(Generate, ZeroGapTargetEqualsSource) {
  GenConfig c;
  c.class_gap = {0.0, 0.0, 0.0};
  c.global_style_shift = 0.0;
  const Dataset s = generate_dataset(c, Domain::kSource, 20, 5);
  const Dataset t = generate_dataset(c, Domain::kTarget, 20, 5);
  for (std::size_t i = 0; i < s.size(); ++i) EXPECT_EQ(s.cells(i), t.cells(i));
}

TEST(Generate, SameInputsSameDigest) {
  const Dataset a = generate_dataset(GenConfig{}, Domain::kTarget, 30, 9);
  const Dataset b = generate_dataset(GenConfig{}, Domain::kTarget, 30, 9);
  EXPECT_EQ(dataset_digest(a), dataset_digest(b));
  EXPECT_EQ(dataset_digest(a).size(), 64u);
  EXPECT_EQ(dataset_digest(a).find_first_not_of("0123456789abcdef"), std::string::npos);
}

TEST(Generate, DifferentSeedsDifferentDigests) {
  EXPECT_NE(dataset_digest(generate_dataset(GenConfig{}, Domain::kSource, 10, 1)),
            dataset_digest(generate_dataset(GenConfig{}, Domain::kSource, 10, 2)));
  GenConfig other;
  other.seed = 1234;
  EXPECT_NE(dataset_digest(generate_dataset(GenConfig{}, Domain::kSource, 10, 1)),
            dataset_digest(generate_dataset(other, Domain::kSource, 10, 1)));
}

TEST(Generate, AnnotationContract) {
  const GenConfig c;
  const Dataset ds = generate_dataset(c, Domain::kSource, 300, 3);
  std::set<std::size_t> counts;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto& anns = ds.ground_truth(i);
    counts.insert(anns.size());
    ASSERT_GE(anns.size(), 1u);
    ASSERT_LE(anns.size(), 4u);
    std::set<std::size_t> centres;
    for (const Annotation& a : anns) {
      EXPECT_GE(a.label, 1);
      EXPECT_LE(a.label, 3);
      EXPECT_GE(a.box.w, 0.08);
      EXPECT_LE(a.box.w, 0.3);
      EXPECT_GE(a.box.h, 0.08);
      EXPECT_LE(a.box.h, 0.3);
      EXPECT_GE(a.box.cx - a.box.w / 2, 0.0);
      EXPECT_LE(a.box.cx + a.box.w / 2, 1.0);
      EXPECT_GE(a.box.cy - a.box.h / 2, 0.0);
      EXPECT_LE(a.box.cy + a.box.h / 2, 1.0);
      EXPECT_TRUE(centres.insert(center_cell(a.box, c.grid_size).index(c.grid_size)).second);
    }
    EXPECT_EQ(ds.cells(i).shape(), (Shape{8, 8, 16}));
  }
  EXPECT_EQ(counts, (std::set<std::size_t>{1, 2, 3, 4}));
}

TEST(Generate, DomainTagIsShared) {
  const Dataset ds = generate_dataset(GenConfig{}, Domain::kTarget, 5, 3, Split::kTest);
  EXPECT_EQ(ds.domain(), Domain::kTarget);
  EXPECT_EQ(ds.split(), Split::kTest);
}

TEST(Generate, CentreCellCarriesObjectSignal) {
  GenConfig c;
  c.noise_sigma = 0.0;
  const World world(c);
  const Dataset ds = generate_dataset(c, Domain::kSource, 20, 4);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const CellTargets t = match_targets(ds.ground_truth(i), c.grid_size);
    for (std::size_t cell = 0; cell < t.labels.size(); ++cell) {
      const std::vector<double> expect =
          world.clean_observation(t.labels[cell], t.labels[cell] > 0 ? &t.offsets[cell] : nullptr);
      const std::vector<double> got = row(ds.cells(i), cell);
      for (std::size_t j = 0; j < got.size(); ++j) EXPECT_NEAR(got[j], expect[j], 1e-12);
    }
  }
}

TEST(Generate, BackgroundDiffersOnlyByStyleShift) {
  GenConfig c;
  c.global_style_shift = 0.3;
  const Dataset s = generate_dataset(c, Domain::kSource, 10, 8);
  const Dataset t = generate_dataset(c, Domain::kTarget, 10, 8);
  std::optional<std::vector<double>> shift;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const CellTargets tg = match_targets(s.ground_truth(i), c.grid_size);
    for (std::size_t cell = 0; cell < tg.labels.size(); ++cell) {
      if (tg.labels[cell] != 0) continue;
      const auto a = row(s.cells(i), cell), b = row(t.cells(i), cell);
      std::vector<double> d(a.size());
      for (std::size_t j = 0; j < a.size(); ++j) d[j] = b[j] - a[j];
      if (!shift) {
        shift = d;
        EXPECT_NEAR(distance(d, std::vector<double>(d.size(), 0.0)), 0.3, 1e-12);
      }
      for (std::size_t j = 0; j < d.size(); ++j) EXPECT_NEAR(d[j], (*shift)[j], 1e-12);
    }
  }
}

TEST(Generate, ClassMeanGapOrderedByGamma) {
  GenConfig c;
  const Dataset s = generate_dataset(c, Domain::kSource, 1000, 21);
  const Dataset t = generate_dataset(c, Domain::kTarget, 1000, 22);
  auto class_means = [&](const Dataset& ds) {
    std::vector<std::vector<double>> sum(c.num_classes, std::vector<double>(c.obs_dim, 0.0));
    std::vector<std::size_t> n(c.num_classes, 0);
    for (std::size_t i = 0; i < ds.size(); ++i) {
      const CellTargets tg = match_targets(ds.ground_truth(i), c.grid_size);
      for (std::size_t cell = 0; cell < tg.labels.size(); ++cell) {
        if (tg.labels[cell] == 0) continue;
        const std::size_t k = static_cast<std::size_t>(tg.labels[cell] - 1);
        const auto r = row(ds.cells(i), cell);
        for (std::size_t j = 0; j < r.size(); ++j) sum[k][j] += r[j];
        ++n[k];
      }
    }
    for (std::size_t k = 0; k < c.num_classes; ++k) {
      EXPECT_GE(n[k], 500u);
      for (double& x : sum[k]) x /= static_cast<double>(n[k]);
    }
    return sum;
  };
  const auto ms = class_means(s), mt = class_means(t);
  const double d1 = distance(ms[0], mt[0]), d2 = distance(ms[1], mt[1]), d3 = distance(ms[2], mt[2]);
  EXPECT_LT(d1, d2);
  EXPECT_LT(d2, d3);
}

TEST(Serialization, RoundTripAndFile) {
  const Dataset ds = generate_dataset(GenConfig{}, Domain::kTarget, 7, 2, Split::kTest);
  const Dataset back = Dataset::deserialize(ds.serialize());
  EXPECT_EQ(dataset_digest(back), dataset_digest(ds));
  EXPECT_EQ(back.domain(), Domain::kTarget);
  EXPECT_EQ(back.split(), Split::kTest);
  const auto path = std::filesystem::temp_directory_path() / "dalab_synthgen_roundtrip.bin";
  ds.save(path);
  EXPECT_EQ(dataset_digest(Dataset::load(path)), dataset_digest(ds));
  std::filesystem::remove(path);
}

TEST(Serialization, TruncatedInputRejected) {
  const std::string bytes = generate_dataset(GenConfig{}, Domain::kSource, 2, 2).serialize();
  EXPECT_THROW(Dataset::deserialize(bytes.substr(0, bytes.size() / 2)), Error);
}

TEST(Ufda, OneShotUnionBound) {
  const Dataset ds = generate_dataset(GenConfig{}, Domain::kTarget, 200, 4);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Dataset sub = sample_ufda_subset(ds, 1, seed);
    EXPECT_GE(sub.size(), 1u);
    EXPECT_LE(sub.size(), 3u);
    EXPECT_TRUE(sub.labels_withheld());
  }
}

TEST(Ufda, DisjointSingleClassImagesGiveExactCount) {
  GenConfig c;
  c.max_objects = 1;
  const Dataset ds = generate_dataset(c, Domain::kTarget, 200, 4);
  EXPECT_EQ(sample_ufda_subset(ds, 3, 1).size(), 9u);
}

TEST(Ufda, DeterministicGivenSeed) {
  const Dataset ds = generate_dataset(GenConfig{}, Domain::kTarget, 200, 4);
  EXPECT_EQ(dataset_digest(sample_ufda_subset(ds, 2, 7)), dataset_digest(sample_ufda_subset(ds, 2, 7)));
}

TEST(Ufda, EveryClassQuotaIsMet) {
  const Dataset ds = generate_dataset(GenConfig{}, Domain::kTarget, 200, 4);
  const Dataset sub = sample_ufda_subset(ds, 3, 5);
  std::vector<std::size_t> containing(4, 0);
  for (std::size_t i = 0; i < sub.size(); ++i) {
    std::set<int> labels;
    for (const Annotation& a : sub.ground_truth(i)) labels.insert(a.label);
    for (int l : labels) ++containing[static_cast<std::size_t>(l)];
  }
  for (std::size_t k = 1; k <= 3; ++k) EXPECT_GE(containing[k], 3u);
  EXPECT_EQ(sub.label_reads(), 0u);
}

TEST(Ufda, RareClassErrorNamesTheClass) {
  GenConfig c;
  c.max_objects = 1;
  const Dataset ds = generate_dataset(c, Domain::kTarget, 1, 4);
  const int present = ds.ground_truth(0)[0].label;
  const int missing = present == 1 ? 2 : 1;
  try {
    sample_ufda_subset(ds, 1, 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("class " + std::to_string(missing)), std::string::npos);
  }
}

TEST(Withheld, LabelReadsAreCounted) {
  const Dataset ds = generate_dataset(GenConfig{}, Domain::kTarget, 5, 4).withheld();
  EXPECT_EQ(ds.label_reads(), 0u);
  ds.ground_truth(0);
  EXPECT_EQ(ds.label_reads(), 0u);
  ds.labels(1);
  EXPECT_EQ(ds.label_reads(), 1u);
}
