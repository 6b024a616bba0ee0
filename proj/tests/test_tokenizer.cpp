#include "mmv/tokenizer.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace mmv;

namespace {

Volume random_volume(Dims d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n(0, 1);
  Volume v(d);
  for (auto& x : v.data) x = n(rng);
  return v;
}

}  // namespace

TEST(Patchify, GridArithmetic) {
  const auto spec = PatchGridSpec::for_volume({160, 176, 144}, 16);
  EXPECT_EQ(spec.grid, (Dims{10, 11, 9}));
  EXPECT_EQ(spec.count(), 990);
  const auto a = patchify(Volume(Dims{64, 64, 64}), 16);
  EXPECT_EQ(a.rows(), 64);
  EXPECT_EQ(a.spec.patch_voxels(), 4096);
  EXPECT_EQ(a.data.size(), 64u * 4096u);
  EXPECT_THROW(patchify(Volume(Dims{64, 60, 64}), 16), ValidationError);
}

TEST(Patchify, CanonicalZMajorOrder) {
  const auto v = random_volume({8, 12, 8}, 1);
  const auto a = patchify(v, 4);
  EXPECT_EQ(a.coords[1], (Coord{0, 0, 1}));
  EXPECT_EQ(a.coords[2], (Coord{0, 1, 0}));
  EXPECT_EQ(a.coords[6], (Coord{1, 0, 0}));
  for (std::int64_t i = 0; i < a.rows(); ++i) EXPECT_EQ(a.spec.linear(a.coords[i]), i);
  // row 5 = grid (0,2,1): voxel (dz,dy,dx) lives at offset (dz*4+dy)*4+dx
  const auto r = a.row(5);
  for (int dz = 0; dz < 4; ++dz)
    for (int dy = 0; dy < 4; ++dy)
      for (int dx = 0; dx < 4; ++dx) EXPECT_EQ(r[(dz * 4 + dy) * 4 + dx], v.at(dz, 8 + dy, 4 + dx));
}

TEST(Patchify, RoundTripBitExact) {
  const std::array<Dims, 3> shapes{Dims{32, 48, 16}, Dims{16, 16, 16}, Dims{160, 176, 144}};
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    const Dims d = shapes[seed % 3];
    const auto v = random_volume(d, seed);
    EXPECT_EQ(unpatchify(patchify(v, 16)).data, v.data);
  }
  const Volume zeros(Dims{16, 32, 16});
  EXPECT_EQ(unpatchify(patchify(zeros, 8)).data, zeros.data);
}

TEST(Unpatchify, PlacementFollowsCoordinates) {
  const auto v = random_volume({8, 8, 12}, 3);
  const auto a = patchify(v, 4);
  std::vector<std::int64_t> perm(static_cast<std::size_t>(a.rows()));
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), std::mt19937_64(5));
  EXPECT_EQ(unpatchify(a.select(perm)).data, v.data);
}

TEST(Unpatchify, Errors) {
  const auto a = patchify(random_volume({8, 8, 8}, 4), 4);
  EXPECT_THROW(unpatchify(a.select({0, 1, 2})), ValidationError);
  EXPECT_THROW(unpatchify(a.select({0, 1, 2, 3, 4, 5, 6, 6})), ValidationError);
}

TEST(PosEmbed, OriginIsSinZeroCosOne) {
  const auto t = sincos_pos_embed_3d({10, 11, 9}, 768);
  for (int block = 0; block < 3; ++block)
    for (int i = 0; i < 128; ++i) {
      EXPECT_EQ(t[block * 256 + i], 0.0);
      EXPECT_EQ(t[block * 256 + 128 + i], 1.0);
    }
}

TEST(PosEmbed, AllPositionsDistinct) {
  for (std::int64_t dim : {768, 384, 24}) {
    const Dims g{10, 11, 9};
    const auto t = sincos_pos_embed_3d(g, dim);
    double min_d2 = 1e300;
    for (std::int64_t a = 0; a < g.voxels(); ++a)
      for (std::int64_t b = a + 1; b < g.voxels(); ++b) {
        double d2 = 0;
        for (std::int64_t k = 0; k < dim; ++k) {
          const double diff = t[a * dim + k] - t[b * dim + k];
          d2 += diff * diff;
        }
        min_d2 = std::min(min_d2, d2);
      }
    EXPECT_GT(min_d2, 1e-3) << "dim " << dim;
  }
}

TEST(PosEmbed, AxisSeparability) {
  const Dims g{4, 4, 4};
  const std::int64_t dim = 48, block = 16;
  const auto t = sincos_pos_embed_3d(g, dim);
  const PatchGridSpec spec{1, g};
  const auto a = spec.linear({1, 2, 0}), b = spec.linear({2, 2, 0});
  for (std::int64_t k = 0; k < dim; ++k) {
    if (k < block) continue;
    EXPECT_EQ(t[a * dim + k], t[b * dim + k]);
  }
  double diff = 0;
  for (std::int64_t k = 0; k < block; ++k) diff += std::abs(t[a * dim + k] - t[b * dim + k]);
  EXPECT_GT(diff, 0.1);
}

TEST(PosEmbed, StableAndValidated) {
  EXPECT_EQ(sincos_pos_embed_3d({3, 4, 5}, 36), sincos_pos_embed_3d({3, 4, 5}, 36));
  EXPECT_THROW(sincos_pos_embed_3d({3, 4, 5}, 32), std::invalid_argument);
}

TEST(ProjectTokens, ZeroPatchesGivePositions) {
  nn::ParamStore<double> ps;
  nn::Rng rng(1);
  Adapters<double> ad(ps, "adapters", 4, 12, rng);
  for (auto m : kRegistry) std::fill(ad.modality_embed[index_of(m)].mutable_data().begin(),
                                     ad.modality_embed[index_of(m)].mutable_data().end(), 0.0);
  const auto patches = patchify(Volume(Dims{8, 12, 8}), 4);
  const auto pos = pos_embed_tensor<double>(patches.spec.grid, 12);
  const auto ts = project_tokens(patches, Modality::t2, ad, pos);
  EXPECT_EQ(ts.size(), 12);
  ASSERT_EQ(ts.tokens.shape(), (ag::Shape{12, 12}));
  for (std::size_t i = 0; i < ts.tokens.size(); ++i) EXPECT_EQ(ts.tokens.at(i), pos.at(i));
}

TEST(ProjectTokens, ModalitySpecificAndAffine) {
  nn::ParamStore<double> ps;
  nn::Rng rng(2);
  Adapters<double> ad(ps, "adapters", 4, 12, rng);
  const auto x = patchify(random_volume({8, 8, 8}, 7), 4), y = patchify(random_volume({8, 8, 8}, 8), 4);
  const auto pos = pos_embed_tensor<double>(x.spec.grid, 12);
  const auto t1 = project_tokens(x, Modality::t1, ad, pos), t2 = project_tokens(x, Modality::t2, ad, pos);
  double diff = 0;
  for (std::size_t i = 0; i < t1.tokens.size(); ++i) diff += std::abs(t1.tokens.at(i) - t2.tokens.at(i));
  EXPECT_GT(diff, 1e-3);
  // f(a x + b y) = a f(x) + b f(y) + (1 - a - b) f(0)
  const double a = 0.3, b = -1.7;
  PatchArray mix = x;
  for (std::size_t i = 0; i < mix.data.size(); ++i) mix.data[i] = static_cast<float>(a * x.data[i] + b * y.data[i]);
  PatchArray zero = x;
  std::fill(zero.data.begin(), zero.data.end(), 0.0f);
  const auto fm = project_tokens(mix, Modality::fla, ad, pos), fx = project_tokens(x, Modality::fla, ad, pos),
             fy = project_tokens(y, Modality::fla, ad, pos), f0 = project_tokens(zero, Modality::fla, ad, pos);
  for (std::size_t i = 0; i < fm.tokens.size(); ++i)
    EXPECT_NEAR(fm.tokens.at(i), a * fx.tokens.at(i) + b * fy.tokens.at(i) + (1 - a - b) * f0.tokens.at(i), 1e-5);
}

TEST(ProjectTokens, MissingAdapter) {
  Adapters<double> empty;
  const auto x = patchify(Volume(Dims{4, 4, 4}), 4);
  EXPECT_THROW(project_tokens(x, Modality::t1, empty, pos_embed_tensor<double>(x.spec.grid, 6)), ValidationError);
}

TEST(PosEmbed, ModelTableZeroFillsTrailingColumns) {
  const Dims g{2, 3, 2};
  const auto t = pos_embed_tensor<double>(g, 32);
  const auto coded = sincos_pos_embed_3d(g, 30);
  for (std::int64_t r = 0; r < g.voxels(); ++r) {
    for (std::int64_t c = 0; c < 30; ++c) EXPECT_EQ(t.at(r * 32 + c), coded[r * 30 + c]);
    EXPECT_EQ(t.at(r * 32 + 30), 0.0);
    EXPECT_EQ(t.at(r * 32 + 31), 0.0);
  }
  const auto exact = pos_embed_tensor<double>(g, 36);
  const auto ref = sincos_pos_embed_3d(g, 36);
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_EQ(exact.at(i), ref[i]);
}
