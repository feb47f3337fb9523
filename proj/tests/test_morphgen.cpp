#include <gtest/gtest.h>

#include <random>
#include <set>

#include "morphquad/morphgen.hpp"

using namespace morphquad;

namespace {

ImageTensor random_image(std::mt19937_64& rng, int h = 6, int w = 5) {
  ImageTensor img(h, w, 1);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (auto& v : img.values) v = u(rng);
  return img;
}

SyntheticDataset small_dataset(int ids = 6, int enroll = 2, std::uint64_t seed = 3) {
  SyntheticConfig cfg;
  cfg.num_identities = ids;
  cfg.samples_per_identity_enroll = enroll;
  cfg.samples_per_identity_ref = 1;
  cfg.image_size = 16;
  cfg.seed = seed;
  return synth_generate(cfg);
}

MorphInputs inputs(const SyntheticDataset& ds, const BlobRenderer& r) { return {ds.images, &ds.sample_latents, &r}; }

}  // namespace

TEST(Blend, EndpointsAndIdempotence) {
  std::mt19937_64 rng(1);
  const auto a = random_image(rng), b = random_image(rng);
  EXPECT_EQ(blend_morph(a, b, 0.0), a);
  EXPECT_EQ(blend_morph(a, b, 1.0), b);
  EXPECT_EQ(blend_morph(a, a, 0.5), a);
}

TEST(Blend, SinglePixelArithmetic) {
  ImageTensor a(1, 1, 1), b(1, 1, 1);
  a.values[0] = 0.2f;
  b.values[0] = 0.6f;
  EXPECT_FLOAT_EQ(blend_morph(a, b, 0.5).values[0], 0.4f);
}

TEST(Blend, ConvexPerPixel) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> c(0.0, 1.0);
  for (int t = 0; t < 200; ++t) {
    const auto a = random_image(rng), b = random_image(rng);
    const auto m = blend_morph(a, b, c(rng));
    for (std::size_t i = 0; i < m.values.size(); ++i) {
      EXPECT_GE(m.values[i], std::min(a.values[i], b.values[i]));
      EXPECT_LE(m.values[i], std::max(a.values[i], b.values[i]));
    }
  }
}

TEST(Blend, SymmetricUnderSwapForExactComplements) {
  std::mt19937_64 rng(3);
  for (double c : {0.0, 0.125, 0.25, 0.375, 0.5, 0.75, 1.0}) {
    const auto a = random_image(rng), b = random_image(rng);
    EXPECT_EQ(blend_morph(a, b, c), blend_morph(b, a, 1.0 - c)) << c;
  }
}

TEST(Blend, RejectsBadInput) {
  ImageTensor a(2, 2, 1), b(2, 3, 1);
  EXPECT_THROW(blend_morph(a, b, 0.5), DimensionError);
  EXPECT_THROW(blend_morph(a, a, 1.5), ValidationError);
  EXPECT_THROW(blend_morph(a, a, -0.1), ValidationError);
}

TEST(LatentMorph, EndpointsAreCanonicalRenders) {
  const auto ds = small_dataset();
  const BlobRenderer r(16, 16, SyntheticConfig{}.renderer_seed);
  const IdentityId a{"id0000"}, b{"id0001"};
  EXPECT_EQ(latent_morph(a, b, 0.0, ds.identity_latents, r), r.render(ds.identity_latents.at(a)));
  EXPECT_EQ(latent_morph(a, b, 1.0, ds.identity_latents, r), r.render(ds.identity_latents.at(b)));
  EXPECT_EQ(latent_morph(a, b, 0.5, ds.identity_latents, r), latent_morph(a, b, 0.5, ds.identity_latents, r));
  EXPECT_THROW(latent_morph(a, IdentityId{"nobody"}, 0.5, ds.identity_latents, r), ValidationError);
}

TEST(LatentMorph, MidpointIsSymmetricAndSitsBetweenSources) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const auto ds = small_dataset(8, 1, seed);
    const BlobRenderer r(16, 16, SyntheticConfig{}.renderer_seed);
    const auto& lat = ds.identity_latents;
    // The renderer is nonlinear, so individual pairs can overshoot; on average
    // the midpoint render is nearer to either source than the sources are to each other.
    double to_source = 0.0, between = 0.0;
    for (auto i = lat.begin(); i != lat.end(); ++i)
      for (auto j = std::next(i); j != lat.end(); ++j) {
        const auto ca = r.render(i->second), cb = r.render(j->second);
        const auto m = latent_morph(i->first, j->first, 0.5, lat, r);
        EXPECT_EQ(m, latent_morph(j->first, i->first, 0.5, lat, r));
        to_source += pixel_distance(m, ca);
        between += pixel_distance(cb, ca);
      }
    EXPECT_LT(to_source, between);
  }
}

TEST(Selfmorph, SchemaAndIdempotence) {
  const auto ds = small_dataset();
  const BlobRenderer r(16, 16, SyntheticConfig{}.renderer_seed);
  const auto& recs = ds.manifest.records;
  const MorphMethod blend{MorphMethod::Kind::pixel_blend, 0.5};
  const auto same = make_selfmorph(recs[0], recs[0], blend, inputs(ds, r));
  EXPECT_EQ(same.image, ds.images.at(recs[0].sample_id));
  EXPECT_EQ(same.record.kind, SampleKind::selfmorph);
  ASSERT_EQ(same.record.source_identities.size(), 1u);
  EXPECT_EQ(same.record.source_identities[0], *recs[0].identity);
  EXPECT_EQ(same.record.identity, recs[0].identity);

  const auto other = std::find_if(recs.begin(), recs.end(), [&](auto& x) { return x.identity != recs[0].identity; });
  EXPECT_THROW(make_selfmorph(recs[0], *other, blend, inputs(ds, r)), ValidationError);
}

TEST(Selfmorph, BlendOfTwoNoisySamplesLiesBetweenThem) {
  const auto ds = small_dataset();
  const BlobRenderer r(16, 16, SyntheticConfig{}.renderer_seed);
  const auto& recs = ds.manifest.records;
  ASSERT_EQ(recs[0].identity, recs[1].identity);
  const auto& a = ds.images.at(recs[0].sample_id);
  const auto& b = ds.images.at(recs[1].sample_id);
  const auto sm = make_selfmorph(recs[0], recs[1], {MorphMethod::Kind::pixel_blend, 0.5}, inputs(ds, r));
  int strict = 0;
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    const float lo = std::min(a.values[i], b.values[i]), hi = std::max(a.values[i], b.values[i]);
    if (hi - lo > 1e-5f) {
      EXPECT_GT(sm.image.values[i], lo);
      EXPECT_LT(sm.image.values[i], hi);
      ++strict;
    }
  }
  EXPECT_GT(strict, 0);
}

TEST(Protocol, TwoIdentitiesOneSampleEachGiveTheOnlyPair) {
  const auto ds = small_dataset(2, 1);
  const auto p = gen_morph_pair_protocol(ds.manifest, 1, 9);
  ASSERT_EQ(p.pairs.size(), 1u);
  EXPECT_EQ(p.pairs[0], std::make_pair(SampleId("id0000_e00"), SampleId("id0001_e00")));
  EXPECT_THROW(gen_morph_pair_protocol(ds.manifest, 2, 9), ValidationError);
}

TEST(Protocol, DeterministicValidAndCovering) {
  const auto ds = small_dataset(11, 3);
  const auto p = gen_morph_pair_protocol(ds.manifest, 6, 4);
  EXPECT_EQ(p, gen_morph_pair_protocol(ds.manifest, 6, 4));
  EXPECT_NE(p, gen_morph_pair_protocol(ds.manifest, 6, 5));
  EXPECT_TRUE(validate_protocol(p, ds.manifest).empty());
  EXPECT_EQ(p.pairs.size(), 6u);
  std::set<IdentityId> seen;
  for (const auto& [l, r] : p.pairs) {
    seen.insert(*ds.manifest.find(l)->identity);
    seen.insert(*ds.manifest.find(r)->identity);
  }
  EXPECT_EQ(seen.size(), 11u);
}

TEST(Protocol, FullScalePairCount) {
  const auto ds = small_dataset(100, 4);
  const auto p = gen_morph_pair_protocol(ds.manifest, 2142, 1);
  EXPECT_EQ(p.pairs.size(), 2142u);
  EXPECT_TRUE(validate_protocol(p, ds.manifest).empty());
}

TEST(Protocol, ExhaustiveRequestEnumeratesEveryCrossPair) {
  const auto ds = small_dataset(4, 2);
  // 8 samples, 28 pairs, minus 4 same-identity pairs.
  const auto p = gen_morph_pair_protocol(ds.manifest, 24, 1);
  EXPECT_EQ(p.pairs.size(), 24u);
  EXPECT_TRUE(validate_protocol(p, ds.manifest).empty());
  EXPECT_THROW(gen_morph_pair_protocol(ds.manifest, 25, 1), ValidationError);
}

TEST(Protocol, ValidationFlagsBadPairs) {
  const auto ds = small_dataset(3, 2);
  MorphPairProtocol p;
  p.pairs = {{"id0000_e00", "id0000_e01"}, {"id0000_e00", "id0001_r00"}, {"id0000_e00", "ghost"},
             {"id0000_e00", "id0001_e00"}, {"id0001_e00", "id0000_e00"}};
  EXPECT_EQ(validate_protocol(p, ds.manifest).size(), 4u);
}

TEST(Protocol, CsvRoundTrip) {
  const auto ds = small_dataset();
  const auto p = gen_morph_pair_protocol(ds.manifest, 5, 12);
  EXPECT_EQ(parse_protocol(protocol_to_csv(p, "h")), p);
  EXPECT_THROW(parse_protocol("a,b\nx,y\n"), ParseError);
}

TEST(Materialize, AppendsOneMorphPerPairWithoutTouchingInputs) {
  const auto ds = small_dataset();
  const BlobRenderer r(16, 16, SyntheticConfig{}.renderer_seed);
  const auto p = gen_morph_pair_protocol(ds.manifest, 3, 2);
  for (auto kind : {MorphMethod::Kind::pixel_blend, MorphMethod::Kind::latent_blend}) {
    const MorphMethod method{kind, 0.5};
    const auto out = materialize_morphs(p, method, ds.manifest, inputs(ds, r));
    ASSERT_EQ(out.manifest.records.size(), ds.manifest.records.size() + 3);
    EXPECT_TRUE(std::equal(ds.manifest.records.begin(), ds.manifest.records.end(), out.manifest.records.begin()));
    for (std::size_t i = ds.manifest.records.size(); i < out.manifest.records.size(); ++i) {
      const auto& rec = out.manifest.records[i];
      EXPECT_EQ(rec.kind, SampleKind::morph);
      EXPECT_EQ(rec.modality, Modality::enrollment);
      EXPECT_FALSE(rec.identity.has_value());
      ASSERT_EQ(rec.source_identities.size(), 2u);
      EXPECT_NE(rec.source_identities[0], rec.source_identities[1]);
      EXPECT_NE(rec.sample_id.find(method.tag()), std::string::npos);
      validate_image(out.new_images.at(rec.sample_id));
    }
    EXPECT_TRUE(validate_manifest(out.manifest).empty());
    const auto again = materialize_morphs(p, method, ds.manifest, inputs(ds, r));
    EXPECT_EQ(again.manifest, out.manifest);
    EXPECT_EQ(again.new_images, out.new_images);
  }
}

TEST(Materialize, LatentMorphsInterpolateSampleLatents) {
  const auto ds = small_dataset();
  const BlobRenderer r(16, 16, SyntheticConfig{}.renderer_seed);
  const auto p = gen_morph_pair_protocol(ds.manifest, 1, 2);
  const auto out = materialize_morphs(p, {MorphMethod::Kind::latent_blend, 0.5}, ds.manifest, inputs(ds, r));
  const auto& [l, rr] = p.pairs[0];
  const auto expect = r.render(interpolate_latents(ds.sample_latents.at(l), ds.sample_latents.at(rr), 0.5));
  EXPECT_EQ(out.new_images.begin()->second, expect);
}

TEST(Selfmorphs, OnePerIdentityWithEnoughSamples) {
  const auto ds = small_dataset(5, 2);
  const BlobRenderer r(16, 16, SyntheticConfig{}.renderer_seed);
  const MorphMethod m{MorphMethod::Kind::latent_blend, 0.5};
  const auto out = generate_selfmorphs(ds.manifest, 1, m, 3, inputs(ds, r));
  EXPECT_EQ(out.new_images.size(), 5u);
  EXPECT_TRUE(validate_manifest(out.manifest).empty());
  // Only one distinct pair exists per identity with two samples.
  EXPECT_EQ(generate_selfmorphs(ds.manifest, 4, m, 3, inputs(ds, r)).new_images.size(), 5u);
  EXPECT_EQ(generate_selfmorphs(ds.manifest, 0, m, 3, inputs(ds, r)).new_images.size(), 0u);
  const auto single = small_dataset(3, 1);
  EXPECT_EQ(generate_selfmorphs(single.manifest, 1, m, 3, inputs(single, r)).new_images.size(), 0u);
}
