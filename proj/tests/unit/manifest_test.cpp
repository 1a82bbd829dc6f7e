#include "pbs/manifest.hpp"

#include <gtest/gtest.h>

using pbs::json;
using pbs::RunManifest;

namespace {

RunManifest sample_manifest() {
  RunManifest m;
  pbs::WorkloadSpec w;
  w.kind = pbs::WorkloadKind::vertical_lines;
  w.n = 2048;
  w.d = 32;
  w.heads = 4;
  w.seed = 7;
  w.line_count = 6;
  w.line_strength = 120.0;
  w.scatter = pbs::LineScatter::clustered;
  m.workload = w;
  m.pipeline.block_size = 64;
  m.pipeline.segment_size = 128;
  m.pipeline.tau = 0.85;
  m.pipeline.strategy = pbs::PermutationStrategy::both;
  m.pipeline.precision = pbs::Precision::f32;
  m.pipeline.forced.first_block = false;
  m.outputs.attention = "out.pbst";
  m.outputs.report = "report.json";
  return m;
}

TEST(Manifest, RoundTripsLosslessly) {
  const RunManifest m = sample_manifest();
  const json j = pbs::manifest_to_json(m);
  const RunManifest back = pbs::manifest_from_json(j);
  EXPECT_EQ(pbs::manifest_to_json(back), j);

  ASSERT_TRUE(back.workload);
  EXPECT_EQ(back.workload->kind, pbs::WorkloadKind::vertical_lines);
  EXPECT_EQ(back.workload->seed, 7u);
  EXPECT_EQ(back.workload->scatter, pbs::LineScatter::clustered);
  EXPECT_EQ(back.pipeline.strategy, pbs::PermutationStrategy::both);
  EXPECT_EQ(back.pipeline.precision, pbs::Precision::f32);
  EXPECT_FALSE(back.pipeline.forced.first_block);
  EXPECT_TRUE(back.pipeline.forced.diagonal_band);
}

TEST(Manifest, InputsVariantRoundTrips) {
  RunManifest m;
  m.inputs = pbs::TensorInputs{"a/q.pbst", "a/k.pbst", "a/v.pbst"};
  m.pipeline.segment_size = 256;
  const json j = pbs::manifest_to_json(m);
  const RunManifest back = pbs::manifest_from_json(j);
  ASSERT_TRUE(back.inputs);
  EXPECT_EQ(back.inputs->q, "a/q.pbst");
  EXPECT_EQ(pbs::manifest_to_json(back), j);
}

TEST(Manifest, NeedsExactlyOneSource) {
  json j{{"pipeline", json::object()}, {"outputs", json::object()}};
  EXPECT_THROW(pbs::manifest_from_json(j), pbs::ConfigError);

  RunManifest both = sample_manifest();
  both.inputs = pbs::TensorInputs{"q", "k", "v"};
  EXPECT_THROW(both.validate(), pbs::ConfigError);
}

TEST(Manifest, RejectsUnknownKeys) {
  json j = pbs::manifest_to_json(sample_manifest());
  j["extra"] = 1;
  EXPECT_THROW(pbs::manifest_from_json(j), pbs::ConfigError);

  json j2 = pbs::manifest_to_json(sample_manifest());
  j2["pipeline"]["typo"] = 1;
  EXPECT_THROW(pbs::manifest_from_json(j2), pbs::ConfigError);
}

TEST(Manifest, RejectsBadEnumValues) {
  json j = pbs::manifest_to_json(sample_manifest());
  j["pipeline"]["strategy"] = "sideways";
  EXPECT_THROW(pbs::manifest_from_json(j), pbs::ConfigError);

  json j2 = pbs::manifest_to_json(sample_manifest());
  j2["pipeline"]["precision"] = "f16";
  EXPECT_THROW(pbs::manifest_from_json(j2), pbs::ConfigError);

  json j3 = pbs::manifest_to_json(sample_manifest());
  j3["workload"]["kind"] = "periodic";
  EXPECT_THROW(pbs::manifest_from_json(j3), pbs::ConfigError);
}

TEST(Manifest, DefaultsMatchDocumentedOperatingPoint) {
  const json j{{"inputs", json{{"q", "q.pbst"}, {"k", "k.pbst"}, {"v", "v.pbst"}}},
               {"pipeline", json::object()}};
  const RunManifest m = pbs::manifest_from_json(j);
  EXPECT_EQ(m.pipeline.block_size, 128u);
  EXPECT_EQ(m.pipeline.segment_size, 256u);
  EXPECT_DOUBLE_EQ(m.pipeline.tau, 0.9);
  EXPECT_EQ(m.pipeline.strategy, pbs::PermutationStrategy::key_permute);
  EXPECT_EQ(m.pipeline.precision, pbs::Precision::f64);
  EXPECT_TRUE(m.pipeline.forced.first_block);
  EXPECT_TRUE(m.pipeline.forced.diagonal_band);
}

TEST(Manifest, RejectsInvalidPipelineValues) {
  json j = pbs::manifest_to_json(sample_manifest());
  j["pipeline"]["tau"] = 1.2;
  EXPECT_THROW(pbs::manifest_from_json(j), pbs::ConfigError);

  json j2 = pbs::manifest_to_json(sample_manifest());
  j2["pipeline"]["segment_size"] = 100;  // not a multiple of block size 64
  EXPECT_THROW(pbs::manifest_from_json(j2), pbs::ConfigError);
}

}  // namespace
