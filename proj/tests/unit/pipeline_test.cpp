#include "pbs/pipeline.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <functional>

#include "../testutil.hpp"
#include "json.hpp"
#include "pbs/manifest.hpp"
#include "pbs/rng.hpp"
#include "pbs/workload.hpp"

using pbs::AttentionConfig;
using pbs::Matrix;
using pbs::PermutationStrategy;
using pbs::PipelineConfig;

namespace {

std::string golden(const char* name) { return std::string(PBS_GOLDEN_DIR "/") + name; }

constexpr PermutationStrategy kAllStrategies[] = {
    PermutationStrategy::none, PermutationStrategy::key_permute,
    PermutationStrategy::query_permute, PermutationStrategy::both};

template <typename T>
void check_exact_at_tau_one() {
  pbs::Rng rng(51);
  const std::size_t n = 96, d = 8, b = 16;
  const auto q = testutil::random_matrix<T>(n, d, rng);
  const auto k = testutil::random_matrix<T>(n, d, rng);
  const auto v = testutil::random_matrix<T>(n, d, rng);
  const auto oracle =
      pbs::attention_oracle(q, k, v, AttentionConfig::make(b, d, /*causal=*/true));

  std::vector<Matrix<T>> outputs;
  for (const auto strategy : kAllStrategies) {
    for (std::size_t s : {b, 2 * b, 4 * b}) {
      PipelineConfig cfg;
      cfg.block_size = b;
      cfg.segment_size = s;
      cfg.tau = 1.0;
      cfg.strategy = strategy;
      const auto res = pbs::pbs_attention(q, k, v, cfg);
      EXPECT_LE(pbs::max_abs_diff(res.output, oracle), testutil::kernel_tol<T>())
          << "strategy=" << pbs::strategy_name(strategy) << " S=" << s;
      outputs.push_back(res.output);
    }
  }
  // outputs across strategies agree pairwise
  for (const auto& a : outputs)
    for (const auto& b2 : outputs)
      EXPECT_LE(pbs::max_abs_diff(a, b2), 2 * testutil::kernel_tol<T>());
}

TEST(Pipeline, ExactAtTauOneAllStrategiesF32) { check_exact_at_tau_one<float>(); }
TEST(Pipeline, ExactAtTauOneAllStrategiesF64) { check_exact_at_tau_one<double>(); }

TEST(Pipeline, UnsegmentedNoneStrategyMatchesCausalOracle) {
  pbs::Rng rng(52);
  const std::size_t n = 70, d = 4, b = 8;  // ragged final block
  const auto q = testutil::random_matrix<double>(n, d, rng);
  const auto k = testutil::random_matrix<double>(n, d, rng);
  const auto v = testutil::random_matrix<double>(n, d, rng);
  PipelineConfig cfg;
  cfg.block_size = b;
  cfg.segment_size = 0;
  cfg.tau = 1.0;
  cfg.strategy = PermutationStrategy::none;
  const auto res = pbs::pbs_attention(q, k, v, cfg);
  const auto oracle =
      pbs::attention_oracle(q, k, v, AttentionConfig::make(b, d, /*causal=*/true));
  EXPECT_LE(pbs::max_abs_diff(res.output, oracle), 1e-10);
  EXPECT_TRUE(res.sigma.is_identity());
  EXPECT_TRUE(res.pi.is_identity());
}

TEST(Pipeline, GoldenRun256) {
  pbs::WorkloadSpec spec;
  spec.kind = pbs::WorkloadKind::gaussian;
  spec.n = 256;
  spec.d = 16;
  spec.seed = 13;
  const auto w = pbs::generate_workload<double>(spec, 32, 64);

  PipelineConfig cfg;
  cfg.block_size = 32;
  cfg.segment_size = 64;
  cfg.tau = 0.9;
  cfg.strategy = PermutationStrategy::key_permute;
  const auto res = pbs::pbs_attention(w.q[0], w.k[0], w.v[0], cfg);
  const auto oracle = pbs::attention_oracle(
      w.q[0], w.k[0], w.v[0], AttentionConfig::make(32, 16, /*causal=*/true));

  std::ifstream in(golden("pipeline256.json"));
  ASSERT_TRUE(in) << "missing golden file";
  nlohmann::json j;
  in >> j;
  EXPECT_NEAR(pbs::max_abs_diff(res.output, oracle), j.at("max_err").get<double>(), 1e-9);
  EXPECT_NEAR(pbs::mean_abs_diff(res.output, oracle), j.at("mean_err").get<double>(), 1e-9);
  EXPECT_DOUBLE_EQ(res.report.block_density, j.at("density").get<double>());
}

TEST(Pipeline, CausalityIsBitwiseUnderKeyPermutation) {
  pbs::Rng rng(53);
  const std::size_t n = 64, d = 4;
  const auto q = testutil::random_matrix<double>(n, d, rng);
  const auto k = testutil::random_matrix<double>(n, d, rng);
  auto v = testutil::random_matrix<double>(n, d, rng);

  PipelineConfig cfg;
  cfg.block_size = 8;
  cfg.segment_size = 16;
  cfg.tau = 0.8;
  cfg.strategy = PermutationStrategy::key_permute;
  const auto base = pbs::pbs_attention(q, k, v, cfg);

  for (std::size_t j : {std::size_t(5), std::size_t(20), std::size_t(63)}) {
    auto v2 = v;
    for (std::size_t c = 0; c < d; ++c) v2(j, c) += 100.0;
    const auto perturbed = pbs::pbs_attention(q, k, v2, cfg);
    for (std::size_t i = 0; i < j; ++i)
      for (std::size_t c = 0; c < d; ++c)
        EXPECT_EQ(base.output(i, c), perturbed.output(i, c))
            << "row " << i << " depends on value row " << j;
  }
}

TEST(Coverage, FullMaskIsOne) {
  pbs::Rng rng(54);
  const std::size_t n = 48, d = 4, b = 8, t = 6;
  const auto q = testutil::random_matrix<double>(n, d, rng);
  const auto k = testutil::random_matrix<double>(n, d, rng);
  const auto cov = pbs::attention_coverage(q, k, pbs::BlockMask::full(t, t, b),
                                           pbs::Permutation::identity(n),
                                           pbs::Permutation::identity(n));
  EXPECT_NEAR(cov, 1.0, 1e-6);
}

TEST(Coverage, BandOnlyUniformAttentionMatchesAnalyticCount) {
  // zero queries make every causal row uniform; band-only coverage then has
  // a closed form from counting admissible entries
  const std::size_t n = 40, d = 3, b = 4, s = 8, t = 10;
  Matrix<double> q(n, d);
  pbs::Rng rng(55);
  const auto k = testutil::random_matrix<double>(n, d, rng);

  pbs::BlockMask band(t, t, b, s);
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = 0; j < t; ++j)
      if (band.segment_of(i) == band.segment_of(j)) band.set(i, j, true);

  double covered = 0, total = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) {
      const double p = 1.0 / double(i + 1);
      total += p;
      if ((i / b) / (s / b) == (j / b) / (s / b)) covered += p;
    }
  const auto cov = pbs::attention_coverage(q, k, band, pbs::Permutation::identity(n),
                                           pbs::Permutation::identity(n));
  EXPECT_NEAR(cov, covered / total, 1e-12);
}

TEST(Coverage, MonotoneUnderMaskGrowth) {
  pbs::Rng rng(56);
  const std::size_t n = 32, d = 4, b = 8, t = 4;
  const auto q = testutil::random_matrix<double>(n, d, rng);
  const auto k = testutil::random_matrix<double>(n, d, rng);
  for (int it = 0; it < 10; ++it) {
    pbs::BlockMask small(t, t, b, 0), big(t, t, b, 0);
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t j = 0; j < t; ++j) {
        const bool sel = rng.uniform() < 0.4;
        small.set(i, j, sel);
        big.set(i, j, sel || rng.uniform() < 0.4);
      }
    const auto id = pbs::Permutation::identity(n);
    EXPECT_LE(pbs::attention_coverage(q, k, small, id, id),
              pbs::attention_coverage(q, k, big, id, id) + 1e-12);
  }
}

TEST(Coverage, OversizedRequestRaisesResourceError) {
  Matrix<double> q(1 << 14, 1), k(1 << 14, 1);
  const auto id = pbs::Permutation::identity(1 << 14);
  EXPECT_THROW(
      pbs::attention_coverage(q, k, pbs::BlockMask::full(1 << 7, 1 << 7, 128), id, id),
      pbs::ResourceError);
}

TEST(Pipeline, ReportAccounting) {
  pbs::Rng rng(57);
  const std::size_t n = 128, d = 8;
  const auto q = testutil::random_matrix<double>(n, d, rng);
  const auto k = testutil::random_matrix<double>(n, d, rng);
  const auto v = testutil::random_matrix<double>(n, d, rng);
  PipelineConfig cfg;
  cfg.block_size = 16;
  cfg.segment_size = 32;
  cfg.tau = 0.7;
  const auto res = pbs::pbs_attention(q, k, v, cfg);
  const std::size_t grid = res.mask.rows() * res.mask.cols();

  EXPECT_EQ(res.report.selected_blocks, res.mask.selected_count());
  EXPECT_DOUBLE_EQ(res.report.block_density,
                   double(res.report.selected_blocks) / double(grid));
  const double skipped = double(grid - res.report.selected_blocks) / double(grid);
  EXPECT_DOUBLE_EQ(res.report.block_density + skipped, 1.0);
  EXPECT_DOUBLE_EQ(res.report.causal_density_baseline, pbs::causal_block_density(8));
  EXPECT_GE(res.report.pooled_score_coverage, 0.0);
  EXPECT_LE(res.report.pooled_score_coverage, 1.0 + 1e-9);
  EXPECT_GE(res.report.total_admissible_blocks, res.report.selected_blocks);
  // every selected block respects inter-segment causality
  for (std::size_t i = 0; i < res.mask.rows(); ++i)
    for (std::size_t j = 0; j < res.mask.cols(); ++j)
      EXPECT_FALSE(res.mask.at(i, j) && res.mask.above_band(i, j));
}

TEST(Pipeline, ErrorNonincreasingAsSelectionGrows) {
  pbs::Rng rng(58);
  const std::size_t n = 96, d = 8, b = 16;
  const auto q = testutil::random_matrix<double>(n, d, rng);
  const auto k = testutil::random_matrix<double>(n, d, rng);
  const auto v = testutil::random_matrix<double>(n, d, rng);
  const auto oracle =
      pbs::attention_oracle(q, k, v, AttentionConfig::make(b, d, /*causal=*/true));

  PipelineConfig cfg;
  cfg.block_size = b;
  cfg.segment_size = 32;
  cfg.strategy = PermutationStrategy::key_permute;
  double prev_err = 1e300;
  for (double tau : {0.3, 0.6, 0.9, 1.0}) {
    cfg.tau = tau;
    const auto res = pbs::pbs_attention(q, k, v, cfg);
    const double err = pbs::max_abs_diff(res.output, oracle);
    EXPECT_LE(err, prev_err + testutil::kernel_tol<double>());
    prev_err = err;
  }
}

TEST(Pipeline, ConfigValidation) {
  pbs::Rng rng(59);
  const auto q = testutil::random_matrix<double>(16, 4, rng);
  const auto k = testutil::random_matrix<double>(16, 4, rng);
  const auto v = testutil::random_matrix<double>(16, 4, rng);

  PipelineConfig cfg;
  cfg.block_size = 4;
  cfg.segment_size = 8;
  cfg.tau = 1.5;
  EXPECT_THROW(pbs::pbs_attention(q, k, v, cfg), pbs::ConfigError);
  cfg.tau = 0.9;
  cfg.segment_size = 6;  // not a multiple of block size
  EXPECT_THROW(pbs::pbs_attention(q, k, v, cfg), pbs::ConfigError);
  cfg.segment_size = 2;  // smaller than block size
  EXPECT_THROW(pbs::pbs_attention(q, k, v, cfg), pbs::ConfigError);
  cfg.segment_size = 0;  // needs strategy none
  cfg.strategy = PermutationStrategy::key_permute;
  EXPECT_THROW(pbs::pbs_attention(q, k, v, cfg), pbs::ConfigError);

  const auto k2 = testutil::random_matrix<double>(12, 4, rng);
  const auto v2 = testutil::random_matrix<double>(12, 4, rng);
  cfg = PipelineConfig{};
  cfg.block_size = 4;
  cfg.segment_size = 8;
  EXPECT_THROW(pbs::pbs_attention(q, k2, v2, cfg), pbs::ConfigError);
}

TEST(Pipeline, ReportJsonMatchesGoldenSchema) {
  pbs::Rng rng(60);
  const auto q = testutil::random_matrix<double>(32, 4, rng);
  const auto k = testutil::random_matrix<double>(32, 4, rng);
  const auto v = testutil::random_matrix<double>(32, 4, rng);
  PipelineConfig cfg;
  cfg.block_size = 8;
  cfg.segment_size = 16;
  auto res = pbs::pbs_attention(q, k, v, cfg);
  res.report.attention_coverage =
      pbs::attention_coverage(q, k, res.mask, res.sigma, res.pi);
  const auto j = pbs::report_to_json(res.report);

  std::ifstream in(golden("report_schema.json"));
  ASSERT_TRUE(in) << "missing golden file";
  nlohmann::json schema;
  in >> schema;

  // identical key sets and value kinds, recursively
  std::function<void(const nlohmann::json&, const nlohmann::json&, std::string)> check =
      [&](const nlohmann::json& got, const nlohmann::json& want, std::string path) {
        ASSERT_TRUE(want.is_object()) << path;
        ASSERT_TRUE(got.is_object()) << path;
        for (const auto& [key, val] : want.items()) {
          ASSERT_TRUE(got.contains(key)) << "missing " << path << "/" << key;
          if (val.is_object())
            check(got.at(key), val, path + "/" + key);
          else
            EXPECT_EQ(got.at(key).is_number(), val.is_number()) << path << "/" << key;
        }
        for (const auto& [key, val] : got.items())
          EXPECT_TRUE(want.contains(key)) << "unexpected " << path << "/" << key;
      };
  check(j, schema, "");
}

TEST(Pipeline, SerializingReportWithoutCoverageIsAnError) {
  pbs::PipelineReport r;
  EXPECT_THROW(pbs::report_to_json(r), pbs::ConfigError);
}

TEST(Pipeline, TauOneWithSegmentEqualBlockMatchesCausalDensity) {
  pbs::Rng rng(62);
  const std::size_t n = 128, d = 4, b = 16, t = 8;
  const auto q = testutil::random_matrix<double>(n, d, rng);
  const auto k = testutil::random_matrix<double>(n, d, rng);
  const auto v = testutil::random_matrix<double>(n, d, rng);
  PipelineConfig cfg;
  cfg.block_size = b;
  cfg.segment_size = b;  // band degenerates to the diagonal
  cfg.tau = 1.0;
  for (const auto strategy : kAllStrategies) {
    cfg.strategy = strategy;
    const auto res = pbs::pbs_attention(q, k, v, cfg);
    EXPECT_DOUBLE_EQ(res.report.block_density, pbs::causal_block_density(t))
        << pbs::strategy_name(strategy);
  }
}

TEST(DensitySweep, LargerSegmentsSustainLowerDensityAtEqualError) {
  // scattered vertical lines land one per block; only segments spanning
  // multiple blocks let the sort gather them, so at a near-zero error target
  // S=2B reaches a strictly lower density than S=B
  pbs::WorkloadSpec spec;
  spec.kind = pbs::WorkloadKind::vertical_lines;
  spec.n = 2048;
  spec.d = 64;
  spec.seed = 21;
  spec.line_count = 16;
  spec.scatter = pbs::LineScatter::scattered;
  const auto w = pbs::generate_workload<double>(spec, 128, 1024);

  PipelineConfig cfg;
  cfg.block_size = 128;
  cfg.strategy = PermutationStrategy::key_permute;
  const auto rows = pbs::density_sweep(w.q[0], w.k[0], w.v[0], cfg, {0.9, 1.0}, {128, 256});

  auto best_density_at_quality = [&](std::size_t s) {
    double best = 1.0;
    for (const auto& r : rows)
      if (r.segment_size == s && r.max_err <= 1e-6) best = std::min(best, r.density);
    return best;
  };
  EXPECT_LT(best_density_at_quality(256), best_density_at_quality(128));
}

TEST(DensitySweep, RowsSortedAndMonotone) {
  pbs::Rng rng(61);
  const std::size_t n = 64, d = 4;
  const auto q = testutil::random_matrix<double>(n, d, rng);
  const auto k = testutil::random_matrix<double>(n, d, rng);
  const auto v = testutil::random_matrix<double>(n, d, rng);
  PipelineConfig cfg;
  cfg.block_size = 8;
  cfg.strategy = PermutationStrategy::key_permute;
  const auto rows =
      pbs::density_sweep(q, k, v, cfg, {1.0, 0.5, 0.9}, {16, 8});
  ASSERT_EQ(rows.size(), 6u);
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const bool same_seg = rows[i].segment_size == rows[i - 1].segment_size;
    EXPECT_TRUE(rows[i].segment_size > rows[i - 1].segment_size ||
                (same_seg && rows[i].tau >= rows[i - 1].tau));
    if (same_seg) {
      EXPECT_GE(rows[i].density, rows[i - 1].density);  // monotone in tau
    }
  }
  for (const auto& r : rows)
    if (r.tau == 1.0) {
      EXPECT_LE(r.max_err, 1e-5);
    }
}

}  // namespace
