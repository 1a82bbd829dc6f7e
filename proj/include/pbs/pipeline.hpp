#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "pbs/attention.hpp"
#include "pbs/block_selection.hpp"
#include "pbs/errors.hpp"
#include "pbs/matrix.hpp"
#include "pbs/permutation.hpp"

namespace pbs {

enum class PermutationStrategy { none, key_permute, query_permute, both };

enum class Precision { f32, f64 };

/// Largest N*M the coverage / oracle diagnostics will sweep element by
/// element. Anything bigger is out of desk scale and raises ResourceError.
inline constexpr std::size_t kCoverageElementLimit = std::size_t(1) << 26;

/// Largest N*N a visualization request may materialize as one dense matrix.
inline constexpr std::size_t kVizElementLimit = std::size_t(1) << 24;

struct PipelineConfig {
  std::size_t block_size = 128;
  std::size_t segment_size = 256;  // 0 disables segmentation (strategy must be none)
  double tau = 0.9;
  PermutationStrategy strategy = PermutationStrategy::key_permute;
  Precision precision = Precision::f64;
  ForcedPolicy forced = {};
  double scale = 0.0;  // 0 means 1/sqrt(d)

  void validate() const {
    if (block_size == 0) throw ConfigError("block size must be >= 1");
    if (segment_size != 0 &&
        (segment_size < block_size || segment_size % block_size != 0))
      throw ConfigError("segment size must be 0 or a multiple of the block size");
    if (!(tau >= 0.0 && tau <= 1.0)) throw ConfigError("tau must lie in [0, 1]");
    if (segment_size == 0 && strategy != PermutationStrategy::none)
      throw ConfigError("segment size 0 requires strategy none");
    if (scale < 0.0) throw ConfigError("scale must be > 0");
  }
};

struct StageTimings {
  double estimate_us = 0;   // importance scores / centroids + permutation build
  double permute_us = 0;    // applying row permutations to Q, K, V
  double select_us = 0;     // pooled block scores + threshold selection
  double attention_us = 0;  // block-sparse tiled attention
  double unpermute_us = 0;  // inverse query permutation of the output

  double total_us() const {
    return estimate_us + permute_us + select_us + attention_us + unpermute_us;
  }
};

struct PipelineReport {
  double block_density = 0;
  double causal_density_baseline = 0;
  // True-attention-mass coverage is an O(N^2) diagnostic filled in by the
  // caller (attention_coverage); the pooled-score coverage of the selection
  // itself is cheap and always available, exposing the estimation gap.
  std::optional<double> attention_coverage;
  double pooled_score_coverage = 0;
  std::size_t selected_blocks = 0;
  std::size_t total_admissible_blocks = 0;
  StageTimings timings;
};

template <std::floating_point T>
struct PipelineResult {
  Matrix<T> output;
  PipelineReport report;
  Permutation sigma;  // query permutation (flattened)
  Permutation pi;     // key/value permutation (flattened)
  BlockMask mask;
};

namespace detail {

class StageClock {
public:
  StageClock() : last_(std::chrono::steady_clock::now()) {}
  double lap_us() {
    const auto now = std::chrono::steady_clock::now();
    const double us = std::chrono::duration<double, std::micro>(now - last_).count();
    last_ = now;
    return us;
  }

private:
  std::chrono::steady_clock::time_point last_;
};

}  // namespace detail

/// End-to-end permuted block-sparse attention for one head of a causal
/// self-attention prefill: build sigma/pi per the strategy, permute, select
/// blocks on the permuted inputs, run block-sparse attention under the
/// original-position element mask, and undo the query permutation.
template <std::floating_point T>
PipelineResult<T> pbs_attention(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v,
                                const PipelineConfig& cfg) {
  cfg.validate();
  if (q.rows() != k.rows())
    throw ConfigError("pipeline expects self-attention: N == M, got " +
                      std::to_string(q.rows()) + " vs " + std::to_string(k.rows()));
  if (q.cols() != k.cols() || k.rows() != v.rows())
    throw ShapeError("pipeline inputs have inconsistent shapes");
  if (q.rows() == 0) throw ShapeError("pipeline inputs are empty");

  const std::size_t n = q.rows();
  const std::size_t b = cfg.block_size;
  const std::size_t s = cfg.segment_size;
  const std::size_t t = detail::ceil_div(n, b);
  const AttentionConfig acfg =
      AttentionConfig::make(b, q.cols(), /*causal=*/false, cfg.scale);

  detail::StageClock clock;
  PipelineResult<T> res{Matrix<T>(), PipelineReport{}, Permutation::identity(n),
                        Permutation::identity(n), BlockMask(t, t, b, s)};

  // stage 1: estimate importance and build the permutations
  const Matrix<T>* keys_for_attention = &k;
  Matrix<T> k_perm;
  switch (cfg.strategy) {
    case PermutationStrategy::none:
      break;
    case PermutationStrategy::key_permute: {
      const auto imp = estimate_key_importance(q, k, acfg);
      res.pi = build_key_permutation(imp, s).flatten();
      break;
    }
    case PermutationStrategy::query_permute: {
      res.sigma = build_query_permutation(q, k, acfg, s).flatten();
      break;
    }
    case PermutationStrategy::both: {
      // keys first; the query permutation is computed against permuted keys,
      // while the importance estimate uses the original queries
      const auto imp = estimate_key_importance(q, k, acfg);
      res.pi = build_key_permutation(imp, s).flatten();
      k_perm = apply_rows(res.pi, k);
      keys_for_attention = &k_perm;
      res.sigma = build_query_permutation(q, k_perm, acfg, s).flatten();
      break;
    }
  }
  res.report.timings.estimate_us = clock.lap_us();

  // stage 2: apply the permutations
  const Matrix<T> qp = apply_rows(res.sigma, q);
  if (cfg.strategy == PermutationStrategy::key_permute) {
    k_perm = apply_rows(res.pi, k);
    keys_for_attention = &k_perm;
  }
  const Matrix<T>& kp = *keys_for_attention;
  const Matrix<T> vp = apply_rows(res.pi, v);
  res.report.timings.permute_us = clock.lap_us();

  // stage 3: block selection on the permuted sequences
  const Matrix<T> causal = build_block_causal_mask<T>(t, t, b, s);
  const auto scores = meanpool_block_scores(qp, kp, b, s, causal, cfg.scale);
  res.mask = select_blocks(scores, cfg.tau, cfg.forced);
  res.report.timings.select_us = clock.lap_us();

  // stage 4: block-sparse attention with original-position causality
  const ElementMask em(res.sigma.map(), res.pi.map());
  Matrix<T> out_perm = attention_block_sparse(qp, kp, vp, acfg, res.mask, &em);
  res.report.timings.attention_us = clock.lap_us();

  // stage 5: undo the query permutation
  res.output = apply_rows(res.sigma.inverse(), out_perm);
  res.report.timings.unpermute_us = clock.lap_us();

  res.report.selected_blocks = res.mask.selected_count();
  res.report.block_density = res.mask.density();
  res.report.causal_density_baseline = causal_block_density(t);
  res.report.total_admissible_blocks = scores.admissible_count();
  double covered = 0;
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = 0; j < t; ++j)
      if (res.mask.at(i, j) && scores.causal(i, j) == T(0))
        covered += double(scores.scores(i, j));
  res.report.pooled_score_coverage = covered / double(t);
  return res;
}

/// Fraction of the true causal attention probability mass (computed on the
/// original, unpermuted inputs) that falls inside the selected blocks of the
/// permuted grid. Streams one query row at a time; O(N^2) work.
template <std::floating_point T>
double attention_coverage(const Matrix<T>& q, const Matrix<T>& k, const BlockMask& mask,
                          const Permutation& sigma, const Permutation& pi, double scale = 0.0) {
  if (q.rows() != k.rows() || q.cols() != k.cols())
    throw ShapeError("attention_coverage expects square self-attention inputs");
  if (sigma.size() != q.rows() || pi.size() != k.rows())
    throw ShapeError("attention_coverage: permutation lengths do not match inputs");
  const std::size_t n = q.rows(), d = q.cols();
  if (n * n > kCoverageElementLimit)
    throw ResourceError("attention coverage needs N^2 = " + std::to_string(n * n) +
                            " probability evaluations",
                        kCoverageElementLimit);
  const std::size_t b = mask.block_size();
  if (mask.rows() != detail::ceil_div(n, b) || mask.cols() != detail::ceil_div(n, b))
    throw ShapeError("attention_coverage: mask grid does not match inputs");

  const double sc = scale > 0 ? scale : 1.0 / std::sqrt(double(d));
  const Permutation inv_sigma = sigma.inverse();
  const Permutation inv_pi = pi.inverse();

  std::vector<double> logits(n);
  double covered = 0, total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t qb = inv_sigma[i] / b;
    const T* qi = q.row(i).data();
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j <= i; ++j) {
      const T* kj = k.row(j).data();
      double acc = 0;
      for (std::size_t c = 0; c < d; ++c) acc += double(qi[c]) * double(kj[c]);
      logits[j] = acc * sc;
      mx = std::max(mx, logits[j]);
    }
    double denom = 0;
    for (std::size_t j = 0; j <= i; ++j) {
      logits[j] = std::exp(logits[j] - mx);
      denom += logits[j];
    }
    for (std::size_t j = 0; j <= i; ++j) {
      const double p = logits[j] / denom;
      total += p;
      if (mask.at(qb, inv_pi[j] / b)) covered += p;
    }
  }
  return total > 0 ? covered / total : 0.0;
}

struct SweepRow {
  double tau = 0;
  std::size_t segment_size = 0;
  PermutationStrategy strategy = PermutationStrategy::none;
  double density = 0;
  double coverage = 0;
  double max_err = 0;
  double mean_err = 0;
  double time_us = 0;
};

/// One pipeline run per (tau, segment size) pair against the fixed causal
/// oracle, reporting density, coverage and output error. Rows come back
/// sorted by (segment size, tau).
template <std::floating_point T>
std::vector<SweepRow> density_sweep(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v,
                                    PipelineConfig base, std::vector<double> taus,
                                    std::vector<std::size_t> segment_sizes) {
  if (taus.empty() || segment_sizes.empty())
    throw ConfigError("density_sweep needs at least one tau and one segment size");
  if (q.rows() * q.rows() > kCoverageElementLimit)
    throw ResourceError("density_sweep needs the dense causal oracle", kCoverageElementLimit);
  std::sort(taus.begin(), taus.end());
  std::sort(segment_sizes.begin(), segment_sizes.end());

  const AttentionConfig ocfg =
      AttentionConfig::make(base.block_size, q.cols(), /*causal=*/true, base.scale);
  const Matrix<T> oracle = attention_oracle(q, k, v, ocfg);

  std::vector<SweepRow> rows;
  rows.reserve(taus.size() * segment_sizes.size());
  for (std::size_t s : segment_sizes) {
    for (double tau : taus) {
      PipelineConfig cfg = base;
      cfg.segment_size = s;
      cfg.tau = tau;
      const auto res = pbs_attention(q, k, v, cfg);
      SweepRow row;
      row.tau = tau;
      row.segment_size = s;
      row.strategy = cfg.strategy;
      row.density = res.report.block_density;
      row.coverage = attention_coverage(q, k, res.mask, res.sigma, res.pi, cfg.scale);
      row.max_err = max_abs_diff(res.output, oracle);
      row.mean_err = mean_abs_diff(res.output, oracle);
      row.time_us = res.report.timings.total_us();
      rows.push_back(row);
    }
  }
  return rows;
}

inline const char* strategy_name(PermutationStrategy s) {
  switch (s) {
    case PermutationStrategy::none: return "none";
    case PermutationStrategy::key_permute: return "key_permute";
    case PermutationStrategy::query_permute: return "query_permute";
    case PermutationStrategy::both: return "both";
  }
  return "unknown";
}

inline PermutationStrategy strategy_from_name(const std::string& name) {
  if (name == "none") return PermutationStrategy::none;
  if (name == "key_permute") return PermutationStrategy::key_permute;
  if (name == "query_permute") return PermutationStrategy::query_permute;
  if (name == "both") return PermutationStrategy::both;
  throw ConfigError("unknown permutation strategy '" + name + "'");
}

inline const char* precision_name(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

inline Precision precision_from_name(const std::string& name) {
  if (name == "f32") return Precision::f32;
  if (name == "f64") return Precision::f64;
  throw ConfigError("unknown precision '" + name + "' (expected f32 or f64)");
}

}  // namespace pbs
