#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "pbs/errors.hpp"
#include "pbs/matrix.hpp"
#include "pbs/rng.hpp"

namespace pbs {

enum class WorkloadKind { gaussian, vertical_lines, block_diag, mixed };
enum class LineScatter { clustered, scattered };

/// Synthetic workload description. A seed pins the generated tensors
/// bit-for-bit at a given precision.
struct WorkloadSpec {
  WorkloadKind kind = WorkloadKind::gaussian;
  std::size_t n = 1024;
  std::size_t d = 64;
  std::size_t heads = 1;
  std::uint64_t seed = 0;
  std::size_t line_count = 8;
  double line_strength = 150.0;
  LineScatter scatter = LineScatter::scattered;

  void validate() const {
    if (n == 0 || d == 0 || heads == 0) throw ConfigError("workload dims must be >= 1");
    if (kind == WorkloadKind::vertical_lines || kind == WorkloadKind::mixed) {
      if (line_count > n) throw ConfigError("line count exceeds sequence length");
      if (line_strength <= 0) throw ConfigError("line strength must be > 0");
    }
  }
};

inline const char* workload_kind_name(WorkloadKind k) {
  switch (k) {
    case WorkloadKind::gaussian: return "gaussian";
    case WorkloadKind::vertical_lines: return "vertical_lines";
    case WorkloadKind::block_diag: return "block_diag";
    case WorkloadKind::mixed: return "mixed";
  }
  return "unknown";
}

inline WorkloadKind workload_kind_from_name(const std::string& name) {
  if (name == "gaussian") return WorkloadKind::gaussian;
  if (name == "vertical_lines") return WorkloadKind::vertical_lines;
  if (name == "block_diag") return WorkloadKind::block_diag;
  if (name == "mixed") return WorkloadKind::mixed;
  throw ConfigError("unknown workload kind '" + name + "'");
}

inline const char* scatter_name(LineScatter s) {
  return s == LineScatter::clustered ? "clustered" : "scattered";
}

inline LineScatter scatter_from_name(const std::string& name) {
  if (name == "clustered") return LineScatter::clustered;
  if (name == "scattered") return LineScatter::scattered;
  throw ConfigError("unknown scatter mode '" + name + "'");
}

/// Key positions that receive a boosted, query-aligned direction. Scattered
/// placement spreads the lines over distinct blocks of evenly spaced
/// segments, so an unpermuted selection must span many key blocks while an
/// intra-segment sort can gather each segment's lines into one block.
inline std::vector<std::size_t> plan_line_positions(std::size_t n, std::size_t line_count,
                                                    LineScatter scatter, std::size_t block_size,
                                                    std::size_t segment_size) {
  std::vector<std::size_t> pos;
  if (line_count == 0) return pos;
  pos.reserve(line_count);

  if (scatter == LineScatter::clustered) {
    const std::size_t start = std::min(n / 2, n - line_count);
    for (std::size_t t = 0; t < line_count; ++t) pos.push_back(start + t);
    return pos;
  }

  const std::size_t groups = segment_size > 0 ? n / segment_size : 0;
  if (groups == 0 || segment_size < block_size) {
    // no segmentation: spread evenly across the whole sequence
    for (std::size_t t = 0; t < line_count; ++t)
      pos.push_back((2 * t + 1) * n / (2 * line_count));
    return pos;
  }

  std::size_t per_seg = std::max<std::size_t>(1, segment_size / block_size);
  std::size_t used = (line_count + per_seg - 1) / per_seg;
  if (used > groups) {
    used = groups;
    per_seg = (line_count + groups - 1) / groups;
  }
  const std::size_t stride = std::max<std::size_t>(1, segment_size / per_seg);
  for (std::size_t t = 0; t < line_count; ++t) {
    const std::size_t u = t / per_seg;
    const std::size_t g = (2 * u + 1) * groups / (2 * used);
    const std::size_t p = g * segment_size + (t % per_seg) * stride + stride / 2;
    pos.push_back(std::min(p, n - 1));
  }
  return pos;
}

template <std::floating_point T>
struct WorkloadTensors {
  std::vector<Matrix<T>> q, k, v;
  std::vector<std::vector<std::size_t>> planted_lines;  // per head
};

namespace detail {

template <std::floating_point T>
void fill_normal(Matrix<T>& m, Rng& rng) {
  for (std::size_t i = 0; i < m.rows(); ++i) {
    T* row = m.row(i).data();
    for (std::size_t c = 0; c < m.cols(); ++c) row[c] = T(rng.normal());
  }
}

inline std::vector<double> random_unit(std::size_t d, Rng& rng) {
  std::vector<double> u(d);
  double norm = 0;
  do {
    norm = 0;
    for (auto& x : u) {
      x = rng.normal();
      norm += x * x;
    }
  } while (norm == 0);
  norm = std::sqrt(norm);
  for (auto& x : u) x /= norm;
  return u;
}

}  // namespace detail

/// Generate one head of the workload. block_size/segment_size steer line
/// placement and block-diagonal structure; they do not otherwise constrain
/// how the tensors may later be consumed.
template <std::floating_point T>
void generate_head(const WorkloadSpec& spec, std::size_t head, std::size_t block_size,
                   std::size_t segment_size, Matrix<T>& q, Matrix<T>& k, Matrix<T>& v,
                   std::vector<std::size_t>& planted) {
  const std::size_t n = spec.n, d = spec.d;
  Rng rng(spec.seed, head);
  q = Matrix<T>(n, d);
  k = Matrix<T>(n, d);
  v = Matrix<T>(n, d);
  detail::fill_normal(q, rng);
  detail::fill_normal(k, rng);
  detail::fill_normal(v, rng);
  planted.clear();

  const bool lines =
      spec.kind == WorkloadKind::vertical_lines || spec.kind == WorkloadKind::mixed;
  const bool blockish =
      spec.kind == WorkloadKind::block_diag || spec.kind == WorkloadKind::mixed;

  if (blockish) {
    // shared per-block direction for queries and keys concentrates the
    // attention mass on the block diagonal
    const std::size_t blocks = (n + block_size - 1) / block_size;
    const double kappa = std::sqrt(10.0 * std::sqrt(double(d)));
    std::vector<std::vector<double>> dirs(blocks);
    for (auto& dir : dirs) dir = detail::random_unit(d, rng);
    for (std::size_t r = 0; r < n; ++r) {
      const auto& dir = dirs[r / block_size];
      T* qr = q.row(r).data();
      T* kr = k.row(r).data();
      for (std::size_t c = 0; c < d; ++c) {
        qr[c] += T(kappa * dir[c]);
        kr[c] += T(kappa * dir[c]);
      }
    }
  }

  if (lines) {
    const auto u = detail::random_unit(d, rng);
    const double query_bias = std::sqrt(double(d));
    for (std::size_t r = 0; r < n; ++r) {
      T* qr = q.row(r).data();
      for (std::size_t c = 0; c < d; ++c) qr[c] += T(query_bias * u[c]);
    }
    planted = plan_line_positions(n, spec.line_count, spec.scatter, block_size, segment_size);
    for (std::size_t p : planted) {
      T* kr = k.row(p).data();
      for (std::size_t c = 0; c < d; ++c) kr[c] += T(spec.line_strength * u[c]);
    }
  }

  for (const Matrix<T>* m : {&q, &k, &v})
    if (m->first_nonfinite()) throw ConfigError("workload generated non-finite values");
}

template <std::floating_point T>
WorkloadTensors<T> generate_workload(const WorkloadSpec& spec, std::size_t block_size,
                                     std::size_t segment_size) {
  spec.validate();
  WorkloadTensors<T> out;
  out.q.resize(spec.heads);
  out.k.resize(spec.heads);
  out.v.resize(spec.heads);
  out.planted_lines.resize(spec.heads);
  for (std::size_t h = 0; h < spec.heads; ++h)
    generate_head(spec, h, block_size, segment_size, out.q[h], out.k[h], out.v[h],
                  out.planted_lines[h]);
  return out;
}

}  // namespace pbs
