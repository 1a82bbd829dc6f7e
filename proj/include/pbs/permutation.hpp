#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "pbs/attention.hpp"
#include "pbs/errors.hpp"
#include "pbs/matrix.hpp"
#include "pbs/rng.hpp"

namespace pbs {

/// Bijective index map over {0..n-1}, stored as map[new_pos] = old_pos.
/// Row reorderings are always applied through these index vectors; a dense
/// permutation matrix is never materialized.
class Permutation {
public:
  Permutation() = default;
  explicit Permutation(std::vector<std::size_t> map) : map_(std::move(map)) {
    std::vector<std::uint8_t> seen(map_.size(), 0);
    for (std::size_t v : map_) {
      if (v >= map_.size() || seen[v])
        throw ShapeError("permutation map is not a bijection on its index range");
      seen[v] = 1;
    }
  }

  static Permutation identity(std::size_t n) {
    std::vector<std::size_t> m(n);
    std::iota(m.begin(), m.end(), std::size_t(0));
    return Permutation(std::move(m));
  }

  static Permutation random(std::size_t n, Rng& rng) {
    std::vector<std::size_t> m(n);
    std::iota(m.begin(), m.end(), std::size_t(0));
    for (std::size_t i = n; i > 1; --i) std::swap(m[i - 1], m[rng.index(i)]);
    return Permutation(std::move(m));
  }

  std::size_t size() const { return map_.size(); }
  std::size_t operator[](std::size_t new_pos) const { return map_[new_pos]; }
  const std::vector<std::size_t>& map() const { return map_; }

  Permutation inverse() const {
    std::vector<std::size_t> inv(map_.size());
    for (std::size_t i = 0; i < map_.size(); ++i) inv[map_[i]] = i;
    return Permutation(std::move(inv));
  }

  bool is_identity() const {
    for (std::size_t i = 0; i < map_.size(); ++i)
      if (map_[i] != i) return false;
    return true;
  }

  friend bool operator==(const Permutation&, const Permutation&) = default;

private:
  std::vector<std::size_t> map_;
};

/// apply_rows(then, apply_rows(first, m)) == apply_rows(compose(first, then), m)
inline Permutation compose(const Permutation& first, const Permutation& then) {
  if (first.size() != then.size()) throw ShapeError("compose: permutation lengths differ");
  std::vector<std::size_t> m(first.size());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = first[then[i]];
  return Permutation(std::move(m));
}

/// out.row(i) = m.row(p[i]).
template <std::floating_point T>
Matrix<T> apply_rows(const Permutation& p, const Matrix<T>& m) {
  if (p.size() != m.rows())
    throw ShapeError("apply_rows: permutation length " + std::to_string(p.size()) +
                     " does not match row count " + std::to_string(m.rows()));
  Matrix<T> out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const auto src = m.row(p[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

/// Per-segment local permutations over the first floor(N/S)*S positions; the
/// trailing N mod S positions map to themselves. Flattening yields a valid
/// length-N permutation that never moves a token across a segment boundary.
class SegmentedPermutation {
public:
  SegmentedPermutation(std::size_t segment_size, std::size_t total_len,
                       std::vector<Permutation> locals)
      : segment_size_(segment_size), total_len_(total_len), locals_(std::move(locals)) {
    if (segment_size_ == 0) throw ConfigError("segment size must be >= 1");
    if (locals_.size() != total_len_ / segment_size_)
      throw ShapeError("segmented permutation needs floor(N/S) local permutations");
    for (const auto& p : locals_)
      if (p.size() != segment_size_)
        throw ShapeError("local permutation length differs from segment size");
  }

  static SegmentedPermutation identity(std::size_t segment_size, std::size_t total_len) {
    std::vector<Permutation> locals(total_len / segment_size,
                                    Permutation::identity(segment_size));
    return SegmentedPermutation(segment_size, total_len, std::move(locals));
  }

  std::size_t segment_size() const { return segment_size_; }
  std::size_t total_len() const { return total_len_; }
  std::size_t segment_count() const { return locals_.size(); }
  const Permutation& local(std::size_t g) const { return locals_[g]; }

  Permutation flatten() const {
    std::vector<std::size_t> m(total_len_);
    std::iota(m.begin(), m.end(), std::size_t(0));
    for (std::size_t g = 0; g < locals_.size(); ++g) {
      const std::size_t base = g * segment_size_;
      for (std::size_t i = 0; i < segment_size_; ++i) m[base + i] = base + locals_[g][i];
    }
    return Permutation(std::move(m));
  }

private:
  std::size_t segment_size_;
  std::size_t total_len_;
  std::vector<Permutation> locals_;
};

/// Mean attention score each key receives from the final block of queries,
/// with no causal mask applied inside the estimate. Entries are nonnegative
/// and sum to 1.
template <std::floating_point T>
struct ImportanceScores {
  std::vector<T> scores;
  std::size_t source_query_block = 0;
};

template <std::floating_point T>
ImportanceScores<T> estimate_key_importance(const Matrix<T>& q, const Matrix<T>& k,
                                            const AttentionConfig& cfg) {
  if (k.rows() == 0) throw ShapeError("estimate_key_importance: empty key matrix");
  if (q.rows() == 0) throw ShapeError("estimate_key_importance: empty query matrix");
  if (q.cols() != k.cols()) throw ShapeError("estimate_key_importance: head dims differ");
  const std::size_t n = q.rows(), m = k.rows(), d = q.cols();
  const std::size_t take = std::min(cfg.block_size, n);  // all of Q when N < B
  const std::size_t r0 = n - take;
  const T scale = T(cfg.effective_scale());

  ImportanceScores<T> out;
  out.scores.assign(m, T(0));
  out.source_query_block = (n - 1) / cfg.block_size;

  std::vector<T> logits(m);
  for (std::size_t i = r0; i < n; ++i) {
    const T* qi = q.row(i).data();
    T mx = neg_inf<T>();
    for (std::size_t j = 0; j < m; ++j) {
      const T* kj = k.row(j).data();
      T acc = 0;
      for (std::size_t c = 0; c < d; ++c) acc += qi[c] * kj[c];
      logits[j] = acc * scale;
      mx = std::max(mx, logits[j]);
    }
    T denom = 0;
    for (std::size_t j = 0; j < m; ++j) {
      logits[j] = std::exp(logits[j] - mx);
      denom += logits[j];
    }
    const T w = T(1) / (denom * T(take));
    for (std::size_t j = 0; j < m; ++j) out.scores[j] += logits[j] * w;
  }
  return out;
}

/// Sort keys within each complete segment by descending importance, ties by
/// ascending original index; the trailing partial segment is left alone.
template <std::floating_point T>
SegmentedPermutation build_key_permutation(const ImportanceScores<T>& imp,
                                           std::size_t segment_size) {
  if (segment_size == 0) throw ConfigError("build_key_permutation: segment size must be >= 1");
  const std::size_t n = imp.scores.size();
  const std::size_t groups = n / segment_size;

  std::vector<Permutation> locals;
  locals.reserve(groups);
  std::vector<std::size_t> idx(segment_size);
  for (std::size_t g = 0; g < groups; ++g) {
    const std::size_t base = g * segment_size;
    std::iota(idx.begin(), idx.end(), std::size_t(0));
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      return imp.scores[base + a] > imp.scores[base + b];
    });
    locals.emplace_back(idx);
  }
  return SegmentedPermutation(segment_size, n, std::move(locals));
}

/// Group queries within each segment by the key-block centroid they are most
/// similar to (cosine), groups ordered by centroid index, original order kept
/// inside a group. A query with no positive-norm match sorts last.
template <std::floating_point T>
SegmentedPermutation build_query_permutation(const Matrix<T>& q, const Matrix<T>& k,
                                             const AttentionConfig& cfg,
                                             std::size_t segment_size) {
  if (segment_size == 0) throw ConfigError("build_query_permutation: segment size must be >= 1");
  if (q.cols() != k.cols()) throw ShapeError("build_query_permutation: head dims differ");
  if (k.rows() == 0) throw ShapeError("build_query_permutation: empty key matrix");
  const std::size_t n = q.rows(), d = q.cols();
  const std::size_t b = cfg.block_size;
  const std::size_t t_c = detail::ceil_div(k.rows(), b);

  // block-averaged key centroids
  Matrix<T> centroids(t_c, d);
  std::vector<T> centroid_norm(t_c, T(0));
  for (std::size_t j = 0; j < t_c; ++j) {
    const std::size_t c0 = j * b;
    const std::size_t cc = std::min(b, k.rows() - c0);
    T* dst = centroids.row(j).data();
    for (std::size_t r = c0; r < c0 + cc; ++r) {
      const T* src = k.row(r).data();
      for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
    }
    T sq = 0;
    for (std::size_t c = 0; c < d; ++c) {
      dst[c] /= T(cc);
      sq += dst[c] * dst[c];
    }
    centroid_norm[j] = std::sqrt(sq);
  }

  // assignment: argmax cosine similarity, smallest index on ties; queries
  // with max similarity -1 (zero norms) get group t_c so they sort last
  std::vector<std::size_t> group(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T* qi = q.row(i).data();
    T qsq = 0;
    for (std::size_t c = 0; c < d; ++c) qsq += qi[c] * qi[c];
    const T qnorm = std::sqrt(qsq);
    T best_sim = T(-1);
    std::size_t best = t_c;
    for (std::size_t j = 0; j < t_c; ++j) {
      T sim = T(-1);
      if (qnorm > T(0) && centroid_norm[j] > T(0)) {
        T dot = 0;
        const T* cj = centroids.row(j).data();
        for (std::size_t c = 0; c < d; ++c) dot += qi[c] * cj[c];
        sim = dot / (qnorm * centroid_norm[j]);
      }
      if (sim > best_sim) {
        best_sim = sim;
        best = j;
      }
    }
    group[i] = best_sim == T(-1) ? t_c : best;
  }

  const std::size_t groups_count = n / segment_size;
  std::vector<Permutation> locals;
  locals.reserve(groups_count);
  std::vector<std::size_t> idx(segment_size);
  for (std::size_t g = 0; g < groups_count; ++g) {
    const std::size_t base = g * segment_size;
    std::iota(idx.begin(), idx.end(), std::size_t(0));
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b2) {
      return group[base + a] < group[base + b2];
    });
    locals.emplace_back(idx);
  }
  return SegmentedPermutation(segment_size, n, std::move(locals));
}

}  // namespace pbs
