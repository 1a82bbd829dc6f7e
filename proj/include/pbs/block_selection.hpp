#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "pbs/errors.hpp"
#include "pbs/matrix.hpp"

namespace pbs {

/// Segment index of a key/query block. With segment_size == 0 every block is
/// its own segment, which degenerates the segment band to the block diagonal.
/// Requires block_size | segment_size so a block never straddles segments.
inline std::size_t segment_of_block(std::size_t block, std::size_t block_size,
                                    std::size_t segment_size) {
  if (segment_size == 0) return block;
  return block * block_size / segment_size;
}

/// Boolean selection grid over query blocks x key blocks.
class BlockMask {
public:
  BlockMask() = default;
  BlockMask(std::size_t t_r, std::size_t t_c, std::size_t block_size, std::size_t segment_size,
            bool value = false)
      : t_r_(t_r), t_c_(t_c), block_size_(block_size), segment_size_(segment_size),
        grid_(t_r * t_c, value ? 1 : 0) {
    if (block_size == 0) throw ConfigError("block size must be >= 1");
    if (segment_size != 0 && (segment_size < block_size || segment_size % block_size != 0))
      throw ConfigError("segment size must be 0 or a multiple of the block size");
  }

  static BlockMask full(std::size_t t_r, std::size_t t_c, std::size_t block_size,
                        std::size_t segment_size = 0) {
    return BlockMask(t_r, t_c, block_size, segment_size, true);
  }

  std::size_t rows() const { return t_r_; }
  std::size_t cols() const { return t_c_; }
  std::size_t block_size() const { return block_size_; }
  std::size_t segment_size() const { return segment_size_; }

  bool at(std::size_t i, std::size_t j) const { return grid_[i * t_c_ + j] != 0; }
  void set(std::size_t i, std::size_t j, bool v) { grid_[i * t_c_ + j] = v ? 1 : 0; }

  std::size_t selected_count() const {
    return std::size_t(std::count(grid_.begin(), grid_.end(), std::uint8_t(1)));
  }

  double density() const {
    return grid_.empty() ? 0.0 : double(selected_count()) / double(grid_.size());
  }

  std::size_t segment_of(std::size_t block) const {
    return segment_of_block(block, block_size_, segment_size_);
  }

  /// True when a i x j block pair lies strictly above the segment band.
  bool above_band(std::size_t i, std::size_t j) const { return segment_of(j) > segment_of(i); }

  /// 0/1 matrix view for serialization and visualization.
  template <std::floating_point T = float>
  Matrix<T> to_matrix() const {
    Matrix<T> m(t_r_, t_c_);
    for (std::size_t i = 0; i < t_r_; ++i)
      for (std::size_t j = 0; j < t_c_; ++j) m(i, j) = at(i, j) ? T(1) : T(0);
    return m;
  }

  friend bool operator==(const BlockMask&, const BlockMask&) = default;

private:
  std::size_t t_r_ = 0, t_c_ = 0;
  std::size_t block_size_ = 1, segment_size_ = 0;
  std::vector<std::uint8_t> grid_;
};

/// Additive block-level causal mask: entry (i,j) is 0 when block j's segment
/// does not come after block i's segment, -inf otherwise. With segment_size
/// == 0 this is the standard lower-triangular-inclusive block mask.
template <std::floating_point T>
Matrix<T> build_block_causal_mask(std::size_t t_r, std::size_t t_c, std::size_t block_size,
                                  std::size_t segment_size) {
  if (t_r != t_c) throw ShapeError("block causal mask expects a square block grid");
  Matrix<T> c(t_r, t_c);
  for (std::size_t i = 0; i < t_r; ++i) {
    const std::size_t seg_i = segment_of_block(i, block_size, segment_size);
    for (std::size_t j = 0; j < t_c; ++j)
      if (segment_of_block(j, block_size, segment_size) > seg_i) c(i, j) = neg_inf<T>();
  }
  return c;
}

/// Block-level score matrix plus the additive causal mask it was computed
/// under. Each row of `scores` sums to 1 over unmasked entries.
template <std::floating_point T>
struct BlockScoreMatrix {
  Matrix<T> scores;
  Matrix<T> causal;
  std::size_t block_size = 1;
  std::size_t segment_size = 0;

  std::size_t admissible_count() const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < causal.size(); ++i)
      if (causal.data()[i] == T(0)) ++n;
    return n;
  }
};

/// Mean-pool each block of the (possibly permuted) queries and keys, then
/// softmax the pooled score grid under the additive causal mask. A short
/// final block is averaged over its actual row count. scale == 0 selects the
/// default 1/sqrt(d).
template <std::floating_point T>
BlockScoreMatrix<T> meanpool_block_scores(const Matrix<T>& qp, const Matrix<T>& kp,
                                          std::size_t block_size, std::size_t segment_size,
                                          const Matrix<T>& causal, double scale = 0.0) {
  if (qp.cols() != kp.cols()) throw ShapeError("meanpool_block_scores: head dims differ");
  if (block_size == 0) throw ConfigError("block size must be >= 1");
  const std::size_t d = qp.cols();
  const std::size_t t_r = (qp.rows() + block_size - 1) / block_size;
  const std::size_t t_c = (kp.rows() + block_size - 1) / block_size;
  if (causal.rows() != t_r || causal.cols() != t_c)
    throw ShapeError("meanpool_block_scores: causal mask grid is " +
                     std::to_string(causal.rows()) + "x" + std::to_string(causal.cols()) +
                     ", expected " + std::to_string(t_r) + "x" + std::to_string(t_c));

  auto pool = [&](const Matrix<T>& m, std::size_t blocks) {
    Matrix<T> pooled(blocks, d);
    for (std::size_t b = 0; b < blocks; ++b) {
      const std::size_t r0 = b * block_size;
      const std::size_t rc = std::min(block_size, m.rows() - r0);
      for (std::size_t r = r0; r < r0 + rc; ++r) {
        const T* src = m.row(r).data();
        T* dst = pooled.row(b).data();
        for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
      }
      for (std::size_t c = 0; c < d; ++c) pooled(b, c) /= T(rc);
    }
    return pooled;
  };

  const Matrix<T> q_bar = pool(qp, t_r);
  const Matrix<T> k_bar = pool(kp, t_c);
  Matrix<T> logits = matmul_transposed(q_bar, k_bar);
  const T s = T(scale > 0 ? scale : 1.0 / std::sqrt(double(d)));
  for (std::size_t i = 0; i < logits.size(); ++i) logits.data()[i] *= s;

  BlockScoreMatrix<T> out;
  out.scores = softmax_rows(logits, causal);
  out.causal = causal;
  out.block_size = block_size;
  out.segment_size = segment_size;
  return out;
}

struct ForcedPolicy {
  bool first_block = true;    // always keep key block 0 (attention sink)
  bool diagonal_band = true;  // always keep the row's on-diagonal segment band
};

/// Threshold selection over pooled block scores: per row, take the smallest
/// descending-sorted prefix whose cumulative sum reaches tau (all admissible
/// blocks when it never does), then union in the forced blocks.
template <std::floating_point T>
BlockMask select_blocks(const BlockScoreMatrix<T>& bsm, double tau, ForcedPolicy forced = {}) {
  if (!(tau >= 0.0 && tau <= 1.0)) throw ConfigError("tau must lie in [0, 1]");
  const std::size_t t_r = bsm.scores.rows(), t_c = bsm.scores.cols();
  BlockMask mask(t_r, t_c, bsm.block_size, bsm.segment_size);

  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < t_r; ++i) {
    order.clear();
    for (std::size_t j = 0; j < t_c; ++j)
      if (bsm.causal(i, j) == T(0)) order.push_back(j);
    // descending score, ties by ascending block index
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return bsm.scores(i, a) > bsm.scores(i, b);
    });

    double cum = 0;
    std::size_t take = order.size();  // fallback: every admissible block
    for (std::size_t k = 0; k < order.size(); ++k) {
      cum += double(bsm.scores(i, order[k]));
      if (cum >= tau) {
        take = k + 1;
        break;
      }
    }
    for (std::size_t k = 0; k < take; ++k) mask.set(i, order[k], true);

    if (forced.first_block && t_c > 0) mask.set(i, 0, true);
    if (forced.diagonal_band) {
      const std::size_t seg_i = mask.segment_of(i);
      for (std::size_t j = 0; j < t_c; ++j)
        if (mask.segment_of(j) == seg_i) mask.set(i, j, true);
    }
  }
  return mask;
}

/// Fraction of the block grid a causal lower-triangular mask occupies.
inline double causal_block_density(std::size_t t_c) {
  if (t_c == 0) throw ConfigError("causal_block_density: T_c must be >= 1");
  return double(t_c + 1) / double(2 * t_c);
}

}  // namespace pbs
