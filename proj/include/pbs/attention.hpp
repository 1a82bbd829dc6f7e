#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "pbs/block_selection.hpp"
#include "pbs/errors.hpp"
#include "pbs/matrix.hpp"

namespace pbs {

struct AttentionConfig {
  std::size_t block_size = 1;
  std::size_t head_dim = 1;
  bool causal = false;
  double scale = 0.0;  // 0 means the default 1/sqrt(head_dim)

  static AttentionConfig make(std::size_t block_size, std::size_t head_dim, bool causal = false,
                              double scale = 0.0) {
    if (block_size == 0) throw ConfigError("block size must be >= 1");
    if (head_dim == 0) throw ConfigError("head dim must be >= 1");
    if (scale < 0.0) throw ConfigError("scale must be > 0");
    return {block_size, head_dim, causal, scale};
  }

  double effective_scale() const {
    return scale > 0.0 ? scale : 1.0 / std::sqrt(double(head_dim));
  }
};

/// Per-element admissibility after permutation, carried as original-position
/// index vectors rather than a dense N x M mask: permuted query row i may
/// attend to permuted key j iff k_orig[j] <= q_orig[i]. With identity index
/// vectors this is exactly the causal mask.
class ElementMask {
public:
  ElementMask(std::vector<std::size_t> q_orig, std::vector<std::size_t> k_orig)
      : q_orig_(std::move(q_orig)), k_orig_(std::move(k_orig)) {
    check_bijection(q_orig_, "q_orig");
    check_bijection(k_orig_, "k_orig");
  }

  static ElementMask identity(std::size_t n, std::size_t m) {
    std::vector<std::size_t> q(n), k(m);
    std::iota(q.begin(), q.end(), std::size_t(0));
    std::iota(k.begin(), k.end(), std::size_t(0));
    return ElementMask(std::move(q), std::move(k));
  }

  std::size_t query_len() const { return q_orig_.size(); }
  std::size_t key_len() const { return k_orig_.size(); }
  std::size_t q_orig(std::size_t i) const { return q_orig_[i]; }
  std::size_t k_orig(std::size_t j) const { return k_orig_[j]; }
  bool admissible(std::size_t i, std::size_t j) const { return k_orig_[j] <= q_orig_[i]; }

private:
  static void check_bijection(const std::vector<std::size_t>& v, const char* name) {
    std::vector<std::uint8_t> seen(v.size(), 0);
    for (std::size_t x : v) {
      if (x >= v.size() || seen[x])
        throw ShapeError(std::string(name) + " is not a permutation of its index range");
      seen[x] = 1;
    }
  }

  std::vector<std::size_t> q_orig_, k_orig_;
};

/// Running state of the streaming softmax for one query block: unnormalized
/// output accumulator O, per-row running max m and running denominator l.
/// Initialized to (0, -inf, 0); each absorbed score block applies the update
///   m' = max(m, rowmax(S))
///   l' = l * e^(m - m') + rowsum(exp(S - m'))
///   O' = O * e^(m - m') + exp(S - m') V
/// with the convention that a -inf (inadmissible) score contributes exp = 0.
template <std::floating_point T>
class OnlineSoftmaxState {
public:
  OnlineSoftmaxState(std::size_t rows, std::size_t value_dim)
      : o_acc_(rows, value_dim), m_(rows, neg_inf<T>()), l_(rows, T(0)) {}

  std::size_t rows() const { return m_.size(); }
  const Matrix<T>& o_acc() const { return o_acc_; }
  const std::vector<T>& m() const { return m_; }
  const std::vector<T>& l() const { return l_; }

  /// Absorb one score block against value rows [v_row0, v_row0 + scores.cols()).
  /// `scores` entries must be finite or the -inf sentinel; the buffer is
  /// overwritten with the exp weights.
  void absorb(Matrix<T>& scores, const Matrix<T>& v, std::size_t v_row0) {
    const std::size_t cc = scores.cols();
    const std::size_t dv = o_acc_.cols();
    for (std::size_t i = 0; i < scores.rows(); ++i) {
      T* srow = scores.row(i).data();
      T row_max = neg_inf<T>();
      for (std::size_t j = 0; j < cc; ++j) row_max = std::max(row_max, srow[j]);
      const T m_new = std::max(m_[i], row_max);
      if (m_new == neg_inf<T>()) continue;  // every key so far inadmissible

      const T factor = std::exp(m_[i] - m_new);  // exp(-inf) == 0 on first touch
      T rowsum = 0;
      for (std::size_t j = 0; j < cc; ++j) {
        const T p = srow[j] == neg_inf<T>() ? T(0) : std::exp(srow[j] - m_new);
        srow[j] = p;
        rowsum += p;
      }
      l_[i] = l_[i] * factor + rowsum;

      T* acc = o_acc_.row(i).data();
      if (factor != T(1))
        for (std::size_t c = 0; c < dv; ++c) acc[c] *= factor;
      for (std::size_t j = 0; j < cc; ++j) {
        const T p = srow[j];
        if (p == T(0)) continue;
        const T* vr = v.row(v_row0 + j).data();
        for (std::size_t c = 0; c < dv; ++c) acc[c] += p * vr[c];
      }
      m_[i] = m_new;
    }
  }

  /// Normalize into out rows [row0, row0 + rows()). A row with l == 0 means
  /// the mask admitted nothing for it; that is an error, not a zero row.
  void finalize_into(Matrix<T>& out, std::size_t row0, std::size_t query_block) const {
    for (std::size_t i = 0; i < rows(); ++i) {
      if (l_[i] == T(0)) throw DegenerateRowError(query_block);
      const T inv = T(1) / l_[i];
      const T* acc = o_acc_.row(i).data();
      T* dst = out.row(row0 + i).data();
      for (std::size_t c = 0; c < out.cols(); ++c) dst[c] = acc[c] * inv;
    }
  }

private:
  Matrix<T> o_acc_;
  std::vector<T> m_, l_;
};

namespace detail {

inline std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

enum class BlockCover { none, partial, full };

/// Block-level classification of element admissibility, from per-block
/// min/max original positions. Lets the kernel skip the per-element test on
/// blocks that are uniformly admissible (the common below-band case).
class AdmissibilityIndex {
public:
  AdmissibilityIndex(const ElementMask* em, bool causal, std::size_t n, std::size_t m,
                     std::size_t block)
      : em_(em), causal_(causal) {
    if (em_ || causal_) {
      build(q_mm_, n, block, [&](std::size_t i) { return em_ ? em_->q_orig(i) : i; });
      build(k_mm_, m, block, [&](std::size_t j) { return em_ ? em_->k_orig(j) : j; });
    }
  }

  bool active() const { return em_ || causal_; }

  BlockCover classify(std::size_t qb, std::size_t kb) const {
    if (!active()) return BlockCover::full;
    const auto [qmin, qmax] = q_mm_[qb];
    const auto [kmin, kmax] = k_mm_[kb];
    if (kmax <= qmin) return BlockCover::full;
    if (kmin > qmax) return BlockCover::none;
    return BlockCover::partial;
  }

  bool admissible(std::size_t i, std::size_t j) const {
    if (em_) return em_->admissible(i, j);
    return !causal_ || j <= i;
  }

private:
  template <typename F>
  static void build(std::vector<std::pair<std::size_t, std::size_t>>& mm, std::size_t len,
                    std::size_t block, F orig) {
    const std::size_t blocks = ceil_div(len, block);
    mm.resize(blocks);
    for (std::size_t b = 0; b < blocks; ++b) {
      std::size_t lo = SIZE_MAX, hi = 0;
      const std::size_t end = std::min(len, (b + 1) * block);
      for (std::size_t p = b * block; p < end; ++p) {
        lo = std::min(lo, orig(p));
        hi = std::max(hi, orig(p));
      }
      mm[b] = {lo, hi};
    }
  }

  const ElementMask* em_;
  bool causal_;
  std::vector<std::pair<std::size_t, std::size_t>> q_mm_, k_mm_;
};

template <std::floating_point T>
void validate_attention_inputs(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v,
                               const AttentionConfig& cfg, const ElementMask* em) {
  if (q.cols() != k.cols())
    throw ShapeError("attention: Q and K head dims differ (" + std::to_string(q.cols()) +
                     " vs " + std::to_string(k.cols()) + ")");
  if (q.cols() != cfg.head_dim)
    throw ShapeError("attention: config head dim " + std::to_string(cfg.head_dim) +
                     " does not match input head dim " + std::to_string(q.cols()));
  if (k.rows() != v.rows())
    throw ShapeError("attention: K and V row counts differ (" + std::to_string(k.rows()) +
                     " vs " + std::to_string(v.rows()) + ")");
  if (k.rows() == 0) throw ShapeError("attention: empty key sequence");
  if (cfg.block_size == 0) throw ConfigError("attention: block size must be >= 1");
  if (em && (em->query_len() != q.rows() || em->key_len() != k.rows()))
    throw ShapeError("attention: element mask lengths do not match inputs");
}

}  // namespace detail

/// Reference attention by full materialization: softmax(scale QK^T + mask) V.
/// With the causal flag and no element mask, (i,j) is masked when j > i; an
/// element mask replaces that rule with its original-position test.
template <std::floating_point T>
Matrix<T> attention_oracle(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v,
                           const AttentionConfig& cfg, const ElementMask* em = nullptr) {
  detail::validate_attention_inputs(q, k, v, cfg, em);
  const T scale = T(cfg.effective_scale());

  Matrix<T> s = matmul_transposed(q, k);
  detail::AdmissibilityIndex adm(em, cfg.causal, q.rows(), k.rows(), cfg.block_size);
  for (std::size_t i = 0; i < s.rows(); ++i)
    for (std::size_t j = 0; j < s.cols(); ++j)
      s(i, j) = adm.admissible(i, j) ? s(i, j) * scale : neg_inf<T>();

  // in-place stabilized row softmax; a fully masked row becomes zeros
  for (std::size_t i = 0; i < s.rows(); ++i) {
    T* row = s.row(i).data();
    T mx = neg_inf<T>();
    for (std::size_t j = 0; j < s.cols(); ++j) mx = std::max(mx, row[j]);
    if (mx == neg_inf<T>()) {
      std::fill(row, row + s.cols(), T(0));
      continue;
    }
    T denom = 0;
    for (std::size_t j = 0; j < s.cols(); ++j) {
      row[j] = row[j] == neg_inf<T>() ? T(0) : std::exp(row[j] - mx);
      denom += row[j];
    }
    for (std::size_t j = 0; j < s.cols(); ++j) row[j] /= denom;
  }
  return matmul(s, v);
}

/// Tiled attention restricted to the selected blocks: skipped blocks leave
/// the (O, m, l) state untouched, exactly as if they were never visited.
template <std::floating_point T>
Matrix<T> attention_block_sparse(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v,
                                 const AttentionConfig& cfg, const BlockMask& mask,
                                 const ElementMask* em = nullptr) {
  detail::validate_attention_inputs(q, k, v, cfg, em);
  const std::size_t n = q.rows(), m = k.rows();
  const std::size_t b = cfg.block_size;
  const std::size_t t_r = detail::ceil_div(n, b), t_c = detail::ceil_div(m, b);
  if (mask.rows() != t_r || mask.cols() != t_c)
    throw ShapeError("attention: block mask grid is " + std::to_string(mask.rows()) + "x" +
                     std::to_string(mask.cols()) + ", expected " + std::to_string(t_r) + "x" +
                     std::to_string(t_c));
  if (mask.block_size() != b)
    throw ShapeError("attention: block mask block size differs from config");

  const T scale = T(cfg.effective_scale());
  detail::AdmissibilityIndex adm(em, cfg.causal, n, m, b);
  Matrix<T> out(n, v.cols());

  for (std::size_t qb = 0; qb < t_r; ++qb) {
    const std::size_t r0 = qb * b;
    const std::size_t rc = std::min(b, n - r0);
    OnlineSoftmaxState<T> state(rc, v.cols());

    for (std::size_t kb = 0; kb < t_c; ++kb) {
      if (!mask.at(qb, kb)) continue;
      const auto cover = adm.classify(qb, kb);
      if (cover == detail::BlockCover::none) continue;  // exp(-inf) rows are no-ops
      const std::size_t c0 = kb * b;
      const std::size_t cc = std::min(b, m - c0);

      Matrix<T> scores(rc, cc);
      for (std::size_t i = 0; i < rc; ++i) {
        const T* qi = q.row(r0 + i).data();
        T* srow = scores.row(i).data();
        for (std::size_t j = 0; j < cc; ++j) {
          if (cover == detail::BlockCover::partial && !adm.admissible(r0 + i, c0 + j)) {
            srow[j] = neg_inf<T>();
            continue;
          }
          const T* kj = k.row(c0 + j).data();
          T acc = 0;
          for (std::size_t c = 0; c < cfg.head_dim; ++c) acc += qi[c] * kj[c];
          srow[j] = acc * scale;
        }
      }
      state.absorb(scores, v, c0);
    }
    state.finalize_into(out, r0, qb);
  }
  return out;
}

/// Tiled streaming attention over every block; identical arithmetic path to
/// attention_block_sparse with a full mask.
template <std::floating_point T>
Matrix<T> attention_tiled(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v,
                          const AttentionConfig& cfg, const ElementMask* em = nullptr) {
  detail::validate_attention_inputs(q, k, v, cfg, em);
  const std::size_t t_r = detail::ceil_div(q.rows(), cfg.block_size);
  const std::size_t t_c = detail::ceil_div(k.rows(), cfg.block_size);
  return attention_block_sparse(q, k, v, cfg, BlockMask::full(t_r, t_c, cfg.block_size), em);
}

}  // namespace pbs
