#pragma once

// Elementwise and top-k shrinkage operators used as layer activations.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include <Eigen/Core>

#include "kspc/error.hpp"

namespace kspc {

using Vector = Eigen::VectorXd;
using VectorRef = Eigen::Ref<const Vector>;

/// Per-coordinate thresholds plus the size of the protected support.
struct ThresholdSpec {
  Vector t;
  int k = 0;

  void validate() const {
    detail::require_arg(k >= 0 && k <= t.size(), "ThresholdSpec: k out of range");
    detail::require_arg(t.allFinite() && (t.array() >= 0.0).all(),
                        "ThresholdSpec: thresholds must be finite and nonnegative");
  }
};

inline double soft_threshold(double b, double t) {
  const double mag = std::abs(b) - t;
  if (mag <= 0.0) return 0.0;
  return b > 0.0 ? mag : -mag;
}

/// sign(b) * max(0, |b| - t), coordinatewise.
inline Vector soft_threshold(VectorRef b, VectorRef t) {
  detail::require_shape(b.size() == t.size(), "soft_threshold: length mismatch");
  Vector out(b.size());
  for (Eigen::Index i = 0; i < b.size(); ++i) out[i] = soft_threshold(b[i], t[i]);
  return out;
}

/// Indices of the k largest-magnitude entries in ascending index order.
/// Equal magnitudes are ranked by lower index first.
inline std::vector<Eigen::Index> top_k_indices(VectorRef b, int k) {
  detail::require_arg(k >= 0 && k <= b.size(), "k_sparse: k out of range");
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(b.size()));
  std::iota(idx.begin(), idx.end(), Eigen::Index{0});
  const auto ranks_before = [&b](Eigen::Index i, Eigen::Index j) {
    const double ai = std::abs(b[i]);
    const double aj = std::abs(b[j]);
    return ai > aj || (ai == aj && i < j);
  };
  std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), ranks_before);
  idx.resize(static_cast<std::size_t>(k));
  std::sort(idx.begin(), idx.end());
  return idx;
}

/// Keeps the k entries of largest magnitude and zeroes the rest.
inline Vector k_sparse(VectorRef b, int k) {
  Vector out = Vector::Zero(b.size());
  for (const auto i : top_k_indices(b, k)) out[i] = b[i];
  return out;
}

/// Soft k-sparse shrinkage: tau_t(b) - tau_t(kSparse(b, k)) + kSparse(b, k).
///
/// Entries in the top-k magnitude support pass through unchanged, every
/// other entry is soft-thresholded. Evaluated literally as the three-term
/// expression so the identity holds bit for bit.
inline Vector soft_k_sparse(VectorRef b, VectorRef t, int k) {
  detail::require_shape(b.size() == t.size(), "soft_k_sparse: length mismatch");
  const Vector protected_part = k_sparse(b, k);
  return soft_threshold(b, t) - soft_threshold(protected_part, t) + protected_part;
}

inline Vector soft_k_sparse(VectorRef b, const ThresholdSpec& spec) {
  spec.validate();
  return soft_k_sparse(b, spec.t, spec.k);
}

/// Jacobian diagonal of soft_k_sparse at b with the support held fixed:
/// 1 on the protected support and wherever the threshold is passed or zero,
/// 0 inside the dead zone.
inline Vector soft_k_sparse_derivative(VectorRef b, VectorRef t, int k) {
  detail::require_shape(b.size() == t.size(), "soft_k_sparse_derivative: length mismatch");
  Vector d(b.size());
  for (Eigen::Index i = 0; i < b.size(); ++i)
    d[i] = (t[i] == 0.0 || std::abs(b[i]) > t[i]) ? 1.0 : 0.0;
  for (const auto i : top_k_indices(b, k)) d[i] = 1.0;
  return d;
}

}  // namespace kspc
