#pragma once

#include "kspc/core_model.hpp"
#include "kspc/shrinkage.hpp"

namespace kspc {

/// Layer activation on the stacked vector z = (s; o).
///
/// Rpca soft-thresholds the whole vector with t (zero on the code block).
/// KSparse applies soft_k_sparse to each block with its own protected
/// support size: k_star on the code, k on the outlier.
inline Vector stacked_prox(VectorRef z, const EncoderParams& params) {
  const auto n = params.code_dim();
  const auto m = params.data_dim();
  detail::require_shape(z.size() == n + m, "stacked_prox: length must equal n + m");
  if (params.variant() == Variant::Rpca) return soft_threshold(z, params.t);
  Vector out(n + m);
  out.head(n) = soft_k_sparse(z.head(n), params.t.head(n), params.hyper.k_star);
  out.tail(m) = soft_k_sparse(z.tail(m), params.t.tail(m), params.hyper.k);
  return out;
}

/// Diagonal of d stacked_prox / dz with supports and signs frozen at z.
inline Vector stacked_prox_derivative(VectorRef z, const EncoderParams& params) {
  const auto n = params.code_dim();
  const auto m = params.data_dim();
  detail::require_shape(z.size() == n + m, "stacked_prox_derivative: length must equal n + m");
  if (params.variant() == Variant::Rpca) return soft_k_sparse_derivative(z, params.t, 0);
  Vector out(n + m);
  out.head(n) = soft_k_sparse_derivative(z.head(n), params.t.head(n), params.hyper.k_star);
  out.tail(m) = soft_k_sparse_derivative(z.tail(m), params.t.tail(m), params.hyper.k);
  return out;
}

}  // namespace kspc
