#pragma once

// Proximal descent on the stacked variable z = (s; o):
//
//   z^0 = 0,  b^0 = W x
//   z^{k+1} = prox(b^k)
//   b^{k+1} = b^k + H (z^{k+1} - z^k)
//
// The until-convergence loop and the fixed-depth unrolled network share
// one stepping routine, so a T-layer network reproduces T loop iterations
// exactly.

#include <algorithm>
#include <cmath>
#include <thread>
#include <vector>

#include "kspc/core_model.hpp"
#include "kspc/stacked_prox.hpp"

namespace kspc {

struct EncodeState {
  Vector z;  // current prox output
  Vector b;  // pre-activation feeding the next prox
  int iter = 0;
};

/// H v evaluated through the block structure of H = I - G / alpha.
template <class In>
Matrix apply_h(const EncoderParams& params, const Eigen::MatrixBase<In>& v) {
  Matrix out = v;
  out -= (1.0 / params.alpha) * apply_augmented(params.dictionary, params.hyper.smooth_code_weight(), v);
  return out;
}

/// W x evaluated as (D^T x; x) / alpha.
template <class In>
Matrix apply_w(const EncoderParams& params, const Eigen::MatrixBase<In>& x) {
  const auto n = params.code_dim();
  const auto m = params.data_dim();
  Matrix out(n + m, x.cols());
  out.topRows(n).noalias() = params.dictionary.transpose() * x;
  out.bottomRows(m) = x;
  out /= params.alpha;
  return out;
}

/// Single-sample stepping engine.
class ProximalDescent {
 public:
  ProximalDescent(const EncoderParams& params, VectorRef x) : params_(&params) {
    detail::require_shape(x.size() == params.data_dim(), "encoder: input length must equal m");
    if (!x.allFinite()) throw NumericalError("encoder: nonfinite input");
    state_.z = Vector::Zero(params.stacked_dim());
    state_.b = apply_w(params, x);
  }

  /// z <- prox(b). Returns ||z_new - z_old||_2.
  double prox_step() {
    Vector next = stacked_prox(state_.b, *params_);
    delta_ = next - state_.z;
    state_.z = std::move(next);
    ++state_.iter;
    if (!state_.z.allFinite()) throw NumericalError("encoder: nonfinite iterate (step size too small?)");
    return delta_.norm();
  }

  /// b <- b + H (z_new - z_old), using the delta of the last prox_step.
  void propagate() {
    state_.b += apply_h(*params_, delta_);
    if (!state_.b.allFinite()) throw NumericalError("encoder: nonfinite pre-activation");
  }

  const EncodeState& state() const { return state_; }

  SparseRepresentation representation() const {
    const auto n = params_->code_dim();
    const auto m = params_->data_dim();
    SparseRepresentation rep;
    rep.s = state_.z.head(n);
    rep.o = state_.z.tail(m);
    rep.l = params_->dictionary * rep.s;
    return rep;
  }

 private:
  const EncoderParams* params_;
  EncodeState state_;
  Vector delta_;
};

/// Runs the loop until ||z^{k+1} - z^k|| <= tol * max(1, ||z^k||) or max_iter
/// prox steps. The final state is written to `final_state` when given.
inline SparseRepresentation encode_iterative(VectorRef x, const EncoderParams& params, double tol,
                                             int max_iter, EncodeState* final_state = nullptr) {
  detail::require_arg(tol >= 0.0, "encode_iterative: tol must be nonnegative");
  detail::require_arg(max_iter >= 1, "encode_iterative: max_iter must be at least 1");
  ProximalDescent pd(params, x);
  for (int it = 1; it <= max_iter; ++it) {
    const double scale = std::max(1.0, pd.state().z.norm());
    const double change = pd.prox_step();
    if (change <= tol * scale || it == max_iter) break;
    pd.propagate();
  }
  if (final_state) *final_state = pd.state();
  return pd.representation();
}

/// Per-layer values of an unrolled pass: b[k] is the input to layer k's
/// prox and z[k+1] its output (z[0] = 0).
struct LayerTrace {
  std::vector<Vector> b;
  std::vector<Vector> z;
};

struct UnrolledOutput {
  SparseRepresentation rep;
  LayerTrace trace;
};

/// Exactly `hyper.depth` layers. The trace is filled only when requested.
inline UnrolledOutput encode_unrolled(VectorRef x, const EncoderParams& params, bool keep_trace = true) {
  const int depth = params.hyper.depth;
  detail::require_arg(depth >= 1, "encode_unrolled: depth must be at least 1");
  ProximalDescent pd(params, x);
  UnrolledOutput out;
  if (keep_trace) {
    out.trace.b.reserve(static_cast<std::size_t>(depth));
    out.trace.z.reserve(static_cast<std::size_t>(depth) + 1);
    out.trace.z.push_back(pd.state().z);
  }
  for (int layer = 0; layer < depth; ++layer) {
    if (keep_trace) out.trace.b.push_back(pd.state().b);
    pd.prox_step();
    if (keep_trace) out.trace.z.push_back(pd.state().z);
    if (layer + 1 < depth) pd.propagate();
  }
  out.rep = pd.representation();
  return out;
}

struct BatchCodes {
  Matrix S;  // n x N
  Matrix O;  // m x N
};

/// Column-wise encode_unrolled. Columns are independent, so splitting them
/// across `workers` threads leaves the result unchanged.
inline BatchCodes encode_batch(const Matrix& X, const EncoderParams& params, int workers = 1) {
  detail::require_shape(X.rows() == params.data_dim(), "encode_batch: X rows must equal m");
  const Eigen::Index N = X.cols();
  BatchCodes out{Matrix(params.code_dim(), N), Matrix(params.data_dim(), N)};
  auto run = [&](Eigen::Index begin, Eigen::Index end) {
    for (Eigen::Index j = begin; j < end; ++j) {
      const auto res = encode_unrolled(X.col(j), params, false);
      out.S.col(j) = res.rep.s;
      out.O.col(j) = res.rep.o;
    }
  };
  const int w = static_cast<int>(std::clamp<Eigen::Index>(workers, 1, std::max<Eigen::Index>(N, 1)));
  if (w == 1) {
    run(0, N);
    return out;
  }
  std::vector<std::thread> pool;
  const Eigen::Index chunk = (N + w - 1) / w;
  for (int i = 0; i < w; ++i) {
    const Eigen::Index begin = i * chunk;
    const Eigen::Index end = std::min(N, begin + chunk);
    if (begin < end) pool.emplace_back(run, begin, end);
  }
  for (auto& th : pool) th.join();
  return out;
}

inline BatchCodes encode_batch(const DatasetMatrix& data, const EncoderParams& params, int workers = 1) {
  return encode_batch(data.X, params, workers);
}

struct Diagnostics {
  double recon_error = 0.0;           // ||X - DS - O||_F / ||X||_F, 0 when X = 0
  double code_density = 0.0;          // fraction of |S| entries above 1e-8
  double outlier_energy_ratio = 0.0;  // ||O||^2 / (||DS||^2 + ||O||^2 + 1e-12)
};

inline constexpr double kCodeActiveThreshold = 1e-8;

inline Diagnostics diagnostics(const Matrix& X, const Matrix& S, const Matrix& O, const Matrix& D) {
  detail::check_objective_shapes(X, D, S, O);
  Diagnostics d;
  const Matrix DS = D * S;
  const double xnorm = X.norm();
  d.recon_error = xnorm > 0.0 ? (X - DS - O).norm() / xnorm : 0.0;
  if (S.size() > 0) {
    const auto active = (S.array().abs() > kCodeActiveThreshold).count();
    d.code_density = static_cast<double>(active) / static_cast<double>(S.size());
  }
  const double oe = O.squaredNorm();
  d.outlier_energy_ratio = oe / (DS.squaredNorm() + oe + 1e-12);
  return d;
}

}  // namespace kspc
