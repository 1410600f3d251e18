#pragma once

// Data types shared by every stage of the pipeline and the construction of
// the fixed proximal-descent operators (H, W, t, alpha) from a dictionary.

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "kspc/error.hpp"
#include "kspc/shrinkage.hpp"

namespace kspc {

using Matrix = Eigen::MatrixXd;
using MatrixRef = Eigen::Ref<const Matrix>;

enum class Variant : std::uint8_t { Rpca = 0, KSparse = 1 };

inline std::string_view to_string(Variant v) {
  return v == Variant::Rpca ? "rpca" : "ksparse";
}

inline Variant parse_variant(std::string_view s) {
  if (s == "rpca") return Variant::Rpca;
  if (s == "ksparse") return Variant::KSparse;
  throw InvalidArgument("unknown variant '" + std::string(s) + "' (expected rpca or ksparse)");
}

/// Columns are atoms: m rows (data dimension) by n columns (code dimension).
class Dictionary {
 public:
  explicit Dictionary(Matrix atoms) : atoms_(std::move(atoms)) { validate(atoms_); }

  /// Gaussian entries with every column scaled to unit Euclidean norm.
  static Dictionary random_unit_columns(int data_dim, int code_dim, std::uint64_t seed) {
    detail::require_arg(data_dim >= 1 && code_dim >= 1, "Dictionary: dimensions must be positive");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    Matrix atoms(data_dim, code_dim);
    for (Eigen::Index j = 0; j < atoms.cols(); ++j) {
      for (Eigen::Index i = 0; i < atoms.rows(); ++i) atoms(i, j) = normal(rng);
      atoms.col(j).normalize();
    }
    return Dictionary(std::move(atoms));
  }

  static void validate(const Matrix& atoms) {
    if (atoms.rows() < 1 || atoms.cols() < 1)
      throw InvalidArgument("Dictionary: zero-dimension dictionary");
    if (!atoms.allFinite()) throw NumericalError("Dictionary: nonfinite entries");
    for (Eigen::Index j = 0; j < atoms.cols(); ++j) {
      if (!(atoms.col(j).norm() > 0.0))
        throw NumericalError("Dictionary: atom " + std::to_string(j) + " has zero norm");
    }
  }

  const Matrix& atoms() const { return atoms_; }
  int data_dim() const { return static_cast<int>(atoms_.rows()); }
  int code_dim() const { return static_cast<int>(atoms_.cols()); }

 private:
  Matrix atoms_;
};

/// Regularization weights, sparsity levels and depth: everything needed to
/// build the encoder besides the dictionary.
struct EncoderHyper {
  Variant variant = Variant::KSparse;
  double lambda_star = 0.0;  // code weight
  double lambda = 0.0;       // outlier weight
  int k_star = 0;            // protected code support (KSparse only)
  int k = 0;                 // protected outlier support (KSparse only)
  int depth = 10;

  void validate(int data_dim, int code_dim) const {
    detail::require_arg(std::isfinite(lambda_star) && lambda_star >= 0.0,
                        "lambda_star must be finite and nonnegative");
    detail::require_arg(std::isfinite(lambda) && lambda >= 0.0,
                        "lambda must be finite and nonnegative");
    detail::require_arg(k_star >= 0 && k_star <= code_dim, "k_star must lie in [0, n]");
    detail::require_arg(k >= 0 && k <= data_dim, "k must lie in [0, m]");
    detail::require_arg(depth >= 1, "depth must be at least 1");
  }

  /// lambda_star enters the smooth part (and therefore H) only for Rpca.
  double smooth_code_weight() const { return variant == Variant::Rpca ? lambda_star : 0.0; }
};

/// Derived operators of one proximal-descent network. Immutable after
/// construction.
struct EncoderParams {
  EncoderHyper hyper;
  Matrix dictionary;  // m x n
  Matrix H;           // (n+m) x (n+m)
  Matrix W;           // (n+m) x m
  Vector t;           // n+m thresholds
  double alpha = 1.0;

  int data_dim() const { return static_cast<int>(dictionary.rows()); }
  int code_dim() const { return static_cast<int>(dictionary.cols()); }
  int stacked_dim() const { return code_dim() + data_dim(); }
  Variant variant() const { return hyper.variant; }
};

/// Image (s; o) of the data term: G v = [D^T (D vs + vo) + mu vs; D vs + vo],
/// where G is the augmented normal matrix and mu the smooth code weight.
template <class In>
Matrix apply_augmented(const Matrix& D, double mu, const Eigen::MatrixBase<In>& v) {
  const auto n = D.cols();
  const auto m = D.rows();
  Matrix r = D * v.topRows(n);
  r += v.bottomRows(m);
  Matrix out(n + m, v.cols());
  out.topRows(n).noalias() = D.transpose() * r;
  if (mu != 0.0) out.topRows(n) += mu * v.topRows(n);
  out.bottomRows(m) = r;
  return out;
}

/// Dense G = [[D^T D + mu I, D^T], [D, I]].
inline Matrix augmented_matrix(const Matrix& D, double mu) {
  const auto n = D.cols();
  const auto m = D.rows();
  Matrix G(n + m, n + m);
  G.topLeftCorner(n, n).noalias() = D.transpose() * D;
  G.topLeftCorner(n, n).diagonal().array() += mu;
  G.topRightCorner(n, m) = D.transpose();
  G.bottomLeftCorner(m, n) = D;
  G.bottomRightCorner(m, m).setIdentity();
  return G;
}

inline constexpr double kStepSafetyFactor = 1.01;

struct PowerIterationOptions {
  int max_iterations = 1000;
  double relative_tolerance = 1e-6;
  /// Starting vector; a fixed pseudo-random vector when empty.
  Vector warm_start;
};

struct SpectralEstimate {
  double value = 0.0;  // Rayleigh quotient at exit
  Vector vector;       // unit iterate at exit
  int iterations = 0;
  bool converged = false;
};

/// Power iteration for the top eigenvalue of the symmetric PSD matrix G.
inline SpectralEstimate power_iteration_augmented(const Matrix& D, double mu,
                                                  const PowerIterationOptions& options) {
  const auto dim = D.cols() + D.rows();
  SpectralEstimate est;
  Vector v;
  if (options.warm_start.size() == dim && options.warm_start.norm() > 0.0) {
    v = options.warm_start.normalized();
  } else {
    std::mt19937_64 rng(0x5eedULL);
    std::uniform_real_distribution<double> unif(0.5, 1.5);
    v.resize(dim);
    for (auto& x : v) x = unif(rng);
    v.normalize();
  }
  double previous = 0.0;
  for (int it = 1; it <= options.max_iterations; ++it) {
    Vector w = apply_augmented(D, mu, v);
    const double rayleigh = v.dot(w);
    est.iterations = it;
    est.value = rayleigh;
    const double wn = w.norm();
    if (!(wn > 0.0)) break;
    v = w / wn;
    if (it > 1 && std::abs(rayleigh - previous) <= options.relative_tolerance * std::abs(rayleigh)) {
      est.converged = true;
      break;
    }
    previous = rayleigh;
  }
  est.vector = std::move(v);
  return est;
}

/// Guaranteed upper bound on the spectral norm of G: min of the max row sum
/// and the Frobenius norm.
inline double augmented_norm_bound(const Matrix& D, double mu) {
  const Matrix gram = D.transpose() * D;
  const Eigen::Index n = D.cols();
  const Eigen::Index m = D.rows();
  double row_max = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    double s = gram.row(i).cwiseAbs().sum() + mu + D.col(i).cwiseAbs().sum();
    row_max = std::max(row_max, s);
  }
  for (Eigen::Index i = 0; i < m; ++i) row_max = std::max(row_max, D.row(i).cwiseAbs().sum() + 1.0);
  Matrix top = gram;
  top.diagonal().array() += mu;
  const double frob = std::sqrt(top.squaredNorm() + 2.0 * D.squaredNorm() + static_cast<double>(m));
  return std::min(row_max, frob);
}

/// Step size result plus the eigenvector, which callers can reuse as a warm start.
struct StepSize {
  double alpha = 0.0;
  SpectralEstimate estimate;
};

inline StepSize estimate_step_size_detailed(const Matrix& D, Variant variant, double lambda_star,
                                            const PowerIterationOptions& options = {}) {
  const double mu = variant == Variant::Rpca ? lambda_star : 0.0;
  StepSize out;
  out.estimate = power_iteration_augmented(D, mu, options);
  if (out.estimate.converged) {
    out.alpha = kStepSafetyFactor * out.estimate.value;
  } else {
    out.alpha = std::max(kStepSafetyFactor * out.estimate.value, augmented_norm_bound(D, mu));
  }
  return out;
}

/// Step size alpha >= ||G||_2 for the variant's augmented normal matrix.
inline double estimate_step_size(const Dictionary& D, Variant variant, double lambda_star) {
  return estimate_step_size_detailed(D.atoms(), variant, lambda_star).alpha;
}

/// Builds H, W and t for the variant. alpha is estimated unless given.
inline EncoderParams build_encoder_params(const Dictionary& D, const EncoderHyper& hyper,
                                          std::optional<double> alpha = std::nullopt) {
  hyper.validate(D.data_dim(), D.code_dim());
  if (alpha) {
    detail::require_arg(std::isfinite(*alpha) && *alpha > 0.0, "alpha must be positive and finite");
  }
  const Matrix& atoms = D.atoms();
  const Eigen::Index n = atoms.cols();
  const Eigen::Index m = atoms.rows();

  EncoderParams p;
  p.hyper = hyper;
  p.dictionary = atoms;
  p.alpha = alpha ? *alpha : estimate_step_size(D, hyper.variant, hyper.lambda_star);

  const double inv_alpha = 1.0 / p.alpha;
  p.H = Matrix::Identity(n + m, n + m) - inv_alpha * augmented_matrix(atoms, hyper.smooth_code_weight());

  p.W.resize(n + m, m);
  p.W.topRows(n) = inv_alpha * atoms.transpose();
  p.W.bottomRows(m) = inv_alpha * Matrix::Identity(m, m);

  p.t.resize(n + m);
  if (hyper.variant == Variant::Rpca) {
    p.t.head(n).setZero();
    p.t.tail(m).setConstant(hyper.lambda / p.alpha);
  } else {
    p.t.head(n).setConstant(hyper.lambda_star / p.alpha);
    p.t.tail(m).setConstant(hyper.lambda / p.alpha);
  }
  return p;
}

/// l = D s is kept alongside the split code for convenience.
struct SparseRepresentation {
  Vector s;  // code, length n
  Vector o;  // outlier, length m
  Vector l;  // low-rank part D s, length m
};

/// One sample per column, intensities in [0, 1].
struct DatasetMatrix {
  Matrix X;
  std::optional<std::vector<int>> labels;

  Eigen::Index samples() const { return X.cols(); }
  Eigen::Index data_dim() const { return X.rows(); }

  void validate() const {
    if (!X.allFinite() || (X.size() > 0 && (X.minCoeff() < 0.0 || X.maxCoeff() > 1.0)))
      throw DataError("DatasetMatrix: entries must lie in [0, 1]");
    if (labels && static_cast<Eigen::Index>(labels->size()) != X.cols())
      throw ShapeError("DatasetMatrix: label count does not match sample count");
  }
};

namespace detail {

inline void check_objective_shapes(const Matrix& X, const Matrix& D, const Matrix& S, const Matrix& O) {
  require_shape(X.rows() == D.rows(), "objective: X and D row counts differ");
  require_shape(S.rows() == D.cols(), "objective: S rows must equal the code dimension");
  require_shape(O.rows() == X.rows(), "objective: O rows must equal the data dimension");
  require_shape(S.cols() == X.cols() && O.cols() == X.cols(), "objective: column counts differ");
}

/// sum over columns of ||col - kSparse(col, k)||_1, i.e. the L1 mass outside
/// each column's top-k magnitudes.
inline double unprotected_l1(const Matrix& A, int k) {
  double total = 0.0;
  for (Eigen::Index j = 0; j < A.cols(); ++j) {
    const Vector col = A.col(j);
    total += (col - k_sparse(col, k)).lpNorm<1>();
  }
  return total;
}

}  // namespace detail

/// 1/2 ||X - DS - O||_F^2 + lambda_star/2 (||D||_F^2 + ||S||_F^2) + lambda ||O||_1
inline double objective_rpca(const Matrix& X, const Matrix& D, const Matrix& S, const Matrix& O,
                             double lambda_star, double lambda) {
  detail::check_objective_shapes(X, D, S, O);
  const double residual = (X - D * S - O).squaredNorm();
  return 0.5 * residual + 0.5 * lambda_star * (D.squaredNorm() + S.squaredNorm()) +
         lambda * O.cwiseAbs().sum();
}

/// 1/2 ||X - DS - O||_F^2 + lambda_star ||S - kSparse(S, k_star)||_1
///   + lambda ||O - kSparse(O, k)||_1, kSparse taken per column.
inline double objective_ksparse(const Matrix& X, const Matrix& D, const Matrix& S, const Matrix& O,
                                double lambda_star, double lambda, int k_star, int k) {
  detail::check_objective_shapes(X, D, S, O);
  detail::require_arg(k_star >= 0 && k_star <= S.rows(), "objective_ksparse: k_star out of range");
  detail::require_arg(k >= 0 && k <= O.rows(), "objective_ksparse: k out of range");
  const double residual = (X - D * S - O).squaredNorm();
  return 0.5 * residual + lambda_star * detail::unprotected_l1(S, k_star) +
         lambda * detail::unprotected_l1(O, k);
}

/// Dispatches to the variant's objective.
inline double objective(const Matrix& X, const Matrix& D, const Matrix& S, const Matrix& O,
                        const EncoderHyper& hyper) {
  if (hyper.variant == Variant::Rpca)
    return objective_rpca(X, D, S, O, hyper.lambda_star, hyper.lambda);
  return objective_ksparse(X, D, S, O, hyper.lambda_star, hyper.lambda, hyper.k_star, hyper.k);
}

}  // namespace kspc
