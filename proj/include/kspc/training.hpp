#pragma once

// Dictionary learning by backpropagation through the unrolled encoder.
// Only D is learned; H, W and t are rebuilt from D before every step and
// the step size alpha is held constant inside each gradient evaluation.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "kspc/core_model.hpp"
#include "kspc/encoder.hpp"
#include "kspc/stacked_prox.hpp"

namespace kspc {

/// Single-sample objective of the variant at a representation.
inline double loss(VectorRef x, const SparseRepresentation& rep, const Matrix& D, const EncoderHyper& hyper) {
  detail::require_shape(x.size() == D.rows() && rep.o.size() == D.rows() && rep.s.size() == D.cols(),
                        "loss: shape mismatch");
  const double residual = 0.5 * (x - D * rep.s - rep.o).squaredNorm();
  if (hyper.variant == Variant::Rpca) {
    return residual + 0.5 * hyper.lambda_star * (D.squaredNorm() + rep.s.squaredNorm()) +
           hyper.lambda * rep.o.lpNorm<1>();
  }
  return residual + hyper.lambda_star * (rep.s - k_sparse(rep.s, hyper.k_star)).lpNorm<1>() +
         hyper.lambda * (rep.o - k_sparse(rep.o, hyper.k)).lpNorm<1>();
}

namespace detail {

/// Encodes every column with a full trace; columns may be split over threads.
inline std::vector<UnrolledOutput> forward_traces(const Matrix& X, const EncoderParams& params, int workers) {
  std::vector<UnrolledOutput> out(static_cast<std::size_t>(X.cols()));
  auto run = [&](Eigen::Index begin, Eigen::Index end) {
    for (Eigen::Index j = begin; j < end; ++j)
      out[static_cast<std::size_t>(j)] = encode_unrolled(X.col(j), params, true);
  };
  const Eigen::Index N = X.cols();
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

/// Subgradient of ||v - kSparse(v, k)||_1 with the top-k support frozen.
inline Vector unprotected_sign(VectorRef v, int k) {
  Vector g = v.unaryExpr([](double a) { return a > 0.0 ? 1.0 : (a < 0.0 ? -1.0 : 0.0); });
  for (const auto i : top_k_indices(v, k)) g[i] = 0.0;
  return g;
}

}  // namespace detail

struct LossAndGradient {
  double loss = 0.0;  // mean over the batch
  Matrix grad;        // d loss / d D, m x n
};

/// Mean batch loss at the unrolled output and its gradient with respect to D.
///
/// D enters through W (first layer), through H (every propagation), through
/// the reconstruction D s and, for Rpca, through lambda_star/2 ||D||_F^2.
/// Prox supports and signs are treated as constant; alpha is treated as a
/// constant of the parameters.
inline LossAndGradient loss_and_gradient(const Matrix& Xb, const EncoderParams& params, int workers = 1) {
  detail::require_shape(Xb.rows() == params.data_dim(), "grad_dictionary: batch rows must equal m");
  detail::require_arg(Xb.cols() >= 1, "grad_dictionary: empty batch");
  const Matrix& D = params.dictionary;
  const EncoderHyper& hyper = params.hyper;
  const Eigen::Index n = D.cols();
  const Eigen::Index m = D.rows();
  const Eigen::Index B = Xb.cols();
  const int depth = hyper.depth;
  const double inv_alpha = 1.0 / params.alpha;
  const double inv_batch = 1.0 / static_cast<double>(B);

  const auto traces = detail::forward_traces(Xb, params, workers);

  // Stack traces as (n+m) x B matrices per layer.
  std::vector<Matrix> pre(static_cast<std::size_t>(depth), Matrix(n + m, B));
  std::vector<Matrix> post(static_cast<std::size_t>(depth) + 1, Matrix(n + m, B));
  for (Eigen::Index j = 0; j < B; ++j) {
    const auto& tr = traces[static_cast<std::size_t>(j)].trace;
    for (int k = 0; k < depth; ++k) pre[static_cast<std::size_t>(k)].col(j) = tr.b[static_cast<std::size_t>(k)];
    for (int k = 0; k <= depth; ++k) post[static_cast<std::size_t>(k)].col(j) = tr.z[static_cast<std::size_t>(k)];
  }

  LossAndGradient out;
  for (Eigen::Index j = 0; j < B; ++j)
    out.loss += loss(Xb.col(j), traces[static_cast<std::size_t>(j)].rep, D, hyper);
  out.loss *= inv_batch;

  // Output layer.
  const Matrix& z_out = post.back();
  const auto S = z_out.topRows(n);
  const auto O = z_out.bottomRows(m);
  const Matrix E = Xb - D * S - O;
  Matrix g_z(n + m, B);
  g_z.topRows(n).noalias() = -D.transpose() * E;
  g_z.bottomRows(m) = -E;
  if (hyper.variant == Variant::Rpca) {
    g_z.topRows(n) += hyper.lambda_star * S;
    g_z.bottomRows(m) += hyper.lambda * O.unaryExpr([](double a) { return a > 0.0 ? 1.0 : (a < 0.0 ? -1.0 : 0.0); });
  } else {
    for (Eigen::Index j = 0; j < B; ++j) {
      g_z.col(j).head(n) += hyper.lambda_star * detail::unprotected_sign(S.col(j), hyper.k_star);
      g_z.col(j).tail(m) += hyper.lambda * detail::unprotected_sign(O.col(j), hyper.k);
    }
  }
  g_z *= inv_batch;

  Matrix& grad = out.grad;
  grad.noalias() = -inv_batch * (E * S.transpose());
  if (hyper.variant == Variant::Rpca) grad += hyper.lambda_star * D;

  // Reverse through  z^{k+1} = prox(b^k),  b^{k+1} = b^k + H (z^{k+1} - z^k).
  Matrix g_b_next = Matrix::Zero(n + m, B);
  bool has_next = false;
  for (int k = depth - 1; k >= 0; --k) {
    const auto ku = static_cast<std::size_t>(k);
    Matrix g_b;
    Matrix carry;
    if (has_next) {
      const Matrix hg = apply_h(params, g_b_next);
      g_z += hg;
      carry = -hg;
      const Matrix delta = post[ku + 1] - post[ku];
      const auto ds = delta.topRows(n);
      const auto dout = delta.bottomRows(m);
      const auto gs = g_b_next.topRows(n);
      const auto go = g_b_next.bottomRows(m);
      Matrix r_delta = D * ds;
      r_delta += dout;
      Matrix r_grad = D * gs;
      r_grad += go;
      grad.noalias() -= inv_alpha * (r_delta * gs.transpose());
      grad.noalias() -= inv_alpha * (r_grad * ds.transpose());
      g_b = std::move(g_b_next);
    } else {
      g_b = Matrix::Zero(n + m, B);
      carry = Matrix::Zero(n + m, B);
    }
    const Matrix& b_k = pre[ku];
    for (Eigen::Index j = 0; j < B; ++j)
      g_b.col(j) += stacked_prox_derivative(b_k.col(j), params).cwiseProduct(g_z.col(j));
    g_z = std::move(carry);
    g_b_next = std::move(g_b);
    has_next = true;
  }
  // b^0 = W x with W = (D^T; I) / alpha.
  grad.noalias() += inv_alpha * (Xb * g_b_next.topRows(n).transpose());

  if (!grad.allFinite()) throw NumericalError("grad_dictionary: nonfinite gradient (exploding unroll?)");
  return out;
}

/// d (mean batch loss) / d D.
inline Matrix grad_dictionary(const Matrix& Xb, const EncoderParams& params, int workers = 1) {
  return loss_and_gradient(Xb, params, workers).grad;
}

/// Mean loss of the unrolled encoder over the columns of X.
inline double batch_loss(const Matrix& X, const EncoderParams& params, int workers = 1) {
  if (X.cols() == 0) return 0.0;
  const BatchCodes codes = encode_batch(X, params, workers);
  double total = 0.0;
  for (Eigen::Index j = 0; j < X.cols(); ++j) {
    SparseRepresentation rep{codes.S.col(j), codes.O.col(j), Vector()};
    total += loss(X.col(j), rep, params.dictionary, params.hyper);
  }
  return total / static_cast<double>(X.cols());
}

enum class DictInit : std::uint8_t { RandomGaussianNormalized = 0 };

struct EpochRecord {
  int epoch = 0;
  double objective = 0.0;  // mean unrolled loss over the training set
  Diagnostics diag;
};

struct TrainConfig {
  EncoderHyper hyper;
  int code_dim = 100;
  int epochs = 10;
  int batch_size = 100;
  double learning_rate = 0.1;
  std::uint64_t seed = 1;
  DictInit dict_init = DictInit::RandomGaussianNormalized;
  bool renormalize_atoms = true;
  int workers = 1;
  std::function<void(const EpochRecord&)> on_epoch;

  void validate(int data_dim) const {
    detail::require_arg(code_dim >= 1, "TrainConfig: code_dim must be positive");
    detail::require_arg(epochs >= 1, "TrainConfig: epochs must be at least 1");
    detail::require_arg(batch_size >= 1, "TrainConfig: batch_size must be at least 1");
    detail::require_arg(std::isfinite(learning_rate) && learning_rate >= 0.0,
                        "TrainConfig: learning_rate must be finite and nonnegative");
    detail::require_arg(workers >= 1, "TrainConfig: workers must be at least 1");
    hyper.validate(data_dim, code_dim);
  }
};

struct TrainReport {
  double initial_objective = 0.0;
  Diagnostics initial_diag;
  std::vector<EpochRecord> epochs;
  double seconds = 0.0;
};

struct TrainMetadata {
  std::uint64_t seed = 0;
  int epochs = 0;
  int batch_size = 0;
  double learning_rate = 0.0;
  bool renormalize_atoms = false;
  double final_objective = 0.0;
};

struct TrainedModel {
  Dictionary dictionary;
  EncoderHyper hyper;
  TrainMetadata meta;

  EncoderParams params() const { return build_encoder_params(dictionary, hyper); }
};

inline void renormalize_columns(Matrix& D) {
  for (Eigen::Index j = 0; j < D.cols(); ++j) {
    const double norm = D.col(j).norm();
    if (!(norm > 0.0) || !std::isfinite(norm))
      throw NumericalError("training: atom " + std::to_string(j) + " collapsed to zero");
    D.col(j) /= norm;
  }
}

/// Step size with a warm-started power iteration: 20 iterations from the
/// previous eigenvector, continuing to the full budget only if unconverged.
inline double warm_step_size(const Matrix& D, const EncoderHyper& hyper, Vector& warm) {
  PowerIterationOptions opts;
  opts.warm_start = warm;
  opts.max_iterations = 20;
  StepSize step = estimate_step_size_detailed(D, hyper.variant, hyper.lambda_star, opts);
  if (!step.estimate.converged) {
    opts.warm_start = step.estimate.vector;
    opts.max_iterations = 1000;
    step = estimate_step_size_detailed(D, hyper.variant, hyper.lambda_star, opts);
  }
  warm = step.estimate.vector;
  return step.alpha;
}

inline EpochRecord evaluate_epoch(const Matrix& X, const EncoderParams& params, int epoch, int workers) {
  const BatchCodes codes = encode_batch(X, params, workers);
  EpochRecord rec;
  rec.epoch = epoch;
  double total = 0.0;
  for (Eigen::Index j = 0; j < X.cols(); ++j) {
    SparseRepresentation rep{codes.S.col(j), codes.O.col(j), Vector()};
    total += loss(X.col(j), rep, params.dictionary, params.hyper);
  }
  rec.objective = total / static_cast<double>(X.cols());
  rec.diag = diagnostics(X, codes.S, codes.O, params.dictionary);
  return rec;
}

/// Mini-batch SGD on the dictionary. Deterministic for a fixed seed.
inline TrainedModel train(const DatasetMatrix& dataset, const TrainConfig& config, TrainReport* report = nullptr) {
  const auto started = std::chrono::steady_clock::now();
  dataset.validate();
  detail::require_arg(dataset.samples() >= 1, "train: empty dataset");
  const int m = static_cast<int>(dataset.data_dim());
  config.validate(m);
  const EncoderHyper& hyper = config.hyper;
  const Matrix& X = dataset.X;
  const Eigen::Index N = X.cols();

  Matrix D = Dictionary::random_unit_columns(m, config.code_dim, config.seed).atoms();
  Vector warm;
  std::mt19937_64 shuffle_rng(config.seed ^ 0x9e3779b97f4a7c15ULL);

  TrainReport local;
  {
    warm_step_size(D, hyper, warm);
    // Epoch metrics use the same cold step size as a saved model.
    const EncoderParams p = build_encoder_params(Dictionary(D), hyper);
    const EpochRecord init = evaluate_epoch(X, p, 0, config.workers);
    local.initial_objective = init.objective;
    local.initial_diag = init.diag;
  }

  std::vector<Eigen::Index> order(static_cast<std::size_t>(N));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  Matrix batch;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    for (Eigen::Index start = 0; start < N; start += config.batch_size) {
      const Eigen::Index count = std::min<Eigen::Index>(config.batch_size, N - start);
      batch.resize(m, count);
      for (Eigen::Index j = 0; j < count; ++j)
        batch.col(j) = X.col(order[static_cast<std::size_t>(start + j)]);
      // A zero learning rate leaves D untouched bit for bit.
      if (config.learning_rate == 0.0) continue;
      const double alpha = warm_step_size(D, hyper, warm);
      const EncoderParams params = build_encoder_params(Dictionary(D), hyper, alpha);
      const Matrix grad = grad_dictionary(batch, params, config.workers);
      D.noalias() -= config.learning_rate * grad;
      if (config.renormalize_atoms) renormalize_columns(D);
      if (!D.allFinite()) throw NumericalError("training: dictionary became nonfinite");
    }
    const EncoderParams params = build_encoder_params(Dictionary(D), hyper);
    EpochRecord rec = evaluate_epoch(X, params, epoch, config.workers);
    local.epochs.push_back(rec);
    if (config.on_epoch) config.on_epoch(rec);
    if (!std::isfinite(rec.objective) || rec.objective > 10.0 * local.initial_objective) {
      throw NumericalError("training diverged at epoch " + std::to_string(epoch) + ": objective " +
                           std::to_string(rec.objective) + " exceeds 10x the initial " +
                           std::to_string(local.initial_objective));
    }
  }
  local.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();

  TrainedModel model{Dictionary(std::move(D)), hyper, {}};
  model.meta.seed = config.seed;
  model.meta.epochs = config.epochs;
  model.meta.batch_size = config.batch_size;
  model.meta.learning_rate = config.learning_rate;
  model.meta.renormalize_atoms = config.renormalize_atoms;
  model.meta.final_objective = local.epochs.empty() ? local.initial_objective : local.epochs.back().objective;
  if (report) *report = std::move(local);
  return model;
}

}  // namespace kspc
