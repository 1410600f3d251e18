#pragma once

// Multinomial logistic regression on frozen codes.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <set>
#include <vector>

#include <Eigen/Core>

#include "kspc/error.hpp"

namespace kspc {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

struct LogRegConfig {
  double learning_rate = 1.0;
  int epochs = 500;
  double l2 = 1e-4;
  std::uint64_t seed = 0;
  int batch_size = 0;        // 0 = full batch with backtracking
  bool standardize = false;  // per-feature z-scoring learned on the training codes
};

struct LogRegModel {
  Matrix weights;  // C x n
  Vector bias;     // C
  int classes = 0;
  Vector feature_mean;   // empty unless standardized
  Vector feature_scale;  // empty unless standardized

  int features() const { return static_cast<int>(weights.cols()); }
};

struct FitReport {
  std::vector<double> loss;  // objective after each epoch; loss[0] is the initial value
  int backtracks = 0;
};

namespace detail {

inline Matrix prepare_features(const LogRegModel& model, const Matrix& codes) {
  if (model.feature_mean.size() == 0) return codes;
  Matrix out = codes.colwise() - model.feature_mean;
  out.array().colwise() /= model.feature_scale.array();
  return out;
}

/// Column-wise log-softmax cross entropy against integer labels, plus the
/// gradient of the mean with respect to the logits.
inline double cross_entropy(const Matrix& logits, const std::vector<int>& labels, Matrix* grad_logits) {
  const Eigen::Index N = logits.cols();
  double total = 0.0;
  if (grad_logits) grad_logits->resize(logits.rows(), N);
  for (Eigen::Index j = 0; j < N; ++j) {
    const double peak = logits.col(j).maxCoeff();
    const Vector e = (logits.col(j).array() - peak).exp().matrix();
    const double z = e.sum();
    const int y = labels[static_cast<std::size_t>(j)];
    total += std::log(z) + peak - logits(y, j);
    if (grad_logits) {
      grad_logits->col(j) = e / z;
      (*grad_logits)(y, j) -= 1.0;
    }
  }
  const double inv_n = 1.0 / static_cast<double>(N);
  if (grad_logits) *grad_logits *= inv_n;
  return total * inv_n;
}

inline double regularized_loss(const Matrix& W, const Vector& bias, const Matrix& feats,
                               const std::vector<int>& labels, double l2, Matrix* gW, Vector* gb) {
  Matrix logits = W * feats;
  logits.colwise() += bias;
  Matrix g;
  const double ce = cross_entropy(logits, labels, (gW || gb) ? &g : nullptr);
  if (gW) {
    gW->noalias() = g * feats.transpose();
    *gW += l2 * W;
  }
  if (gb) *gb = g.rowwise().sum();
  return ce + 0.5 * l2 * W.squaredNorm();
}

inline std::vector<int> select(const std::vector<int>& labels, const std::vector<Eigen::Index>& idx,
                               Eigen::Index begin, Eigen::Index end) {
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(end - begin));
  for (Eigen::Index i = begin; i < end; ++i) out.push_back(labels[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])]);
  return out;
}

}  // namespace detail

/// Minimizes mean cross entropy + l2/2 ||weights||_F^2. Full-batch mode
/// halves the step until the objective does not increase.
inline LogRegModel fit(const Matrix& codes, const std::vector<int>& labels, const LogRegConfig& config,
                       FitReport* report = nullptr) {
  const Eigen::Index N = codes.cols();
  detail::require_arg(N >= 1 && codes.rows() >= 1, "fit: empty input");
  detail::require_shape(static_cast<Eigen::Index>(labels.size()) == N, "fit: label count mismatch");
  detail::require_arg(config.epochs >= 0 && config.learning_rate > 0.0 && config.l2 >= 0.0,
                      "fit: invalid optimizer settings");
  if (!codes.allFinite()) throw NumericalError("fit: nonfinite codes");
  const auto [lo, hi] = std::minmax_element(labels.begin(), labels.end());
  detail::require_arg(*lo >= 0, "fit: labels must be nonnegative");
  const int C = *hi + 1;
  if (std::set<int>(labels.begin(), labels.end()).size() < 2)
    throw InvalidArgument("fit: labels contain a single class");
  detail::require_arg(N >= C, "fit: fewer samples than classes");

  LogRegModel model;
  model.classes = C;
  model.weights = Matrix::Zero(C, codes.rows());
  model.bias = Vector::Zero(C);
  if (config.standardize) {
    model.feature_mean = codes.rowwise().mean();
    const Matrix centered = codes.colwise() - model.feature_mean;
    model.feature_scale = (centered.array().square().rowwise().sum() / static_cast<double>(N)).sqrt().matrix();
    for (auto& s : model.feature_scale) s = s > 1e-12 ? s : 1.0;
  }
  const Matrix feats = detail::prepare_features(model, codes);

  FitReport local;
  double lr = config.learning_rate;
  Matrix gW;
  Vector gb;
  double current = detail::regularized_loss(model.weights, model.bias, feats, labels, config.l2, nullptr, nullptr);
  local.loss.push_back(current);

  if (config.batch_size <= 0 || config.batch_size >= N) {
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
      detail::regularized_loss(model.weights, model.bias, feats, labels, config.l2, &gW, &gb);
      for (int attempt = 0; attempt < 60; ++attempt) {
        const Matrix W_try = model.weights - lr * gW;
        const Vector b_try = model.bias - lr * gb;
        const double trial = detail::regularized_loss(W_try, b_try, feats, labels, config.l2, nullptr, nullptr);
        if (trial <= current) {
          model.weights = W_try;
          model.bias = b_try;
          current = trial;
          break;
        }
        lr *= 0.5;
        ++local.backtracks;
      }
      local.loss.push_back(current);
    }
  } else {
    std::mt19937_64 rng(config.seed);
    std::vector<Eigen::Index> order(static_cast<std::size_t>(N));
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
      std::shuffle(order.begin(), order.end(), rng);
      for (Eigen::Index start = 0; start < N; start += config.batch_size) {
        const Eigen::Index end = std::min<Eigen::Index>(N, start + config.batch_size);
        Matrix fb(feats.rows(), end - start);
        for (Eigen::Index j = start; j < end; ++j) fb.col(j - start) = feats.col(order[static_cast<std::size_t>(j)]);
        const auto lb = detail::select(labels, order, start, end);
        detail::regularized_loss(model.weights, model.bias, fb, lb, config.l2, &gW, &gb);
        model.weights -= lr * gW;
        model.bias -= lr * gb;
      }
      current = detail::regularized_loss(model.weights, model.bias, feats, labels, config.l2, nullptr, nullptr);
      local.loss.push_back(current);
    }
  }
  if (!model.weights.allFinite() || !model.bias.allFinite()) throw NumericalError("fit: nonfinite weights");
  if (report) *report = std::move(local);
  return model;
}

/// Class scores, one column per sample.
inline Matrix logits(const LogRegModel& model, const Matrix& codes) {
  detail::require_shape(codes.rows() == model.features(), "logits: feature dimension mismatch");
  Matrix out = model.weights * detail::prepare_features(model, codes);
  out.colwise() += model.bias;
  return out;
}

/// Argmax per column; ties resolve to the lowest class index.
inline std::vector<int> argmax_columns(const Matrix& scores) {
  std::vector<int> out(static_cast<std::size_t>(scores.cols()));
  for (Eigen::Index j = 0; j < scores.cols(); ++j) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < scores.rows(); ++c)
      if (scores(c, j) > scores(best, j)) best = c;
    out[static_cast<std::size_t>(j)] = static_cast<int>(best);
  }
  return out;
}

inline std::vector<int> predict(const LogRegModel& model, const Matrix& codes) {
  return argmax_columns(logits(model, codes));
}

/// Fraction of samples whose argmax class differs from the label.
inline double error_rate(const LogRegModel& model, const Matrix& codes, const std::vector<int>& labels) {
  detail::require_shape(static_cast<Eigen::Index>(labels.size()) == codes.cols(), "error_rate: label count mismatch");
  if (labels.empty()) return 0.0;
  const auto pred = predict(model, codes);
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) wrong += pred[i] != labels[i];
  return static_cast<double>(wrong) / static_cast<double>(labels.size());
}

}  // namespace kspc
