#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

namespace emdet {

/// Multinomial logistic proposal classifier. `weights` is C x (d+1); the last
/// column holds the biases.
struct ScorerParams {
  Eigen::MatrixXd weights;

  ScorerParams() = default;
  ScorerParams(int categories, int feature_dim);
  explicit ScorerParams(Eigen::MatrixXd w);

  int categories() const { return static_cast<int>(weights.rows()); }
  int feature_dim() const { return static_cast<int>(weights.cols()) - 1; }

  friend bool operator==(const ScorerParams& a, const ScorerParams& b) {
    return a.weights.rows() == b.weights.rows() && a.weights.cols() == b.weights.cols() &&
           a.weights == b.weights;
  }
};

struct OptimizerState {
  Eigen::MatrixXd velocity;
  double learning_rate = 0.01;
  double momentum = 0.9;
  double weight_decay = 0.0005;
};

OptimizerState make_optimizer(const ScorerParams& params, double learning_rate, double momentum,
                              double weight_decay);

/// log softmax(weights * [features; 1]) using the max-subtracted log-sum-exp.
Eigen::VectorXd log_softmax(const ScorerParams& params, const Eigen::Ref<const Eigen::VectorXd>& features);

/// Row i of the result is log_softmax of row i of `features` (B x d).
Eigen::MatrixXd log_softmax_rows(const ScorerParams& params, const Eigen::MatrixXd& features);

struct TrainingSample {
  Eigen::VectorXd features;
  Eigen::VectorXd target;  ///< probability distribution over the C categories
};

struct GradientResult {
  Eigen::MatrixXd gradient;
  double loss = 0.0;
};

/// Soft-label cross-entropy summed over the batch, plus (l2/2)·||W||² on the
/// non-bias columns, and its exact gradient.
GradientResult weighted_ce_gradient(const ScorerParams& params, std::span<const TrainingSample> batch,
                                    double l2);

/// velocity <- momentum·velocity - lr·(gradient + weight_decay·W); W <- W + velocity.
/// Weight decay does not touch the bias column.
void sgd_step(ScorerParams& params, OptimizerState& state, const Eigen::MatrixXd& gradient);

nlohmann::ordered_json checkpoint_to_json(const ScorerParams& params,
                                          const nlohmann::json& meta = nlohmann::json::object());
ScorerParams checkpoint_from_json(const nlohmann::json& j);
void save_checkpoint(const std::filesystem::path& path, const ScorerParams& params,
                     const nlohmann::json& meta = nlohmann::json::object());
ScorerParams load_checkpoint(const std::filesystem::path& path);

}  // namespace emdet
