#pragma once

#include <cstdint>
#include <iosfwd>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "emdet/dataset.hpp"
#include "emdet/latent.hpp"
#include "emdet/scorer.hpp"

namespace emdet {

/// Normalized E-step weights over one image's enumerated configurations.
struct PosteriorTable {
  std::string image_id;
  LatentConfigSet configs;
  std::vector<double> weights;
};

/// Per-proposal target distributions, B x C.
struct SoftLabels {
  std::string image_id;
  Eigen::MatrixXd q;
};

enum class MStepKind { sgd, full_batch };

struct LearningRateSchedule {
  double initial = 0.01;
  long drop_step = 1500;  ///< first global SGD step that uses `dropped`
  double dropped = 0.001;

  double at(long global_step) const { return global_step < drop_step ? initial : dropped; }
};

struct EmConfig {
  LatentMode mode = LatentMode::k_em;
  int k = 100;
  int em_iterations = 3;
  int sgd_steps_per_m_step = 2000;
  LearningRateSchedule lr;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  double l2 = 0.0;
  int fg_per_image = 16;
  int bg_per_image = 48;
  std::uint64_t seed = 0;
  double center_overlap = kCenterOverlap;

  MStepKind m_step = MStepKind::sgd;
  // Full-batch M-step: gradient descent, step halved until the loss decreases.
  int full_batch_steps = 50;
  double full_batch_step_size = 4.0;
  int full_batch_max_halvings = 40;

  bool trace_objective = true;
  std::uint64_t objective_guard = 1'000'000;  ///< max B^M for exact enumeration
  bool verbose = false;

  /// The schedule reported for the original large-scale training recipe.
  static EmConfig large_scale_schedule();
  /// Keys absent from `j` keep their value from `base`.
  static EmConfig from_json(const nlohmann::json& j, EmConfig base);
  static EmConfig from_json(const nlohmann::json& j) { return from_json(j, EmConfig()); }
  nlohmann::ordered_json to_json() const;
  void validate() const;
};

struct ObjectiveValue {
  double total = 0.0;
  double strong_term = 0.0;
  double weak_term = 0.0;
  double regularizer = 0.0;  ///< (l2/2)·||W||², not included in total
};

/// Per-image log-probability tables for every image of a dataset.
std::vector<LogProbMatrix> dataset_log_probs(const Dataset& dataset, const ScorerParams& params);

/// log Σ exp(values); -inf for an empty or all -inf input.
double log_sum_exp(const std::vector<double>& values);

/// log P(z | x; θ) by log-sum-exp over the exact configuration set.
double weak_log_marginal(const ImageRecord& image, const LogProbMatrix& log_probs,
                         std::uint64_t guard = 1'000'000, double center_overlap = kCenterOverlap);

/// Log likelihood of all observed data; weak images enumerate their exact latent space.
/// Throws GuardError once any weak image has B^M above `guard`.
ObjectiveValue objective(const Dataset& dataset, const ScorerParams& params, double l2 = 0.0,
                         std::uint64_t guard = 1'000'000, double center_overlap = kCenterOverlap);

/// Normalizes log-weights through log-sum-exp.
std::vector<double> normalize_log_weights(const std::vector<double>& log_weights);

PosteriorTable e_step(const ImageRecord& image, const LogProbMatrix& log_probs, const EmConfig& config);
PosteriorTable e_step(const ImageRecord& image, const ScorerParams& params, const EmConfig& config);

/// First E-step from pre-training scores: weight ∝ Π_c score(center_c, c) over the
/// configurations selected by `config.mode` (ranking by the same scores).
PosteriorTable e_step_from_scores(const ImageRecord& image, const Eigen::MatrixXd& init_scores,
                                  const EmConfig& config);

SoftLabels soft_labels(const PosteriorTable& posterior, std::span<const Box> proposals, int categories,
                       double center_overlap = kCenterOverlap);

/// One-hot targets: max-IoU ground-truth category when that IoU is >= 0.5, else background.
SoftLabels strong_labels(const ImageRecord& image, int categories);

/// Σ_images Σ_i Σ_c q_i(c)·log p_i(c; θ): the normalized expected complete-data log likelihood.
double expected_log_likelihood(const Dataset& dataset, const std::vector<SoftLabels>& labels,
                               const ScorerParams& params);

/// Full-batch soft-label cross-entropy (the negative of expected_log_likelihood, plus
/// the l2 term) and its gradient, evaluated with whole-image matrix products.
GradientResult full_batch_gradient(const Dataset& dataset, const std::vector<SoftLabels>& labels,
                                   const ScorerParams& params, double l2);

struct TrainerState {
  OptimizerState optimizer;
  long global_step = 0;
  std::mt19937_64 rng;
};

TrainerState make_trainer(const ScorerParams& params, const EmConfig& config);

/// Composition of one M-step mini-batch drawn from an image and its flipped twin.
std::vector<TrainingSample> sample_minibatch(const ImageRecord& image, const SoftLabels& labels,
                                             const EmConfig& config, std::mt19937_64& rng,
                                             bool* missing_foreground = nullptr);

/// Stochastic M-step: sgd_steps_per_m_step momentum-SGD steps on mean mini-batch loss.
ScorerParams m_step(const Dataset& dataset, const std::vector<SoftLabels>& labels, ScorerParams params,
                    TrainerState& state, const EmConfig& config);

/// Deterministic M-step: full-batch gradient descent with backtracking; never increases the loss.
ScorerParams m_step_full_batch(const Dataset& dataset, const std::vector<SoftLabels>& labels,
                               ScorerParams params, const EmConfig& config);

/// Targets for every image: strong images from their annotation, weak ones from their posteriors.
std::vector<SoftLabels> dataset_soft_labels(const Dataset& dataset, const std::vector<PosteriorTable>& posteriors,
                                            int categories, double center_overlap = kCenterOverlap);

using EmInit = std::variant<ScorerParams, InitScores>;

struct EmIterationRecord {
  int iteration = 0;
  ObjectiveValue objective;
  /// Expected log likelihood under the E-step weights that fed M-step `iteration`,
  /// evaluated before (at θ′) and after (at θ) the M-step. NaN at iteration 0.
  double surrogate_before = 0.0;
  double surrogate_after = 0.0;
};

struct EmResult {
  ScorerParams params;
  std::vector<EmIterationRecord> trace;  ///< entry 0 is the initial state
};

/// The EM loop: E-step (or the init-score E-step on the first round), then M-step,
/// for config.em_iterations rounds.
EmResult run_em(const Dataset& dataset, const EmInit& init, const EmConfig& config);

void write_trace_csv(std::ostream& out, const std::vector<EmIterationRecord>& trace);

}  // namespace emdet
