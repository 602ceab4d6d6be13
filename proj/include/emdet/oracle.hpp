#pragma once

#include <cstdint>
#include <string>

#include <json.hpp>

#include "emdet/dataset.hpp"
#include "emdet/em.hpp"
#include "emdet/latent.hpp"
#include "emdet/scorer.hpp"

namespace emdet::oracle {

inline constexpr std::uint64_t kGuard = 100'000;

// Reference implementations: every center tuple of B^M is visited with an odometer,
// duplicate-center tuples are skipped, and each configuration is expanded from the
// raw boxes and summed over all B proposals. Nothing is shared with the fast path
// beyond expand() and log_softmax().

/// Σ_i log P(y_i | b_i) for an explicit labeling.
double labeling_log_likelihood(const ProposalLabeling& labeling, const LogProbMatrix& log_probs);

double brute_marginal_likelihood(const ImageRecord& image, const ScorerParams& params);
PosteriorTable brute_posterior(const ImageRecord& image, const ScorerParams& params);

/// Brute weights restricted to `subset` (a subset of the exact space) and renormalized.
std::vector<double> restrict_posterior(const PosteriorTable& exact, const LatentConfigSet& subset);

/// Index of the highest-weight configuration; ties to the lexicographically smallest.
std::size_t argmax_config(const PosteriorTable& posterior);

struct Tolerances {
  double objective = 1e-9;
  double posterior_exact = 1e-12;
  double k_em_vacuous = 1e-9;
};

struct Report {
  LatentMode mode = LatentMode::exact;
  int k = 0;
  int images = 0;
  double max_objective_abs = 0.0;
  double max_objective_rel = 0.0;
  double max_weight_abs = 0.0;
  double max_weight_rel = 0.0;
  int hard_mismatches = 0;
  int vacuous_images = 0;   ///< k_em images where K covered the whole latent space
  int truncated_images = 0; ///< k_em images checked against the renormalized subset only
  bool pass = true;

  nlohmann::ordered_json to_json() const;
};

/// Compares the fast path (run with `fast_config`) with the reference on every image;
/// strong images are demoted to their image-level label first. Throws GuardError when
/// an image exceeds kGuard.
Report compare(const Dataset& dataset, const ScorerParams& params, const EmConfig& fast_config,
               const Tolerances& tol = {});

}  // namespace emdet::oracle
