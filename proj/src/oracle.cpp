#include "emdet/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "emdet/error.hpp"

namespace emdet::oracle {

namespace {

void guard(const ImageRecord& image) {
  const auto bound = latent_space_bound(image.proposal_count(), image.image_label().size());
  if (bound > kGuard) {
    std::ostringstream os;
    os << "oracle: image " << image.id << " has B^M = " << bound << " > " << kGuard;
    throw GuardError(os.str());
  }
}

// Calls visit(config) for every distinct-center tuple, odometer order (lexicographic).
template <typename Visit>
void odometer(int proposals, const ImageLabel& label, Visit&& visit) {
  const int m = label.size();
  std::vector<int> digits(m, 0);
  if (proposals < m) return;
  for (;;) {
    bool distinct = true;
    for (int a = 0; a < m && distinct; ++a) {
      for (int b = a + 1; b < m; ++b) {
        if (digits[a] == digits[b]) {
          distinct = false;
          break;
        }
      }
    }
    if (distinct) {
      LatentConfig c;
      for (int a = 0; a < m; ++a) c.centers.push_back({label.positives()[a], digits[a]});
      visit(c);
    }
    int pos = m - 1;
    while (pos >= 0 && ++digits[pos] == proposals) digits[pos--] = 0;
    if (pos < 0) return;
  }
}

}  // namespace

double labeling_log_likelihood(const ProposalLabeling& labeling, const LogProbMatrix& log_probs) {
  double s = 0.0;
  for (std::size_t i = 0; i < labeling.labels.size(); ++i) s += log_probs(static_cast<Eigen::Index>(i), labeling.labels[i]);
  return s;
}

PosteriorTable brute_posterior(const ImageRecord& image, const ScorerParams& params) {
  guard(image);
  const ImageLabel label = image.image_label();
  if (image.proposal_count() < label.size()) throw InputError("oracle: fewer proposals than positive categories");
  LogProbMatrix lp(image.proposal_count(), params.categories());
  for (int i = 0; i < image.proposal_count(); ++i) lp.row(i) = log_softmax(params, image.features.row(i).transpose()).transpose();

  PosteriorTable post{image.id, {LatentMode::exact, label, {}}, {}};
  std::vector<double> log_w;
  odometer(image.proposal_count(), label, [&](const LatentConfig& c) {
    post.configs.configs.push_back(c);
    log_w.push_back(labeling_log_likelihood(expand(c, image.proposals), lp));
  });
  const double top = *std::max_element(log_w.begin(), log_w.end());
  double z = 0.0;
  for (double v : log_w) z += std::exp(v - top);
  for (double v : log_w) post.weights.push_back(std::exp(v - top) / z);
  return post;
}

double brute_marginal_likelihood(const ImageRecord& image, const ScorerParams& params) {
  guard(image);
  const ImageLabel label = image.image_label();
  if (image.proposal_count() < label.size()) throw InputError("oracle: fewer proposals than positive categories");
  LogProbMatrix lp(image.proposal_count(), params.categories());
  for (int i = 0; i < image.proposal_count(); ++i) lp.row(i) = log_softmax(params, image.features.row(i).transpose()).transpose();
  std::vector<double> log_w;
  odometer(image.proposal_count(), label,
           [&](const LatentConfig& c) { log_w.push_back(labeling_log_likelihood(expand(c, image.proposals), lp)); });
  const double top = *std::max_element(log_w.begin(), log_w.end());
  double z = 0.0;
  for (double v : log_w) z += std::exp(v - top);
  return top + std::log(z);
}

std::vector<double> restrict_posterior(const PosteriorTable& exact, const LatentConfigSet& subset) {
  std::vector<double> w;
  double total = 0.0;
  for (const auto& c : subset.configs) {
    const auto it = std::find(exact.configs.configs.begin(), exact.configs.configs.end(), c);
    if (it == exact.configs.configs.end()) throw InputError("oracle: configuration outside the exact latent space");
    w.push_back(exact.weights[static_cast<std::size_t>(it - exact.configs.configs.begin())]);
    total += w.back();
  }
  for (double& v : w) v /= total;
  return w;
}

std::size_t argmax_config(const PosteriorTable& posterior) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < posterior.weights.size(); ++k) {
    const double a = posterior.weights[k];
    const double b = posterior.weights[best];
    if (a > b || (a == b && posterior.configs.configs[k] < posterior.configs.configs[best])) best = k;
  }
  return best;
}

nlohmann::ordered_json Report::to_json() const {
  nlohmann::ordered_json j;
  j["mode"] = std::string(to_string(mode));
  j["K"] = k;
  j["images"] = images;
  j["max_objective_abs"] = max_objective_abs;
  j["max_objective_rel"] = max_objective_rel;
  j["max_weight_abs"] = max_weight_abs;
  j["max_weight_rel"] = max_weight_rel;
  j["hard_mismatches"] = hard_mismatches;
  j["vacuous_images"] = vacuous_images;
  j["truncated_images"] = truncated_images;
  j["pass"] = pass;
  return j;
}

Report compare(const Dataset& dataset, const ScorerParams& params, const EmConfig& fast_config, const Tolerances& tol) {
  for (const auto& im : dataset.images) guard(im);
  Report r;
  r.mode = fast_config.mode;
  r.k = fast_config.k;
  for (const auto& source : dataset.images) {
    const ImageRecord im = source.is_weak() ? source : demote_to_weak(source);
    ++r.images;

    const LogProbMatrix lp = log_softmax_rows(params, im.features);
    const double fast_obj = weak_log_marginal(im, lp, fast_config.objective_guard, fast_config.center_overlap);
    const double ref_obj = brute_marginal_likelihood(im, params);
    const double obj_abs = std::abs(fast_obj - ref_obj);
    r.max_objective_abs = std::max(r.max_objective_abs, obj_abs);
    r.max_objective_rel = std::max(r.max_objective_rel, obj_abs / std::max(1.0, std::abs(ref_obj)));
    if (!(obj_abs <= tol.objective)) r.pass = false;

    const PosteriorTable ref = brute_posterior(im, params);
    const PosteriorTable fast = e_step(im, lp, fast_config);
    switch (fast_config.mode) {
      case LatentMode::exact: {
        if (fast.configs.configs != ref.configs.configs) {
          r.pass = false;
          r.max_weight_abs = std::max(r.max_weight_abs, 1.0);
          break;
        }
        for (std::size_t k = 0; k < ref.weights.size(); ++k) {
          const double d = std::abs(fast.weights[k] - ref.weights[k]);
          r.max_weight_abs = std::max(r.max_weight_abs, d);
          if (ref.weights[k] > 0.0) r.max_weight_rel = std::max(r.max_weight_rel, d / ref.weights[k]);
          if (!(d <= tol.posterior_exact)) r.pass = false;
        }
        break;
      }
      case LatentMode::hard: {
        if (fast.configs.configs.size() != 1 ||
            fast.configs.configs.front() != ref.configs.configs[argmax_config(ref)]) {
          ++r.hard_mismatches;
          r.pass = false;
        }
        break;
      }
      case LatentMode::k_em: {
        const bool vacuous = fast.configs.size() == ref.configs.size();
        std::vector<double> expected;
        try {
          expected = vacuous ? ref.weights : restrict_posterior(ref, fast.configs);
        } catch (const InputError&) {
          r.pass = false;
          break;
        }
        if (vacuous) {
          ++r.vacuous_images;
          if (fast.configs.configs != ref.configs.configs) {
            r.pass = false;
            break;
          }
        } else {
          ++r.truncated_images;
        }
        for (std::size_t k = 0; k < expected.size(); ++k) {
          const double d = std::abs(fast.weights[k] - expected[k]);
          r.max_weight_abs = std::max(r.max_weight_abs, d);
          const double rel = expected[k] > 0.0 ? d / expected[k] : d;
          r.max_weight_rel = std::max(r.max_weight_rel, rel);
          if (!(rel <= tol.k_em_vacuous)) r.pass = false;
        }
        break;
      }
    }
  }
  return r;
}

}  // namespace emdet::oracle
