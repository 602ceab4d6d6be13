#include "emdet/latent.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

#include "emdet/error.hpp"

namespace emdet {

ImageLabel::ImageLabel(std::vector<int> positives) : positives_(std::move(positives)) {
  std::sort(positives_.begin(), positives_.end());
  if (std::adjacent_find(positives_.begin(), positives_.end()) != positives_.end()) {
    throw InputError("image label has duplicate categories");
  }
  if (!positives_.empty() && positives_.front() <= 0) {
    throw InputError("image label may only hold foreground categories (ids >= 1)");
  }
}

bool ImageLabel::contains(int category) const {
  return std::binary_search(positives_.begin(), positives_.end(), category);
}

bool operator<(const LatentConfig& a, const LatentConfig& b) {
  return std::lexicographical_compare(
      a.centers.begin(), a.centers.end(), b.centers.begin(), b.centers.end(),
      [](const Center& x, const Center& y) {
        if (x.category != y.category) return x.category < y.category;
        return x.proposal < y.proposal;
      });
}

std::string_view to_string(LatentMode mode) {
  switch (mode) {
    case LatentMode::exact: return "exact";
    case LatentMode::hard: return "hard";
    case LatentMode::k_em: return "k_em";
  }
  return "?";
}

LatentMode parse_latent_mode(std::string_view text) {
  if (text == "exact") return LatentMode::exact;
  if (text == "hard") return LatentMode::hard;
  if (text == "k_em" || text == "kem") return LatentMode::k_em;
  throw InputError("unknown latent mode '" + std::string(text) + "' (expected exact|hard|k_em)");
}

ProposalNeighborhoods::ProposalNeighborhoods(std::span<const Box> proposals, double threshold)
    : threshold_(threshold), neighbors_(proposals.size()) {
  const int n = static_cast<int>(proposals.size());
  for (int i = 0; i < n; ++i) {
    neighbors_[i].push_back({i, 1.0});
    for (int j = i + 1; j < n; ++j) {
      const double o = iou(proposals[i], proposals[j]);
      if (o >= threshold) {
        neighbors_[i].push_back({j, o});
        neighbors_[j].push_back({i, o});
      }
    }
  }
}

void validate_config(const LatentConfig& config, const ImageLabel& label, int proposal_count) {
  const auto& pos = label.positives();
  if (config.centers.size() != pos.size()) {
    throw InputError("latent config does not have one center per positive category");
  }
  std::set<int> used;
  for (std::size_t k = 0; k < pos.size(); ++k) {
    const Center& c = config.centers[k];
    if (c.category != pos[k]) throw InputError("latent config categories do not match the image label");
    if (c.proposal < 0 || c.proposal >= proposal_count) {
      throw InputError("latent config center index out of range");
    }
    if (!used.insert(c.proposal).second) throw InputError("latent config reuses a center proposal");
  }
}

ProposalLabeling expand(const LatentConfig& config, std::span<const Box> proposals, double threshold) {
  const std::size_t n = proposals.size();
  ProposalLabeling out{std::vector<int>(n, 0)};
  std::vector<double> best(n, -1.0);
  for (const Center& c : config.centers) {
    for (std::size_t i = 0; i < n; ++i) {
      const double o = iou(proposals[c.proposal], proposals[i]);
      if (o >= threshold && o > best[i]) {
        best[i] = o;
        out.labels[i] = c.category;
      }
    }
  }
  for (const Center& c : config.centers) out.labels[c.proposal] = c.category;
  return out;
}

ProposalLabeling expand(const LatentConfig& config, const ProposalNeighborhoods& graph) {
  const int n = graph.proposal_count();
  ProposalLabeling out{std::vector<int>(n, 0)};
  std::vector<double> best(n, -1.0);
  for (const Center& c : config.centers) {
    for (const auto& nb : graph.of(c.proposal)) {
      if (nb.overlap > best[nb.index]) {
        best[nb.index] = nb.overlap;
        out.labels[nb.index] = c.category;
      }
    }
  }
  for (const Center& c : config.centers) out.labels[c.proposal] = c.category;
  return out;
}

namespace {

constexpr std::uint64_t kSaturated = std::numeric_limits<std::uint64_t>::max();

std::uint64_t saturating_mul(std::uint64_t a, std::uint64_t b) {
  if (a != 0 && b > kSaturated / a) return kSaturated;
  return a * b;
}

void enumerate_from(int depth, int proposal_count, const std::vector<int>& positives,
                    std::vector<bool>& used, LatentConfig& current,
                    const std::function<void(const LatentConfig&)>& visit) {
  if (depth == static_cast<int>(positives.size())) {
    visit(current);
    return;
  }
  for (int p = 0; p < proposal_count; ++p) {
    if (used[p]) continue;
    used[p] = true;
    current.centers[depth] = {positives[depth], p};
    enumerate_from(depth + 1, proposal_count, positives, used, current, visit);
    used[p] = false;
  }
}

}  // namespace

std::uint64_t exact_config_count(int proposal_count, int positive_count) {
  if (positive_count > proposal_count) return 0;
  std::uint64_t n = 1;
  for (int k = 0; k < positive_count; ++k) n = saturating_mul(n, proposal_count - k);
  return n;
}

std::uint64_t latent_space_bound(int proposal_count, int positive_count) {
  std::uint64_t n = 1;
  for (int k = 0; k < positive_count; ++k) n = saturating_mul(n, proposal_count);
  return n;
}

void for_each_exact_config(int proposal_count, const ImageLabel& label,
                           const std::function<void(const LatentConfig&)>& visit) {
  if (proposal_count < label.size()) {
    std::ostringstream os;
    os << "no valid latent configuration: " << proposal_count << " proposals for " << label.size()
       << " positive categories";
    throw InputError(os.str());
  }
  std::vector<bool> used(proposal_count, false);
  LatentConfig current{std::vector<Center>(label.size())};
  enumerate_from(0, proposal_count, label.positives(), used, current, visit);
}

LatentConfigSet enumerate_exact(int proposal_count, const ImageLabel& label) {
  LatentConfigSet set{LatentMode::exact, label, {}};
  set.configs.reserve(exact_config_count(proposal_count, label.size()));
  for_each_exact_config(proposal_count, label,
                        [&](const LatentConfig& c) { set.configs.push_back(c); });
  return set;
}

ConfigScorer::ConfigScorer(const ProposalNeighborhoods& graph, const LogProbMatrix& log_probs)
    : graph_(graph),
      log_probs_(log_probs),
      best_overlap_(graph.proposal_count(), -1.0),
      owner_(graph.proposal_count(), 0) {
  if (log_probs.rows() != graph.proposal_count()) {
    throw InputError("log-probability rows do not match the proposal count");
  }
  if (!log_probs.allFinite()) throw InputError("non-finite log-probability entry");
  baseline_ = log_probs.col(0).sum();
  touched_.reserve(graph.proposal_count());
}

double ConfigScorer::operator()(const LatentConfig& config) const {
  for (const Center& c : config.centers) {
    for (const auto& nb : graph_.of(c.proposal)) {
      double& best = best_overlap_[nb.index];
      if (best < 0.0) touched_.push_back(nb.index);
      if (nb.overlap > best) {
        best = nb.overlap;
        owner_[nb.index] = c.category;
      }
    }
  }
  for (const Center& c : config.centers) owner_[c.proposal] = c.category;

  double delta = 0.0;
  for (int i : touched_) {
    delta += log_probs_(i, owner_[i]) - log_probs_(i, 0);
    best_overlap_[i] = -1.0;
    owner_[i] = 0;
  }
  touched_.clear();
  return baseline_ + delta;
}

double config_log_likelihood(const LatentConfig& config, const LogProbMatrix& log_probs,
                             std::span<const Box> proposals) {
  const ProposalNeighborhoods graph(proposals);
  return ConfigScorer(graph, log_probs)(config);
}

LatentConfigSet select_hard(const LatentConfigSet& exact, const ConfigScorer& scorer) {
  if (exact.configs.empty()) throw InputError("select_hard: empty configuration set");
  std::size_t best = 0;
  double best_value = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < exact.configs.size(); ++k) {
    const double v = scorer(exact.configs[k]);
    if (v > best_value || (v == best_value && exact.configs[k] < exact.configs[best])) {
      best = k;
      best_value = v;
    }
  }
  return {LatentMode::hard, exact.label, {exact.configs[best]}};
}

LatentConfigSet select_hard(const LatentConfigSet& exact, const LogProbMatrix& log_probs,
                            std::span<const Box> proposals) {
  const ProposalNeighborhoods graph(proposals);
  return select_hard(exact, ConfigScorer(graph, log_probs));
}

int k_em_candidates_per_category(int k, int positive_count) {
  if (k < 1) throw InputError("K must be a positive integer");
  if (positive_count <= 0) return 0;
  int r = 1;
  while (latent_space_bound(r + 1, positive_count) <= static_cast<std::uint64_t>(k)) ++r;
  return r;
}

LatentConfigSet select_k(const Eigen::MatrixXd& category_scores, const ImageLabel& label, int k) {
  const int n = static_cast<int>(category_scores.rows());
  const int m = label.size();
  for (int category : label.positives()) {
    if (category >= category_scores.cols()) throw InputError("select_k: category outside score matrix");
  }
  std::vector<std::vector<int>> ranked;
  for (int category : label.positives()) {
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return category_scores(a, category) > category_scores(b, category);
    });
    ranked.push_back(std::move(order));
  }

  LatentConfigSet set{LatentMode::k_em, label, {}};
  if (n < m) return set;
  // r grows past the K budget only while every candidate tuple repeats a center; r = M always suffices.
  for (int keep = std::min(n, k_em_candidates_per_category(k, m)); set.configs.empty(); ++keep) {
    std::vector<std::vector<int>> candidates;
    for (const auto& order : ranked) {
      candidates.emplace_back(order.begin(), order.begin() + keep);
      std::sort(candidates.back().begin(), candidates.back().end());
    }
    LatentConfig current{std::vector<Center>(m)};
    std::vector<bool> used(n, false);
    std::function<void(int)> recurse = [&](int depth) {
      if (depth == m) {
        set.configs.push_back(current);
        return;
      }
      for (int p : candidates[depth]) {
        if (used[p]) continue;
        used[p] = true;
        current.centers[depth] = {label.positives()[depth], p};
        recurse(depth + 1);
        used[p] = false;
      }
    };
    recurse(0);
  }
  return set;
}

LatentConfigSet select_k(std::span<const Box> proposals, const ImageLabel& label,
                         const LogProbMatrix& log_probs, int k) {
  if (log_probs.rows() != static_cast<Eigen::Index>(proposals.size())) {
    throw InputError("select_k: log-probability rows do not match the proposal count");
  }
  return select_k(log_probs, label, k);
}

ImageLabel column_max(const ProposalLabeling& labeling) {
  std::set<int> present;
  for (int l : labeling.labels) {
    if (l != 0) present.insert(l);
  }
  return ImageLabel(std::vector<int>(present.begin(), present.end()));
}

}  // namespace emdet
