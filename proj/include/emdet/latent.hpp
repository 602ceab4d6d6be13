#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "emdet/geometry.hpp"

namespace emdet {

/// Per-proposal log class probabilities, B rows by C columns (column 0 is background).
using LogProbMatrix = Eigen::MatrixXd;

/// Proposals overlapping a center box at least this much inherit its category.
inline constexpr double kCenterOverlap = 0.5;

/// The positive foreground categories of a weakly annotated image, ascending.
class ImageLabel {
 public:
  ImageLabel() = default;
  /// Sorts the ids; rejects duplicates, the background id 0 and negative ids.
  explicit ImageLabel(std::vector<int> positives);

  const std::vector<int>& positives() const { return positives_; }
  int size() const { return static_cast<int>(positives_.size()); }
  bool contains(int category) const;

  friend bool operator==(const ImageLabel&, const ImageLabel&) = default;

 private:
  std::vector<int> positives_;
};

struct Center {
  int category;
  int proposal;
  friend bool operator==(const Center&, const Center&) = default;
};

/// One spatial-consistence labeling, stored as its center boxes in ascending category order.
struct LatentConfig {
  std::vector<Center> centers;

  friend bool operator==(const LatentConfig&, const LatentConfig&) = default;
  /// Lexicographic over the center proposal indices (categories are shared within an image).
  friend bool operator<(const LatentConfig& a, const LatentConfig& b);
};

/// A category id for every proposal, 0 for background.
struct ProposalLabeling {
  std::vector<int> labels;
  friend bool operator==(const ProposalLabeling&, const ProposalLabeling&) = default;
};

enum class LatentMode { exact, hard, k_em };

std::string_view to_string(LatentMode mode);
LatentMode parse_latent_mode(std::string_view text);

struct LatentConfigSet {
  LatentMode mode = LatentMode::exact;
  ImageLabel label;
  std::vector<LatentConfig> configs;

  int positive_count() const { return label.size(); }
  std::size_t size() const { return configs.size(); }
};

/// Sparse IoU graph: for each proposal, every proposal (itself included) whose IoU
/// with it is at least the threshold.
class ProposalNeighborhoods {
 public:
  struct Neighbor {
    int index;
    double overlap;
  };

  explicit ProposalNeighborhoods(std::span<const Box> proposals, double threshold = kCenterOverlap);

  int proposal_count() const { return static_cast<int>(neighbors_.size()); }
  const std::vector<Neighbor>& of(int proposal) const { return neighbors_[proposal]; }
  double threshold() const { return threshold_; }

 private:
  double threshold_;
  std::vector<std::vector<Neighbor>> neighbors_;
};

/// Throws InputError unless `config` has exactly one distinct, in-range center per positive category.
void validate_config(const LatentConfig& config, const ImageLabel& label, int proposal_count);

/// Expands center boxes into a full labeling. A non-center proposal overlapping one or
/// more centers by at least the threshold takes the category of the center it overlaps
/// most (equal overlaps go to the lower category id); centers keep their own category.
ProposalLabeling expand(const LatentConfig& config, std::span<const Box> proposals,
                        double threshold = kCenterOverlap);
ProposalLabeling expand(const LatentConfig& config, const ProposalNeighborhoods& graph);

/// B!/(B-M)!, saturating at UINT64_MAX.
std::uint64_t exact_config_count(int proposal_count, int positive_count);
/// B^M, saturating at UINT64_MAX; the quantity the enumeration guards are stated in.
std::uint64_t latent_space_bound(int proposal_count, int positive_count);

/// Visits every distinct-center configuration in lexicographic order.
void for_each_exact_config(int proposal_count, const ImageLabel& label,
                           const std::function<void(const LatentConfig&)>& visit);

LatentConfigSet enumerate_exact(int proposal_count, const ImageLabel& label);
inline LatentConfigSet enumerate_exact(std::span<const Box> proposals, const ImageLabel& label) {
  return enumerate_exact(static_cast<int>(proposals.size()), label);
}

/// Evaluates the log likelihood of configurations against one image's log-probabilities:
/// the all-background sum plus, per configuration, the change contributed by the
/// expanded neighborhoods. Holds scratch buffers, so one instance is not shareable
/// across threads.
class ConfigScorer {
 public:
  ConfigScorer(const ProposalNeighborhoods& graph, const LogProbMatrix& log_probs);

  double operator()(const LatentConfig& config) const;
  double background_baseline() const { return baseline_; }

 private:
  const ProposalNeighborhoods& graph_;
  const LogProbMatrix& log_probs_;
  double baseline_ = 0.0;
  mutable std::vector<double> best_overlap_;
  mutable std::vector<int> owner_;
  mutable std::vector<int> touched_;
};

double config_log_likelihood(const LatentConfig& config, const LogProbMatrix& log_probs,
                             std::span<const Box> proposals);

/// The single most likely configuration of an exact set; ties go to the
/// lexicographically smallest configuration.
LatentConfigSet select_hard(const LatentConfigSet& exact, const LogProbMatrix& log_probs,
                            std::span<const Box> proposals);
LatentConfigSet select_hard(const LatentConfigSet& exact, const ConfigScorer& scorer);

/// Largest r with r^M <= K.
int k_em_candidates_per_category(int k, int positive_count);

/// Top-K truncation: per positive category, the proposals ranked highest by
/// `category_scores(i, category)` (ties to the lower index) become the candidate
/// centers, and the output is their duplicate-free Cartesian product in
/// lexicographic order. When every tuple repeats a center, the per-category list
/// grows until one does not. Empty only when B < M. Any monotone per-category score
/// works as the ranking.
LatentConfigSet select_k(const Eigen::MatrixXd& category_scores, const ImageLabel& label, int k);
LatentConfigSet select_k(std::span<const Box> proposals, const ImageLabel& label,
                         const LogProbMatrix& log_probs, int k);

/// Column-max over foreground columns of a labeling: the image label it implies.
ImageLabel column_max(const ProposalLabeling& labeling);

}  // namespace emdet
