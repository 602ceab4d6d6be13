#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "emdet/geometry.hpp"
#include "emdet/latent.hpp"

namespace emdet {

struct GroundTruthObject {
  Box box;
  int category;
  friend bool operator==(const GroundTruthObject&, const GroundTruthObject&) = default;
};

struct WeakAnnotation {
  ImageLabel label;
  friend bool operator==(const WeakAnnotation&, const WeakAnnotation&) = default;
};

struct StrongAnnotation {
  std::vector<GroundTruthObject> objects;
  friend bool operator==(const StrongAnnotation&, const StrongAnnotation&) = default;
};

using Annotation = std::variant<WeakAnnotation, StrongAnnotation>;

struct ImageRecord {
  std::string id;
  double width = 0.0;
  double height = 0.0;
  std::vector<Box> proposals;
  Eigen::MatrixXd features;  ///< one row per proposal
  Annotation annotation;

  bool is_weak() const { return std::holds_alternative<WeakAnnotation>(annotation); }
  const StrongAnnotation& strong() const;
  /// z: the weak label, or the column-max of the strong objects.
  ImageLabel image_label() const;
  int proposal_count() const { return static_cast<int>(proposals.size()); }

  friend bool operator==(const ImageRecord& a, const ImageRecord& b);
};

/// Throws InputError on any broken ImageRecord invariant.
void validate(const ImageRecord& image);

/// The same image with strong objects replaced by their image-level label.
ImageRecord demote_to_weak(const ImageRecord& image);

/// Horizontally mirrored twin. Features are flip-invariant and copied as-is.
ImageRecord flipped(const ImageRecord& image);

struct Dataset {
  std::vector<ImageRecord> images;

  std::size_t size() const { return images.size(); }
  bool empty() const { return images.empty(); }
  /// Feature dimension shared by every image; 0 for an empty dataset.
  int feature_dim() const;
  /// 1 + the largest category id appearing in any annotation.
  int category_count() const;
  std::size_t weak_count() const;

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

// JSON-lines IO. Each line is one image; errors carry the 1-based line number.
std::string to_jsonl(const Dataset& dataset);
Dataset from_jsonl(std::istream& in, const std::string& source = "<stream>");
void save_dataset(const std::filesystem::path& path, const Dataset& dataset);
Dataset load_dataset(const std::filesystem::path& path);

nlohmann::ordered_json image_to_json(const ImageRecord& image);
ImageRecord image_from_json(const nlohmann::json& j);

/// Pre-training center scores: per image, B x (C-1) non-negative scores, column k
/// for foreground category k+1.
struct InitScores {
  std::map<std::string, Eigen::MatrixXd> by_image;

  const Eigen::MatrixXd& at(const std::string& image_id) const;
  friend bool operator==(const InitScores&, const InitScores&) = default;
};

void save_init_scores(const std::filesystem::path& path, const Dataset& order, const InitScores& scores);
InitScores load_init_scores(const std::filesystem::path& path);
std::string init_scores_to_jsonl(const Dataset& order, const InitScores& scores);
InitScores init_scores_from_jsonl(std::istream& in, const std::string& source = "<stream>");

struct GeneratorSpec {
  std::uint64_t seed = 0;
  int train_images = 200;
  int test_images = 100;
  int foreground_categories = 4;
  int proposals_per_image = 50;
  int feature_dim = 16;
  double noise_sigma = 0.3;
  double canvas_width = 100.0;
  double canvas_height = 100.0;
  double min_object_size = 20.0;
  double max_object_size = 45.0;
  int max_objects_per_image = 3;
  int jitters_per_object = 8;
  double min_background_size = 8.0;
  double max_background_size = 60.0;

  static GeneratorSpec from_json(const nlohmann::json& j);
  nlohmann::ordered_json to_json() const;
  /// Throws InputError when no dataset can satisfy the spec.
  void validate() const;
};

struct Benchmark {
  Dataset train;
  Dataset test;
};

/// Synthetic detection data: every image is strongly annotated; a pure function of the spec.
Benchmark generate(const GeneratorSpec& spec);

/// Unit prototype for a category: the basis vector e_{category-1}.
Eigen::VectorXd category_prototype(int category, int feature_dim);

/// Noisy stand-in for a weakly supervised pre-trained detector. For a category that
/// is present, a proposal scores by overlap with the object plus a bonus for lying
/// inside it (part-domination bias), times log-normal noise; absent categories
/// receive small noisy scores. Scores are clamped to (0, 1].
struct InitScoreSpec {
  std::uint64_t seed = 1;
  double overlap_weight = 0.5;
  double containment_weight = 0.5;
  double log_noise_sigma = 0.6;
  double absent_level = 0.02;
  double floor = 1e-4;

  static InitScoreSpec from_json(const nlohmann::json& j);
  nlohmann::ordered_json to_json() const;
};

/// Requires strong annotations (the simulated detector sees the geometry).
InitScores simulate_init_scores(const Dataset& dataset, int foreground_categories, const InitScoreSpec& spec);

struct StratumCount {
  int category;  ///< stratum key: lowest category id present in the image
  int images;
  int strong;
};

struct SemiSplit {
  Dataset dataset;
  std::vector<StratumCount> strata;
  int strong_images = 0;

  nlohmann::ordered_json manifest(double fraction, std::uint64_t seed) const;
};

/// Keeps round(fraction·N) images strong, apportioned across strata (keyed by each
/// image's lowest category) by largest remainder; the rest are demoted to weak.
SemiSplit split_semi(const Dataset& dataset, double strong_fraction, std::uint64_t seed);

/// FNV-1a 64-bit digest, hex encoded; used for spec and config hashes in manifests.
std::string stable_hash(const std::string& text);

}  // namespace emdet
