#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "emdet/dataset.hpp"
#include "emdet/geometry.hpp"
#include "emdet/scorer.hpp"

namespace emdet {

inline constexpr double kDefaultScoreThreshold = 0.01;
inline constexpr double kDefaultNmsThreshold = 0.4;
inline constexpr double kMatchOverlap = 0.5;

struct Detection {
  std::string image_id;
  int category;
  Box box;
  double score;
  int proposal = 0;  ///< index within its image; secondary sort key
};

/// Per-image B x C probability tables (column 0 background) that drive detection.
using ScoreTables = std::vector<Eigen::MatrixXd>;

ScoreTables scorer_tables(const Dataset& dataset, const ScorerParams& params);
/// Init scores laid out as probability tables with a zero background column.
ScoreTables init_score_tables(const Dataset& dataset, const InitScores& scores);

/// Per image and foreground category: keep proposals scoring at least the threshold, then NMS.
std::vector<Detection> detect(const Dataset& dataset, const ScoreTables& tables,
                              double score_threshold = kDefaultScoreThreshold,
                              double nms_threshold = kDefaultNmsThreshold);
std::vector<Detection> detect(const Dataset& dataset, const ScorerParams& params,
                              double score_threshold = kDefaultScoreThreshold,
                              double nms_threshold = kDefaultNmsThreshold);

struct ApResult {
  double ap = 0.0;
  int true_positives = 0;
  int false_positives = 0;
  int ground_truth = 0;
  /// Per detection in ranked order; -1 for false positives, else the matched GT index
  /// (flattened over images in `gt` order).
  std::vector<int> matches;
};

/// Ground-truth boxes of one category, keyed by image id.
using GroundTruthIndex = std::map<std::string, std::vector<Box>>;

/// VOC 11-point interpolated AP for one category. Detections are ranked by score
/// (ties: lower image id, then lower proposal index); each takes the unmatched
/// ground truth it overlaps most if that IoU is >= 0.5. nullopt when there is no GT.
std::optional<ApResult> average_precision(std::vector<Detection> dets, const GroundTruthIndex& gt);

std::map<int, GroundTruthIndex> ground_truth_by_category(const Dataset& dataset);

/// Per category: fraction of positive images whose top-scoring proposal hits a GT box.
std::map<int, std::optional<double>> corloc(const Dataset& dataset, const ScoreTables& tables, int categories);
std::map<int, std::optional<double>> corloc(const Dataset& dataset, const ScorerParams& params);

struct CategoryCounts {
  int tp = 0;
  int fp = 0;
  int gt = 0;
};

struct MetricsReport {
  std::map<int, std::optional<double>> ap;
  std::optional<double> map;
  std::map<int, std::optional<double>> corloc;
  std::optional<double> mean_corloc;
  std::map<int, CategoryCounts> counts;

  nlohmann::ordered_json to_json() const;
};

/// mAP over `categories - 1` foreground classes; CorLoc filled when `corloc_data` is given.
MetricsReport evaluate(const Dataset& test, const ScoreTables& test_tables, int categories,
                       double score_threshold = kDefaultScoreThreshold,
                       double nms_threshold = kDefaultNmsThreshold);
void add_corloc(MetricsReport& report, const Dataset& train, const ScoreTables& train_tables, int categories);

std::string detections_to_jsonl(const std::vector<Detection>& dets);

}  // namespace emdet
