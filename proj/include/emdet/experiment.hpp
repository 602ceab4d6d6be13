#pragma once

// Train/evaluate pipelines shared by the command-line tool and the acceptance suite.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "emdet/dataset.hpp"
#include "emdet/em.hpp"
#include "emdet/eval.hpp"

namespace emdet {

/// Test metrics for `params`, plus CorLoc on `corloc_train` when given (needs strong annotations).
MetricsReport evaluate_params(const Dataset& test, const ScorerParams& params,
                              const Dataset* corloc_train = nullptr);

/// The same report for a detector that ranks by init scores alone.
MetricsReport evaluate_init_scores(const Dataset& test, const InitScores& test_scores, int categories,
                                   const Dataset* corloc_train = nullptr,
                                   const InitScores* train_scores = nullptr);

struct SweepRow {
  double fraction = 0.0;
  int strong_images = 0;
  std::optional<double> map;
  std::optional<double> mean_corloc;
  std::uint64_t seed = 0;
};

struct SweepResult {
  std::vector<SweepRow> rows;
  nlohmann::ordered_json manifest;
};

/// Comma-separated strong fractions, each in [0, 1].
std::vector<double> parse_fractions(const std::string& text);

/// For each fraction: split_semi(train, f, config.seed), run_em, evaluate on `test`.
/// Weak images start from `init` when given, else from zero weights. CorLoc is
/// measured against `train`, which must be fully strong.
SweepResult run_sweep(const Dataset& train, const Dataset& test, const std::vector<double>& fractions,
                      const EmConfig& config, const InitScores* init = nullptr);

void write_sweep_csv(std::ostream& out, const std::vector<SweepRow>& rows);

/// Optional metrics as JSON numbers or null.
nlohmann::ordered_json optional_json(const std::optional<double>& value);

}  // namespace emdet
