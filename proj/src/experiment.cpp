#include "emdet/experiment.hpp"

#include <chrono>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "emdet/error.hpp"

namespace emdet {

MetricsReport evaluate_params(const Dataset& test, const ScorerParams& params, const Dataset* corloc_train) {
  auto report = evaluate(test, scorer_tables(test, params), params.categories());
  if (corloc_train) add_corloc(report, *corloc_train, scorer_tables(*corloc_train, params), params.categories());
  return report;
}

MetricsReport evaluate_init_scores(const Dataset& test, const InitScores& test_scores, int categories,
                                   const Dataset* corloc_train, const InitScores* train_scores) {
  auto report = evaluate(test, init_score_tables(test, test_scores), categories);
  if (corloc_train) {
    if (!train_scores) throw InputError("CorLoc of the init detector needs init scores for the training set");
    add_corloc(report, *corloc_train, init_score_tables(*corloc_train, *train_scores), categories);
  }
  return report;
}

std::vector<double> parse_fractions(const std::string& text) {
  std::vector<double> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    std::size_t used = 0;
    double f = 0.0;
    try {
      f = std::stod(item, &used);
    } catch (const std::exception&) {
      throw InputError("bad fraction '" + item + "'");
    }
    if (item.find_first_not_of(" \t", used) != std::string::npos) throw InputError("bad fraction '" + item + "'");
    if (!(f >= 0.0 && f <= 1.0)) throw InputError("fraction " + item + " outside [0, 1]");
    out.push_back(f);
  }
  if (out.empty()) throw InputError("no fractions given");
  return out;
}

SweepResult run_sweep(const Dataset& train, const Dataset& test, const std::vector<double>& fractions,
                      const EmConfig& config, const InitScores* init) {
  if (train.weak_count() != 0) throw InputError("sweep needs a fully strongly annotated training set");
  SweepResult out;
  out.manifest["config"] = config.to_json();
  out.manifest["config_hash"] = stable_hash(config.to_json().dump());
  out.manifest["init"] = init ? "init_scores" : "zero";
  nlohmann::ordered_json runs = nlohmann::ordered_json::array();
  for (double f : fractions) {
    const auto start = std::chrono::steady_clock::now();
    const auto split = split_semi(train, f, config.seed);
    const int categories = std::max(train.category_count(), test.category_count());
    const EmInit em_init = init ? EmInit(*init) : EmInit(ScorerParams(categories, train.feature_dim()));
    const auto result = run_em(split.dataset, em_init, config);
    const auto report = evaluate_params(test, result.params, &train);
    SweepRow row{f, split.strong_images, report.map, report.mean_corloc, config.seed};
    out.rows.push_back(row);

    nlohmann::ordered_json r;
    r["fraction"] = f;
    r["split"] = split.manifest(f, config.seed);
    r["metrics"] = report.to_json();
    r["final_objective"] = result.trace.back().objective.total;
    r["seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    runs.push_back(std::move(r));
  }
  out.manifest["runs"] = std::move(runs);
  return out;
}

void write_sweep_csv(std::ostream& out, const std::vector<SweepRow>& rows) {
  out << "fraction,mAP,meanCorLoc,seed\n";
  out << std::setprecision(10);
  for (const auto& r : rows) {
    out << r.fraction << ',';
    if (r.map) out << *r.map;
    out << ',';
    if (r.mean_corloc) out << *r.mean_corloc;
    out << ',' << r.seed << '\n';
  }
}

nlohmann::ordered_json optional_json(const std::optional<double>& value) {
  return value ? nlohmann::ordered_json(*value) : nlohmann::ordered_json();
}

}  // namespace emdet
