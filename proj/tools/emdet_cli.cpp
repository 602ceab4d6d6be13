// emdet: generate synthetic benchmarks, train, detect, evaluate, sweep, and check the
// fast E-step against the brute-force reference.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "emdet/dataset.hpp"
#include "emdet/em.hpp"
#include "emdet/error.hpp"
#include "emdet/eval.hpp"
#include "emdet/experiment.hpp"
#include "emdet/oracle.hpp"

namespace fs = std::filesystem;
using namespace emdet;

namespace {

nlohmann::json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw InputError(path.string() + ": " + e.what());
  }
}

std::ofstream open_output(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  return out;
}

void write_json(const fs::path& path, const nlohmann::ordered_json& j) {
  auto out = open_output(path);
  out << j.dump(2) << '\n';
}

/// A path from the flag when set, else from the config's `key`.
std::string path_from(const std::string& flag, const nlohmann::json& config, const char* key) {
  if (!flag.empty()) return flag;
  if (config.contains(key)) {
    if (!config[key].is_string()) throw InputError(std::string("config key '") + key + "' must be a string");
    return config[key].get<std::string>();
  }
  return {};
}

std::string require(const std::string& value, const char* what) {
  if (value.empty()) throw InputError(std::string("missing ") + what);
  return value;
}

// Flags that override EmConfig keys.
struct Overrides {
  std::string mode;
  std::optional<int> k;
  std::optional<int> em_iterations;
  std::optional<int> steps;
  std::optional<std::uint64_t> seed;
  std::string m_step;
  bool verbose = false;

  void attach(CLI::App& app) {
    app.add_option("--mode", mode, "latent mode: exact | hard | k_em");
    app.add_option("--k", k, "K for k_em");
    app.add_option("--em-iterations", em_iterations, "EM rounds");
    app.add_option("--steps", steps, "SGD steps per M-step");
    app.add_option("--seed", seed, "training / split seed");
    app.add_option("--m-step", m_step, "sgd | full_batch");
    app.add_flag("-v,--verbose", verbose, "progress on stderr");
  }

  EmConfig apply(nlohmann::json config) const {
    if (!mode.empty()) config["mode"] = mode;
    if (k) config["K"] = *k;
    if (em_iterations) config["em_iterations"] = *em_iterations;
    if (steps) config["sgd_steps_per_m_step"] = *steps;
    if (seed) config["seed"] = *seed;
    if (!m_step.empty()) config["m_step"] = m_step;
    if (verbose) config["verbose"] = true;
    return EmConfig::from_json(config);
  }
};

struct ScoreSource {
  std::string ckpt;
  std::string init_scores;

  void attach(CLI::App& app) {
    auto* c = app.add_option("--ckpt", ckpt, "scorer checkpoint");
    auto* s = app.add_option("--init-scores", init_scores, "score with init scores instead of a checkpoint");
    c->excludes(s);
  }

  ScoreTables tables(const Dataset& data) const {
    if (!ckpt.empty()) return scorer_tables(data, load_checkpoint(ckpt));
    if (!init_scores.empty()) return init_score_tables(data, load_init_scores(init_scores));
    throw InputError("one of --ckpt or --init-scores is required");
  }
};

int run_gen(const std::string& spec_path, const std::string& out_train, const std::string& out_test,
            const std::string& init_spec_path, const std::string& init_train, const std::string& init_test,
            double strong_fraction) {
  const GeneratorSpec spec = spec_path.empty() ? GeneratorSpec{} : GeneratorSpec::from_json(read_json_file(spec_path));
  const auto bench = generate(spec);
  const auto split = split_semi(bench.train, strong_fraction, spec.seed);
  save_dataset(out_train, split.dataset);
  save_dataset(out_test, bench.test);

  nlohmann::ordered_json manifest;
  manifest["seed"] = spec.seed;
  manifest["spec"] = spec.to_json();
  manifest["spec_hash"] = stable_hash(spec.to_json().dump());
  manifest["train"] = {{"path", out_train},
                       {"images", bench.train.size()},
                       {"hash", stable_hash(to_jsonl(split.dataset))},
                       {"split", split.manifest(strong_fraction, spec.seed)}};
  manifest["test"] = {{"path", out_test}, {"images", bench.test.size()}, {"hash", stable_hash(to_jsonl(bench.test))}};
  if (!init_train.empty() || !init_test.empty()) {
    InitScoreSpec is = init_spec_path.empty() ? InitScoreSpec{} : InitScoreSpec::from_json(read_json_file(init_spec_path));
    manifest["init_scores"]["spec"] = is.to_json();
    if (!init_train.empty()) {
      save_init_scores(init_train, bench.train, simulate_init_scores(bench.train, spec.foreground_categories, is));
      manifest["init_scores"]["train"] = {{"path", init_train}, {"seed", is.seed}};
    }
    if (!init_test.empty()) {
      is.seed += 1;
      save_init_scores(init_test, bench.test, simulate_init_scores(bench.test, spec.foreground_categories, is));
      manifest["init_scores"]["test"] = {{"path", init_test}, {"seed", is.seed}};
    }
  }
  write_json(fs::path(out_train).string() + ".manifest.json", manifest);
  std::cout << "wrote " << bench.train.size() << " train / " << bench.test.size() << " test images\n";
  return 0;
}

int run_train(const std::string& config_path, std::string data, std::string init_scores, std::string init_ckpt,
              std::string out, std::string trace, const Overrides& overrides) {
  const nlohmann::json file = config_path.empty() ? nlohmann::json::object() : read_json_file(config_path);
  data = require(path_from(data, file, "data"), "--data");
  out = require(path_from(out, file, "out"), "--out");
  trace = path_from(trace, file, "trace");
  init_scores = path_from(init_scores, file, "init_scores");
  init_ckpt = path_from(init_ckpt, file, "init_ckpt");
  if (!init_scores.empty() && !init_ckpt.empty()) throw InputError("give at most one of --init-scores and --init-ckpt");
  const EmConfig config = overrides.apply(file);

  const auto ds = load_dataset(data);
  EmInit init = ScorerParams(ds.category_count(), ds.feature_dim());
  if (!init_ckpt.empty()) init = load_checkpoint(init_ckpt);
  if (!init_scores.empty()) init = load_init_scores(init_scores);

  const auto result = run_em(ds, init, config);
  nlohmann::json meta;
  meta["config"] = config.to_json();
  meta["config_hash"] = stable_hash(config.to_json().dump());
  meta["seed"] = config.seed;
  meta["data_hash"] = stable_hash(to_jsonl(ds));
  meta["init"] = !init_ckpt.empty() ? "checkpoint" : !init_scores.empty() ? "init_scores" : "zero";
  save_checkpoint(out, result.params, meta);
  if (!trace.empty()) {
    auto os = open_output(trace);
    write_trace_csv(os, result.trace);
  }
  std::cout << "final objective " << result.trace.back().objective.total << '\n';
  return 0;
}

int run_eval(const std::string& data, const ScoreSource& source, const std::string& out, const std::string& corloc_data,
             const std::string& corloc_init_scores, double threshold, double nms_threshold) {
  const auto test = load_dataset(data);
  const auto tables = source.tables(test);
  const int categories = static_cast<int>(tables.empty() ? test.category_count() : tables.front().cols());
  auto report = evaluate(test, tables, categories, threshold, nms_threshold);
  if (!corloc_data.empty()) {
    const auto train = load_dataset(corloc_data);
    ScoreTables train_tables;
    if (!source.ckpt.empty()) {
      train_tables = scorer_tables(train, load_checkpoint(source.ckpt));
    } else {
      train_tables = init_score_tables(train, load_init_scores(require(corloc_init_scores, "--corloc-init-scores")));
    }
    add_corloc(report, train, train_tables, categories);
  }
  const auto j = report.to_json();
  if (out.empty()) {
    std::cout << j.dump(2) << '\n';
  } else {
    write_json(out, j);
    std::cout << "mAP " << j["mAP"].dump() << '\n';
  }
  return 0;
}

int run_detect(const std::string& data, const ScoreSource& source, const std::string& out, double threshold,
               double nms_threshold) {
  const auto ds = load_dataset(data);
  const auto dets = detect(ds, source.tables(ds), threshold, nms_threshold);
  auto os = open_output(require(out, "--out"));
  os << detections_to_jsonl(dets);
  std::cout << dets.size() << " detections\n";
  return 0;
}

int run_sweep_cmd(const std::string& config_path, std::string data, std::string test_data, std::string init_scores,
                  const std::string& fractions, const std::string& out, std::string manifest_path,
                  const std::string& test_init_scores, bool ablation, const Overrides& overrides) {
  const nlohmann::json file = config_path.empty() ? nlohmann::json::object() : read_json_file(config_path);
  data = require(path_from(data, file, "data"), "--data");
  test_data = require(path_from(test_data, file, "test_data"), "--test");
  init_scores = path_from(init_scores, file, "init_scores");
  const EmConfig config = overrides.apply(file);
  const auto fr = parse_fractions(fractions);

  const auto train = load_dataset(data);
  const auto test = load_dataset(test_data);
  std::optional<InitScores> init;
  if (!init_scores.empty()) init = load_init_scores(init_scores);

  auto sweep = run_sweep(train, test, fr, config, init ? &*init : nullptr);
  {
    auto os = open_output(out);
    write_sweep_csv(os, sweep.rows);
  }
  if (ablation) {
    const auto weak = split_semi(train, 0.0, config.seed).dataset;
    const int categories = std::max(train.category_count(), test.category_count());
    const EmInit em_init = init ? EmInit(*init) : EmInit(ScorerParams(categories, train.feature_dim()));
    nlohmann::ordered_json ab;
    for (auto mode : {LatentMode::hard, LatentMode::k_em}) {
      EmConfig c = config;
      c.mode = mode;
      const auto report = evaluate_params(test, run_em(weak, em_init, c).params, &train);
      ab[std::string(to_string(mode))] = {{"mAP", optional_json(report.map)},
                                          {"mean_corloc", optional_json(report.mean_corloc)},
                                          {"K", c.k}};
    }
    if (init && !test_init_scores.empty()) {
      const auto report = evaluate_init_scores(test, load_init_scores(test_init_scores), categories, &train, &*init);
      ab["init_scores"] = {{"mAP", optional_json(report.map)}, {"mean_corloc", optional_json(report.mean_corloc)}};
    }
    sweep.manifest["ablation"] = std::move(ab);
  }
  if (manifest_path.empty()) manifest_path = out + ".manifest.json";
  sweep.manifest["data_hash"] = stable_hash(to_jsonl(train));
  write_json(manifest_path, sweep.manifest);
  for (const auto& r : sweep.rows) {
    std::cout << "fraction " << r.fraction << " mAP " << optional_json(r.map).dump() << '\n';
  }
  return 0;
}

int run_oracle(const std::string& data, const std::string& ckpt, const std::string& mode, int k,
               std::optional<double> corrupt_overlap) {
  const auto ds = load_dataset(data);
  const auto params = load_checkpoint(ckpt);
  EmConfig config;
  config.mode = parse_latent_mode(mode);
  config.k = k;
  if (corrupt_overlap) config.center_overlap = *corrupt_overlap;
  config.validate();
  const auto report = oracle::compare(ds, params, config);
  std::cout << report.to_json().dump(2) << '\n';
  return report.pass ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"EM training of proposal scorers from image-level and box-level labels"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen", "generate a synthetic benchmark");
  std::string spec, out_train, out_test, init_spec, init_train, init_test;
  gen->add_option("--spec", spec, "generator spec JSON (defaults when omitted)")->check(CLI::ExistingFile);
  gen->add_option("--out-train", out_train, "training set JSONL")->required();
  gen->add_option("--out-test", out_test, "test set JSONL")->required();
  gen->add_option("--init-spec", init_spec, "init-score simulator JSON")->check(CLI::ExistingFile);
  gen->add_option("--out-init-train", init_train, "simulated init scores for the training set");
  gen->add_option("--out-init-test", init_test, "simulated init scores for the test set");
  double strong_fraction = 1.0;
  gen->add_option("--strong-fraction", strong_fraction, "training images keeping box labels; the rest are image-level");

  auto* train = app.add_subcommand("train", "run EM training");
  std::string config, data, init_scores, init_ckpt, out, trace;
  Overrides train_overrides;
  train->add_option("--config", config, "EmConfig JSON with optional path keys")->check(CLI::ExistingFile);
  train->add_option("--data", data, "training set JSONL");
  auto* is_opt = train->add_option("--init-scores", init_scores, "init scores JSONL");
  auto* ic_opt = train->add_option("--init-ckpt", init_ckpt, "initial checkpoint");
  is_opt->excludes(ic_opt);
  train->add_option("--out", out, "output checkpoint");
  train->add_option("--trace", trace, "objective trace CSV");
  train_overrides.attach(*train);

  double threshold = kDefaultScoreThreshold, nms_threshold = kDefaultNmsThreshold;
  auto* eval = app.add_subcommand("eval", "score a dataset and report AP / CorLoc");
  ScoreSource eval_source;
  std::string eval_data, eval_out, corloc, corloc_init;
  eval->add_option("--data", eval_data, "test set JSONL")->required();
  eval_source.attach(*eval);
  eval->add_option("--out", eval_out, "metrics JSON (stdout when omitted)");
  eval->add_option("--corloc", corloc, "training set JSONL for CorLoc");
  eval->add_option("--corloc-init-scores", corloc_init, "init scores of the CorLoc set");
  eval->add_option("--score-threshold", threshold, "minimum class probability");
  eval->add_option("--nms", nms_threshold, "NMS IoU threshold");

  auto* det = app.add_subcommand("detect", "write detections");
  ScoreSource det_source;
  std::string det_data, det_out;
  det->add_option("--data", det_data, "dataset JSONL")->required();
  det_source.attach(*det);
  det->add_option("--out", det_out, "detections JSONL")->required();
  det->add_option("--score-threshold", threshold, "minimum class probability");
  det->add_option("--nms", nms_threshold, "NMS IoU threshold");

  auto* sweep = app.add_subcommand("sweep", "semi-supervised sweep over strong-label fractions");
  std::string sw_config, sw_data, sw_test, sw_init, sw_out, sw_manifest, sw_test_init;
  std::string fractions = "0,0.2,0.4,0.6,0.8,1.0";
  bool ablation = false;
  Overrides sweep_overrides;
  sweep->add_option("--config", sw_config, "EmConfig JSON")->check(CLI::ExistingFile);
  sweep->add_option("--data", sw_data, "fully strong training set JSONL");
  sweep->add_option("--test", sw_test, "test set JSONL");
  sweep->add_option("--init-scores", sw_init, "init scores for the training set");
  sweep->add_option("--fractions", fractions, "comma-separated strong fractions");
  sweep->add_option("--out", sw_out, "CSV rows: fraction, mAP, meanCorLoc, seed")->required();
  sweep->add_option("--manifest", sw_manifest, "run manifest JSON (default <out>.manifest.json)");
  sweep->add_flag("--ablation", ablation, "also train hard and k_em from image labels only");
  sweep->add_option("--test-init-scores", sw_test_init, "init scores for the test set (ablation baseline)");
  sweep_overrides.attach(*sweep);

  auto* orc = app.add_subcommand("oracle", "compare the fast E-step with brute force");
  std::string orc_data, orc_ckpt, orc_mode = "exact";
  int orc_k = 100;
  std::optional<double> corrupt;
  orc->add_option("--data", orc_data, "dataset JSONL")->required();
  orc->add_option("--ckpt", orc_ckpt, "checkpoint")->required();
  orc->add_option("--mode", orc_mode, "exact | hard | k_em");
  orc->add_option("--k", orc_k, "K for k_em");
  orc->add_option("--corrupt-overlap", corrupt)->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*gen) return run_gen(spec, out_train, out_test, init_spec, init_train, init_test, strong_fraction);
    if (*train) return run_train(config, data, init_scores, init_ckpt, out, trace, train_overrides);
    if (*eval) return run_eval(eval_data, eval_source, eval_out, corloc, corloc_init, threshold, nms_threshold);
    if (*det) return run_detect(det_data, det_source, det_out, threshold, nms_threshold);
    if (*sweep) {
      return run_sweep_cmd(sw_config, sw_data, sw_test, sw_init, fractions, sw_out, sw_manifest, sw_test_init,
                           ablation, sweep_overrides);
    }
    if (*orc) return run_oracle(orc_data, orc_ckpt, orc_mode, orc_k, corrupt);
  } catch (const GuardError& e) {
    std::cerr << "guard: " << e.what() << '\n';
    return 3;
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
