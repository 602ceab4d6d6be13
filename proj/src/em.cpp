#include "emdet/em.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>

#include "emdet/error.hpp"

namespace emdet {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

void check_guard(const ImageRecord& image, std::uint64_t guard) {
  const std::uint64_t bound = latent_space_bound(image.proposal_count(), image.image_label().size());
  if (bound > guard) {
    std::ostringstream os;
    os << "image " << image.id << ": exact latent space B^M = " << image.proposal_count() << '^'
       << image.image_label().size() << " exceeds the enumeration guard " << guard
       << "; use the hard or k_em mode";
    throw GuardError(os.str());
  }
}

const WeakAnnotation& weak_of(const ImageRecord& image) {
  if (const auto* w = std::get_if<WeakAnnotation>(&image.annotation)) return *w;
  throw InputError("e_step: image " + image.id + " is strongly annotated and needs no estimation");
}

PosteriorTable from_log_weights(const std::string& id, LatentConfigSet set, const std::vector<double>& log_w) {
  PosteriorTable post{id, std::move(set), normalize_log_weights(log_w)};
  return post;
}

}  // namespace

EmConfig EmConfig::large_scale_schedule() {
  EmConfig c;
  c.sgd_steps_per_m_step = 40000;
  c.lr = {0.001, 30000, 0.0001};
  return c;
}

EmConfig EmConfig::from_json(const nlohmann::json& j, EmConfig c) {
  if (!j.is_object()) throw InputError("EM config must be a JSON object");
  static const std::set<std::string> known = {
      "mode", "K", "em_iterations", "sgd_steps_per_m_step", "lr_initial", "lr_drop_step", "lr_dropped",
      "momentum", "weight_decay", "l2", "fg_per_image", "bg_per_image", "seed", "center_overlap", "m_step", "full_batch_steps",
      "full_batch_step_size", "full_batch_max_halvings", "trace_objective", "objective_guard", "verbose",
      // paths consumed by the command-line front end
      "data", "test_data", "init_scores", "init_ckpt", "out", "trace"};
  for (const auto& [k, v] : j.items()) {
    if (!known.count(k)) throw InputError("unknown EM config key \"" + k + "\"");
  }
  auto get = [&](const char* key, auto& dst) {
    if (j.contains(key)) dst = j.at(key).get<std::decay_t<decltype(dst)>>();
  };
  try {
    if (j.contains("mode")) c.mode = parse_latent_mode(j.at("mode").get<std::string>());
    get("K", c.k);
    get("em_iterations", c.em_iterations);
    get("sgd_steps_per_m_step", c.sgd_steps_per_m_step);
    get("lr_initial", c.lr.initial);
    get("lr_drop_step", c.lr.drop_step);
    get("lr_dropped", c.lr.dropped);
    get("momentum", c.momentum);
    get("weight_decay", c.weight_decay);
    get("l2", c.l2);
    get("fg_per_image", c.fg_per_image);
    get("bg_per_image", c.bg_per_image);
    get("seed", c.seed);
    get("center_overlap", c.center_overlap);
    if (j.contains("m_step")) {
      const auto kind = j.at("m_step").get<std::string>();
      if (kind == "sgd") {
        c.m_step = MStepKind::sgd;
      } else if (kind == "full_batch") {
        c.m_step = MStepKind::full_batch;
      } else {
        throw InputError("m_step must be \"sgd\" or \"full_batch\"");
      }
    }
    get("full_batch_steps", c.full_batch_steps);
    get("full_batch_step_size", c.full_batch_step_size);
    get("full_batch_max_halvings", c.full_batch_max_halvings);
    get("trace_objective", c.trace_objective);
    get("objective_guard", c.objective_guard);
    get("verbose", c.verbose);
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("EM config: ") + e.what());
  }
  c.validate();
  return c;
}

nlohmann::ordered_json EmConfig::to_json() const {
  nlohmann::ordered_json j;
  j["mode"] = std::string(to_string(mode));
  j["K"] = k;
  j["em_iterations"] = em_iterations;
  j["sgd_steps_per_m_step"] = sgd_steps_per_m_step;
  j["lr_initial"] = lr.initial;
  j["lr_drop_step"] = lr.drop_step;
  j["lr_dropped"] = lr.dropped;
  j["momentum"] = momentum;
  j["weight_decay"] = weight_decay;
  j["l2"] = l2;
  j["fg_per_image"] = fg_per_image;
  j["bg_per_image"] = bg_per_image;
  j["seed"] = seed;
  j["center_overlap"] = center_overlap;
  j["m_step"] = m_step == MStepKind::sgd ? "sgd" : "full_batch";
  j["full_batch_steps"] = full_batch_steps;
  j["full_batch_step_size"] = full_batch_step_size;
  j["full_batch_max_halvings"] = full_batch_max_halvings;
  j["trace_objective"] = trace_objective;
  j["objective_guard"] = objective_guard;
  return j;
}

void EmConfig::validate() const {
  if (k < 1) throw InputError("K must be a positive integer");
  if (em_iterations < 0) throw InputError("em_iterations must be non-negative");
  if (sgd_steps_per_m_step < 0) throw InputError("sgd_steps_per_m_step must be non-negative");
  if (!(lr.initial > 0.0) || !(lr.dropped > 0.0)) throw InputError("learning rates must be positive");
  if (lr.drop_step < 0) throw InputError("lr_drop_step must be non-negative");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw InputError("momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0) || !(l2 >= 0.0)) throw InputError("weight_decay and l2 must be non-negative");
  if (!(center_overlap > 0.0 && center_overlap <= 1.0)) throw InputError("center_overlap must lie in (0, 1]");
  if (fg_per_image < 1 || bg_per_image < 1) throw InputError("fg_per_image and bg_per_image must be positive");
  if (full_batch_steps < 0 || !(full_batch_step_size > 0.0) || full_batch_max_halvings < 0) {
    throw InputError("invalid full-batch M-step settings");
  }
}

std::vector<LogProbMatrix> dataset_log_probs(const Dataset& dataset, const ScorerParams& params) {
  std::vector<LogProbMatrix> out;
  out.reserve(dataset.size());
  for (const auto& im : dataset.images) out.push_back(log_softmax_rows(params, im.features));
  return out;
}

double log_sum_exp(const std::vector<double>& values) {
  if (values.empty()) return kNegInf;
  const double top = *std::max_element(values.begin(), values.end());
  if (top == kNegInf) return kNegInf;
  double s = 0.0;
  for (double v : values) s += std::exp(v - top);
  return top + std::log(s);
}

std::vector<double> normalize_log_weights(const std::vector<double>& log_weights) {
  const double lse = log_sum_exp(log_weights);
  if (!std::isfinite(lse)) throw InputError("posterior has no configuration with positive weight");
  std::vector<double> w(log_weights.size());
  for (std::size_t k = 0; k < w.size(); ++k) w[k] = std::exp(log_weights[k] - lse);
  return w;
}

double weak_log_marginal(const ImageRecord& image, const LogProbMatrix& log_probs, std::uint64_t guard,
                         double center_overlap) {
  check_guard(image, guard);
  const ProposalNeighborhoods graph(image.proposals, center_overlap);
  const ConfigScorer scorer(graph, log_probs);
  std::vector<double> values;
  values.reserve(exact_config_count(image.proposal_count(), image.image_label().size()));
  for_each_exact_config(image.proposal_count(), image.image_label(),
                        [&](const LatentConfig& c) { values.push_back(scorer(c)); });
  return log_sum_exp(values);
}

SoftLabels strong_labels(const ImageRecord& image, int categories) {
  const auto& objects = image.strong().objects;
  SoftLabels out{image.id, Eigen::MatrixXd::Zero(image.proposal_count(), categories)};
  for (int i = 0; i < image.proposal_count(); ++i) {
    int label = 0;
    double best = -1.0;
    for (const auto& o : objects) {
      const double overlap = iou(image.proposals[i], o.box);
      if (overlap > best) {
        best = overlap;
        label = o.category;
      }
    }
    if (best < kCenterOverlap) label = 0;
    if (label >= categories) throw InputError("object category exceeds the scorer's category count");
    out.q(i, label) = 1.0;
  }
  return out;
}

ObjectiveValue objective(const Dataset& dataset, const ScorerParams& params, double l2, std::uint64_t guard,
                         double center_overlap) {
  for (const auto& im : dataset.images) {
    if (im.is_weak()) check_guard(im, guard);
  }
  ObjectiveValue v;
  for (const auto& im : dataset.images) {
    const LogProbMatrix lp = log_softmax_rows(params, im.features);
    if (im.is_weak()) {
      v.weak_term += weak_log_marginal(im, lp, guard, center_overlap);
    } else {
      const SoftLabels y = strong_labels(im, params.categories());
      v.strong_term += (y.q.array() * lp.array()).sum();
    }
  }
  v.total = v.strong_term + v.weak_term;
  const int d = params.feature_dim();
  v.regularizer = 0.5 * l2 * params.weights.leftCols(d).squaredNorm();
  return v;
}

PosteriorTable e_step(const ImageRecord& image, const LogProbMatrix& log_probs, const EmConfig& config) {
  const ImageLabel& label = weak_of(image).label;
  const ProposalNeighborhoods graph(image.proposals, config.center_overlap);
  const ConfigScorer scorer(graph, log_probs);

  switch (config.mode) {
    case LatentMode::exact: {
      check_guard(image, config.objective_guard);
      LatentConfigSet set = enumerate_exact(image.proposal_count(), label);
      std::vector<double> log_w;
      log_w.reserve(set.size());
      for (const auto& c : set.configs) log_w.push_back(scorer(c));
      return from_log_weights(image.id, std::move(set), log_w);
    }
    case LatentMode::hard: {
      check_guard(image, config.objective_guard);
      // Lexicographic visiting order with a strict comparison keeps the smallest tied config.
      LatentConfig best;
      double best_value = kNegInf;
      bool found = false;
      for_each_exact_config(image.proposal_count(), label, [&](const LatentConfig& c) {
        const double v = scorer(c);
        if (!found || v > best_value) {
          best = c;
          best_value = v;
          found = true;
        }
      });
      return {image.id, {LatentMode::hard, label, {best}}, {1.0}};
    }
    case LatentMode::k_em: {
      if (image.proposal_count() < label.size()) {
        throw InputError("image " + image.id + ": fewer proposals than positive categories");
      }
      LatentConfigSet set = select_k(log_probs, label, config.k);
      std::vector<double> log_w;
      log_w.reserve(set.size());
      for (const auto& c : set.configs) log_w.push_back(scorer(c));
      return from_log_weights(image.id, std::move(set), log_w);
    }
  }
  throw InputError("unknown latent mode");
}

PosteriorTable e_step(const ImageRecord& image, const ScorerParams& params, const EmConfig& config) {
  return e_step(image, log_softmax_rows(params, image.features), config);
}

PosteriorTable e_step_from_scores(const ImageRecord& image, const Eigen::MatrixXd& init_scores,
                                  const EmConfig& config) {
  const ImageLabel& label = weak_of(image).label;
  if (init_scores.rows() != image.proposal_count()) {
    throw InputError("image " + image.id + ": init score rows do not match the proposal count");
  }
  if (!label.positives().empty() && label.positives().back() > init_scores.cols()) {
    throw InputError("image " + image.id + ": init scores do not cover every positive category");
  }
  // Column c of `ranked` holds category c; column 0 (background) is unused.
  Eigen::MatrixXd ranked = Eigen::MatrixXd::Zero(init_scores.rows(), init_scores.cols() + 1);
  ranked.rightCols(init_scores.cols()) = init_scores;
  const Eigen::MatrixXd log_scores = ranked.array().log().matrix();
  auto weight = [&](const LatentConfig& c) {
    double s = 0.0;
    for (const Center& ctr : c.centers) s += log_scores(ctr.proposal, ctr.category);
    return s;
  };

  LatentConfigSet set;
  switch (config.mode) {
    case LatentMode::exact:
      check_guard(image, config.objective_guard);
      set = enumerate_exact(image.proposal_count(), label);
      break;
    case LatentMode::hard: {
      check_guard(image, config.objective_guard);
      LatentConfig best;
      double best_value = kNegInf;
      bool found = false;
      for_each_exact_config(image.proposal_count(), label, [&](const LatentConfig& c) {
        const double v = weight(c);
        if (!found || v > best_value) {
          best = c;
          best_value = v;
          found = true;
        }
      });
      if (best_value == kNegInf) throw InputError("image " + image.id + ": all init scores are zero");
      return {image.id, {LatentMode::hard, label, {best}}, {1.0}};
    }
    case LatentMode::k_em:
      set = select_k(ranked, label, config.k);
      if (set.configs.empty()) throw InputError("image " + image.id + ": fewer proposals than positive categories");
      break;
  }
  std::vector<double> log_w;
  log_w.reserve(set.size());
  for (const auto& c : set.configs) log_w.push_back(weight(c));
  return from_log_weights(image.id, std::move(set), log_w);
}

SoftLabels soft_labels(const PosteriorTable& posterior, std::span<const Box> proposals, int categories,
                       double center_overlap) {
  if (posterior.weights.size() != posterior.configs.size()) {
    throw InputError("posterior weights are not aligned with its configurations");
  }
  const int n = static_cast<int>(proposals.size());
  const ProposalNeighborhoods graph(proposals, center_overlap);
  SoftLabels out{posterior.image_id, Eigen::MatrixXd::Zero(n, categories)};
  for (std::size_t k = 0; k < posterior.configs.size(); ++k) {
    const double w = posterior.weights[k];
    if (w == 0.0) continue;
    const ProposalLabeling y = expand(posterior.configs.configs[k], graph);
    for (int i = 0; i < n; ++i) {
      if (y.labels[i] >= categories) throw InputError("labeling category exceeds the category count");
      out.q(i, y.labels[i]) += w;
    }
  }
  return out;
}

std::vector<SoftLabels> dataset_soft_labels(const Dataset& dataset, const std::vector<PosteriorTable>& posteriors,
                                            int categories, double center_overlap) {
  std::vector<SoftLabels> out;
  out.reserve(dataset.size());
  std::size_t next = 0;
  for (const auto& im : dataset.images) {
    if (im.is_weak()) {
      if (next >= posteriors.size() || posteriors[next].image_id != im.id) {
        throw InputError("posterior tables are not aligned with the weak images");
      }
      out.push_back(soft_labels(posteriors[next++], im.proposals, categories, center_overlap));
    } else {
      out.push_back(strong_labels(im, categories));
    }
  }
  return out;
}

double expected_log_likelihood(const Dataset& dataset, const std::vector<SoftLabels>& labels,
                               const ScorerParams& params) {
  double total = 0.0;
  for (std::size_t n = 0; n < dataset.size(); ++n) {
    const LogProbMatrix lp = log_softmax_rows(params, dataset.images[n].features);
    total += (labels[n].q.array() * lp.array()).sum();
  }
  return total;
}

GradientResult full_batch_gradient(const Dataset& dataset, const std::vector<SoftLabels>& labels,
                                   const ScorerParams& params, double l2) {
  if (labels.size() != dataset.size()) throw InputError("soft labels do not cover every image");
  const int d = params.feature_dim();
  GradientResult out{Eigen::MatrixXd::Zero(params.categories(), d + 1), 0.0};
  for (std::size_t n = 0; n < dataset.size(); ++n) {
    const auto& im = dataset.images[n];
    const LogProbMatrix lp = log_softmax_rows(params, im.features);
    const Eigen::MatrixXd residual = lp.array().exp().matrix() - labels[n].q;  // B x C
    out.loss -= (labels[n].q.array() * lp.array()).sum();
    out.gradient.leftCols(d).noalias() += residual.transpose() * im.features;
    out.gradient.col(d) += residual.colwise().sum().transpose();
  }
  if (l2 != 0.0) {
    out.loss += 0.5 * l2 * params.weights.leftCols(d).squaredNorm();
    out.gradient.leftCols(d) += l2 * params.weights.leftCols(d);
  }
  return out;
}

TrainerState make_trainer(const ScorerParams& params, const EmConfig& config) {
  return {make_optimizer(params, config.lr.initial, config.momentum, config.weight_decay), 0,
          std::mt19937_64(config.seed)};
}

namespace {

void draw(const std::vector<int>& pool, int count, std::mt19937_64& rng, std::vector<int>& out) {
  if (pool.empty()) return;
  if (static_cast<int>(pool.size()) >= count) {
    std::vector<int> scratch = pool;
    for (int k = 0; k < count; ++k) {
      std::uniform_int_distribution<std::size_t> pick(k, scratch.size() - 1);
      std::swap(scratch[k], scratch[pick(rng)]);
      out.push_back(scratch[k]);
    }
  } else {
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    for (int k = 0; k < count; ++k) out.push_back(pool[pick(rng)]);
  }
}

}  // namespace

std::vector<TrainingSample> sample_minibatch(const ImageRecord& image, const SoftLabels& labels,
                                             const EmConfig& config, std::mt19937_64& rng,
                                             bool* missing_foreground) {
  std::vector<int> fg, bg;
  for (int i = 0; i < image.proposal_count(); ++i) {
    Eigen::Index top = 0;
    labels.q.row(i).maxCoeff(&top);
    (top == 0 ? bg : fg).push_back(i);
  }
  if (missing_foreground) *missing_foreground = fg.empty();
  std::vector<int> picked;
  picked.reserve(config.fg_per_image + config.bg_per_image);
  draw(fg, config.fg_per_image, rng, picked);
  draw(bg, config.bg_per_image, rng, picked);

  std::vector<TrainingSample> batch;
  batch.reserve(picked.size());
  for (int i : picked) batch.push_back({image.features.row(i).transpose(), labels.q.row(i).transpose()});
  return batch;
}

ScorerParams m_step(const Dataset& dataset, const std::vector<SoftLabels>& labels, ScorerParams params,
                    TrainerState& state, const EmConfig& config) {
  if (labels.size() != dataset.size()) throw InputError("soft labels do not cover every image");
  if (config.sgd_steps_per_m_step == 0 || dataset.empty()) return params;

  std::vector<ImageRecord> twins;
  twins.reserve(dataset.size());
  for (const auto& im : dataset.images) twins.push_back(flipped(im));

  std::uniform_int_distribution<std::size_t> pick_image(0, dataset.size() - 1);
  std::set<std::size_t> without_fg;
  for (int step = 0; step < config.sgd_steps_per_m_step; ++step) {
    const std::size_t n = pick_image(state.rng);
    bool missing = false;
    std::vector<TrainingSample> batch = sample_minibatch(dataset.images[n], labels[n], config, state.rng, &missing);
    std::vector<TrainingSample> twin = sample_minibatch(twins[n], labels[n], config, state.rng);
    batch.insert(batch.end(), std::make_move_iterator(twin.begin()), std::make_move_iterator(twin.end()));
    if (missing) without_fg.insert(n);

    GradientResult g = weighted_ce_gradient(params, batch, config.l2);
    g.gradient /= static_cast<double>(batch.size());
    state.optimizer.learning_rate = config.lr.at(state.global_step);
    sgd_step(params, state.optimizer, g.gradient);
    ++state.global_step;
  }
  if (config.verbose && !without_fg.empty()) {
    std::clog << "m_step: " << without_fg.size()
              << " sampled image(s) had no foreground-eligible proposal; background samples only\n";
  }
  return params;
}

ScorerParams m_step_full_batch(const Dataset& dataset, const std::vector<SoftLabels>& labels,
                               ScorerParams params, const EmConfig& config) {
  double count = 0.0;
  for (const auto& im : dataset.images) count += im.proposal_count();
  if (count == 0.0) return params;

  GradientResult current = full_batch_gradient(dataset, labels, params, config.l2);
  for (int step = 0; step < config.full_batch_steps; ++step) {
    double eta = config.full_batch_step_size / count;
    bool accepted = false;
    for (int h = 0; h <= config.full_batch_max_halvings; ++h, eta *= 0.5) {
      ScorerParams trial(params.weights - eta * current.gradient);
      GradientResult next = full_batch_gradient(dataset, labels, trial, config.l2);
      if (next.loss < current.loss) {
        params = std::move(trial);
        current = std::move(next);
        accepted = true;
        break;
      }
    }
    if (!accepted) break;
  }
  return params;
}

EmResult run_em(const Dataset& dataset, const EmInit& init, const EmConfig& config) {
  config.validate();
  if (dataset.empty()) throw InputError("run_em: empty dataset");
  for (const auto& im : dataset.images) validate(im);

  const InitScores* init_scores = std::get_if<InitScores>(&init);
  ScorerParams params;
  if (const auto* p = std::get_if<ScorerParams>(&init)) {
    params = *p;
  } else {
    int categories = dataset.category_count();
    for (const auto& [id, m] : init_scores->by_image) categories = std::max(categories, static_cast<int>(m.cols()) + 1);
    params = ScorerParams(categories, dataset.feature_dim());
  }
  if (params.feature_dim() != dataset.feature_dim()) {
    std::ostringstream os;
    os << "scorer feature dimension " << params.feature_dim() << " does not match dataset dimension "
       << dataset.feature_dim();
    throw InputError(os.str());
  }
  if (params.categories() < dataset.category_count()) throw InputError("dataset uses more categories than the scorer");

  const int categories = params.categories();
  auto traced = [&]() {
    ObjectiveValue v;
    if (!config.trace_objective) {
      v.total = v.strong_term = v.weak_term = std::numeric_limits<double>::quiet_NaN();
      return v;
    }
    try {
      return objective(dataset, params, config.l2, config.objective_guard, config.center_overlap);
    } catch (const GuardError& e) {
      if (config.verbose) std::clog << "objective not traced: " << e.what() << '\n';
      v.total = v.strong_term = v.weak_term = std::numeric_limits<double>::quiet_NaN();
      return v;
    }
  };

  EmResult result;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  result.trace.push_back({0, traced(), nan, nan});
  TrainerState trainer = make_trainer(params, config);

  for (int it = 1; it <= config.em_iterations; ++it) {
    std::vector<PosteriorTable> posteriors;
    for (const auto& im : dataset.images) {
      if (!im.is_weak()) continue;
      if (it == 1 && init_scores) {
        posteriors.push_back(e_step_from_scores(im, init_scores->at(im.id), config));
      } else {
        posteriors.push_back(e_step(im, params, config));
      }
    }
    const std::vector<SoftLabels> labels = dataset_soft_labels(dataset, posteriors, categories, config.center_overlap);
    const double before = expected_log_likelihood(dataset, labels, params);
    if (config.m_step == MStepKind::sgd) {
      params = m_step(dataset, labels, std::move(params), trainer, config);
    } else {
      params = m_step_full_batch(dataset, labels, std::move(params), config);
    }
    const double after = expected_log_likelihood(dataset, labels, params);
    result.trace.push_back({it, traced(), before, after});
    if (config.verbose) {
      std::clog << "em iteration " << it << ": J = " << result.trace.back().objective.total << '\n';
    }
  }
  result.params = std::move(params);
  return result;
}

void write_trace_csv(std::ostream& out, const std::vector<EmIterationRecord>& trace) {
  out << "iteration,strong_term,weak_term,total\n";
  out.precision(17);
  for (const auto& r : trace) {
    out << r.iteration << ',' << r.objective.strong_term << ',' << r.objective.weak_term << ','
        << r.objective.total << '\n';
  }
}

}  // namespace emdet
