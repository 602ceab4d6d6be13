#include "emdet/scorer.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "emdet/error.hpp"

namespace emdet {

ScorerParams::ScorerParams(int categories, int feature_dim)
    : weights(Eigen::MatrixXd::Zero(categories, feature_dim + 1)) {
  if (categories < 2 || feature_dim < 1) throw InputError("scorer needs C >= 2 and d >= 1");
}

ScorerParams::ScorerParams(Eigen::MatrixXd w) : weights(std::move(w)) {
  if (weights.rows() < 2 || weights.cols() < 2) throw InputError("scorer needs C >= 2 and d >= 1");
  if (!weights.allFinite()) throw InputError("scorer weights must be finite");
}

OptimizerState make_optimizer(const ScorerParams& params, double learning_rate, double momentum,
                              double weight_decay) {
  if (!(learning_rate > 0.0)) throw InputError("learning rate must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw InputError("momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw InputError("weight decay must be non-negative");
  return {Eigen::MatrixXd::Zero(params.weights.rows(), params.weights.cols()), learning_rate, momentum,
          weight_decay};
}

namespace {

Eigen::VectorXd logits(const ScorerParams& params, const Eigen::Ref<const Eigen::VectorXd>& features) {
  const int d = params.feature_dim();
  return params.weights.leftCols(d) * features + params.weights.col(d);
}

void log_softmax_inplace(Eigen::Ref<Eigen::VectorXd> z) {
  const double top = z.maxCoeff();
  const double lse = top + std::log((z.array() - top).exp().sum());
  z.array() -= lse;
}

}  // namespace

Eigen::VectorXd log_softmax(const ScorerParams& params, const Eigen::Ref<const Eigen::VectorXd>& features) {
  if (features.size() != params.feature_dim()) {
    std::ostringstream os;
    os << "feature length " << features.size() << " does not match scorer dimension " << params.feature_dim();
    throw InputError(os.str());
  }
  if (!features.allFinite()) throw InputError("non-finite feature value");
  Eigen::VectorXd z = logits(params, features);
  log_softmax_inplace(z);
  return z;
}

Eigen::MatrixXd log_softmax_rows(const ScorerParams& params, const Eigen::MatrixXd& features) {
  if (features.cols() != params.feature_dim()) {
    std::ostringstream os;
    os << "feature matrix has " << features.cols() << " columns, scorer expects " << params.feature_dim();
    throw InputError(os.str());
  }
  if (!features.allFinite()) throw InputError("non-finite feature value");
  const int d = params.feature_dim();
  Eigen::MatrixXd z = features * params.weights.leftCols(d).transpose();
  z.rowwise() += params.weights.col(d).transpose();
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    Eigen::VectorXd row = z.row(i).transpose();
    log_softmax_inplace(row);
    z.row(i) = row.transpose();
  }
  return z;
}

GradientResult weighted_ce_gradient(const ScorerParams& params, std::span<const TrainingSample> batch,
                                    double l2) {
  const int c = params.categories();
  const int d = params.feature_dim();
  GradientResult out{Eigen::MatrixXd::Zero(c, d + 1), 0.0};
  Eigen::VectorXd augmented(d + 1);
  for (const auto& s : batch) {
    if (s.target.size() != c) throw InputError("soft label length does not match category count");
    if ((s.target.array() < 0.0).any() || !s.target.allFinite() || std::abs(s.target.sum() - 1.0) > 1e-9) {
      throw InputError("soft label must be a non-negative distribution summing to 1");
    }
    const Eigen::VectorXd lp = log_softmax(params, s.features);
    out.loss -= s.target.dot(lp);
    augmented.head(d) = s.features;
    augmented(d) = 1.0;
    out.gradient.noalias() += (lp.array().exp().matrix() - s.target) * augmented.transpose();
  }
  if (l2 != 0.0) {
    out.loss += 0.5 * l2 * params.weights.leftCols(d).squaredNorm();
    out.gradient.leftCols(d) += l2 * params.weights.leftCols(d);
  }
  return out;
}

void sgd_step(ScorerParams& params, OptimizerState& state, const Eigen::MatrixXd& gradient) {
  if (gradient.rows() != params.weights.rows() || gradient.cols() != params.weights.cols() ||
      state.velocity.rows() != params.weights.rows() || state.velocity.cols() != params.weights.cols()) {
    throw InputError("sgd_step: shape mismatch between weights, velocity and gradient");
  }
  const int d = params.feature_dim();
  Eigen::MatrixXd step = gradient;
  if (state.weight_decay != 0.0) step.leftCols(d) += state.weight_decay * params.weights.leftCols(d);
  state.velocity = state.momentum * state.velocity - state.learning_rate * step;
  params.weights += state.velocity;
}

nlohmann::ordered_json checkpoint_to_json(const ScorerParams& params, const nlohmann::json& meta) {
  nlohmann::ordered_json j;
  j["c"] = params.categories();
  j["d"] = params.feature_dim();
  std::vector<double> flat;
  flat.reserve(params.weights.size());
  for (Eigen::Index r = 0; r < params.weights.rows(); ++r) {
    for (Eigen::Index k = 0; k < params.weights.cols(); ++k) flat.push_back(params.weights(r, k));
  }
  j["weights"] = flat;
  j["meta"] = meta;
  return j;
}

ScorerParams checkpoint_from_json(const nlohmann::json& j) {
  for (const char* key : {"c", "d", "weights"}) {
    if (!j.contains(key)) throw InputError(std::string("checkpoint is missing field \"") + key + "\"");
  }
  const int c = j.at("c").get<int>();
  const int d = j.at("d").get<int>();
  const auto flat = j.at("weights").get<std::vector<double>>();
  if (c < 2 || d < 1) throw InputError("checkpoint has invalid shape");
  if (flat.size() != static_cast<std::size_t>(c) * static_cast<std::size_t>(d + 1)) {
    std::ostringstream os;
    os << "checkpoint weights length " << flat.size() << " != c*(d+1) = " << c * (d + 1);
    throw InputError(os.str());
  }
  Eigen::MatrixXd w(c, d + 1);
  for (int r = 0; r < c; ++r) {
    for (int k = 0; k <= d; ++k) w(r, k) = flat[static_cast<std::size_t>(r) * (d + 1) + k];
  }
  return ScorerParams(std::move(w));
}

void save_checkpoint(const std::filesystem::path& path, const ScorerParams& params, const nlohmann::json& meta) {
  const auto j = checkpoint_to_json(params, meta);
  std::ofstream out(path);
  if (!out) throw InputError("cannot write checkpoint " + path.string());
  out << j.dump() << '\n';
}

ScorerParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open checkpoint " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw InputError("malformed checkpoint " + path.string() + ": " + e.what());
  }
  try {
    return checkpoint_from_json(j);
  } catch (const nlohmann::json::exception& e) {
    throw InputError("malformed checkpoint " + path.string() + ": " + e.what());
  }
}

}  // namespace emdet
