#include <doctest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "emdet/error.hpp"
#include "emdet/scorer.hpp"
#include "finite_difference.hpp"
#include "random_instances.hpp"

using namespace emdet;

namespace {

std::vector<TrainingSample> random_batch(std::mt19937_64& rng, int size, int c, int d) {
  std::normal_distribution<double> n01(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<TrainingSample> batch;
  for (int s = 0; s < size; ++s) {
    TrainingSample t{Eigen::VectorXd(d), Eigen::VectorXd(c)};
    for (int k = 0; k < d; ++k) t.features(k) = n01(rng);
    for (int k = 0; k < c; ++k) t.target(k) = u(rng);
    t.target /= t.target.sum();
    batch.push_back(std::move(t));
  }
  return batch;
}

}  // namespace

TEST_CASE("log_softmax closed forms") {
  const ScorerParams zero(4, 3);
  const Eigen::VectorXd f = Eigen::VectorXd::LinSpaced(3, -2.0, 5.0);
  const Eigen::VectorXd lp = log_softmax(zero, f);
  for (int c = 0; c < 4; ++c) CHECK(lp(c) == doctest::Approx(std::log(0.25)).epsilon(1e-15));

  ScorerParams equal(3, 2);
  equal.weights.col(2).setConstant(7.5);
  for (int c = 0; c < 3; ++c) CHECK(log_softmax(equal, Eigen::Vector2d(1, 2))(c) == doctest::Approx(std::log(1.0 / 3.0)));

  ScorerParams extreme(2, 1);
  extreme.weights(0, 1) = 1000.0;
  const Eigen::VectorXd e = log_softmax(extreme, Eigen::VectorXd::Zero(1));
  CHECK(std::isfinite(e(0)));
  CHECK(std::abs(e(0)) < 1e-300);
  CHECK(e(1) == doctest::Approx(-1000.0).epsilon(1e-15));

  CHECK_THROWS_AS(log_softmax(zero, Eigen::Vector3d(0, std::nan(""), 0)), InputError);
  CHECK_THROWS_AS(log_softmax(zero, Eigen::Vector2d(0, 0)), InputError);
}

TEST_CASE("log_softmax rows normalize and are shift invariant") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const int c = 2 + trial % 5, d = 1 + trial % 8;
    const ScorerParams p = testing::random_params(rng, c, d, 3.0);
    Eigen::MatrixXd feats = Eigen::MatrixXd::Random(6, d) * 4.0;
    const Eigen::MatrixXd lp = log_softmax_rows(p, feats);
    for (int i = 0; i < 6; ++i) {
      REQUIRE(std::abs(lp.row(i).array().exp().sum() - 1.0) < 1e-12);
      const Eigen::VectorXd single = log_softmax(p, feats.row(i).transpose());
      REQUIRE((single - lp.row(i).transpose()).cwiseAbs().maxCoeff() < 1e-12);
    }
    ScorerParams shifted = p;
    shifted.weights.col(d).array() += 12.25;
    REQUIRE((log_softmax_rows(shifted, feats) - lp).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("weighted_ce_gradient fixed points") {
  SUBCASE("confident correct one-hot prediction saturates") {
    ScorerParams p(3, 2);
    p.weights(1, 2) = 60.0;
    TrainingSample s{Eigen::Vector2d(0.3, -0.2), Eigen::Vector3d(0, 1, 0)};
    const auto r = weighted_ce_gradient(p, std::span(&s, 1), 0.0);
    CHECK(r.loss < 1e-20);
    CHECK(r.gradient.cwiseAbs().maxCoeff() < 1e-20);
  }
  SUBCASE("uniform targets at zero weights") {
    const ScorerParams p(4, 3);
    std::vector<TrainingSample> batch;
    for (int k = 0; k < 5; ++k) batch.push_back({Eigen::VectorXd::Random(3), Eigen::VectorXd::Constant(4, 0.25)});
    const auto r = weighted_ce_gradient(p, batch, 0.3);
    CHECK(r.gradient.cwiseAbs().maxCoeff() < 1e-15);
    CHECK(r.loss == doctest::Approx(5 * std::log(4.0)));
  }
  SUBCASE("invalid soft labels are rejected") {
    const ScorerParams p(3, 2);
    TrainingSample bad{Eigen::Vector2d(0, 0), Eigen::Vector3d(0.5, 0.6, 0)};
    CHECK_THROWS_AS(weighted_ce_gradient(p, std::span(&bad, 1), 0.0), InputError);
    TrainingSample neg{Eigen::Vector2d(0, 0), Eigen::Vector3d(1.5, -0.5, 0)};
    CHECK_THROWS_AS(weighted_ce_gradient(p, std::span(&neg, 1), 0.0), InputError);
  }
}

TEST_CASE("weighted_ce_gradient matches central finite differences") {
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 60; ++trial) {
    const int c = std::uniform_int_distribution<int>(2, 5)(rng);
    const int d = std::uniform_int_distribution<int>(1, 8)(rng);
    const double l2 = trial % 3 == 0 ? 0.0 : 0.1 * (trial % 7);
    const ScorerParams p = testing::random_params(rng, c, d);
    const auto batch = random_batch(rng, 1 + trial % 9, c, d);
    const auto analytic = weighted_ce_gradient(p, batch, l2);
    const auto numeric = testing::central_difference(
        [&](const Eigen::MatrixXd& w) { return weighted_ce_gradient(ScorerParams(w), batch, l2).loss; }, p.weights);
    REQUIRE(testing::relative_error(analytic.gradient, numeric) < 1e-5);
  }
}

TEST_CASE("bias column is excluded from the l2 penalty") {
  ScorerParams p(2, 1);
  p.weights << 1.0, 5.0, -2.0, 7.0;
  const auto r = weighted_ce_gradient(p, {}, 2.0);
  CHECK(r.loss == doctest::Approx(0.5 * 2.0 * (1.0 + 4.0)));
  CHECK(r.gradient(0, 1) == 0.0);
  CHECK(r.gradient(1, 0) == doctest::Approx(-4.0));
}

TEST_CASE("sgd_step recurrences") {
  ScorerParams p(2, 2);
  p.weights << 1, 2, 3, 4, 5, 6;
  Eigen::MatrixXd g(2, 3);
  g << 0.5, -1, 2, 0, 1, -3;

  SUBCASE("plain gradient descent without momentum or decay") {
    auto state = make_optimizer(p, 0.1, 0.0, 0.0);
    ScorerParams q = p;
    sgd_step(q, state, g);
    CHECK((q.weights - (p.weights - 0.1 * g)).cwiseAbs().maxCoeff() < 1e-15);
  }
  SUBCASE("zero gradient is a fixed point") {
    auto state = make_optimizer(p, 0.1, 0.9, 0.0);
    ScorerParams q = p;
    sgd_step(q, state, Eigen::MatrixXd::Zero(2, 3));
    CHECK(q == p);
  }
  SUBCASE("two momentum steps follow the unrolled recurrence") {
    auto state = make_optimizer(p, 0.01, 0.9, 0.002);
    ScorerParams q = p;
    Eigen::MatrixXd g2 = -2.0 * g;
    sgd_step(q, state, g);
    sgd_step(q, state, g2);

    Eigen::MatrixXd decay_mask = Eigen::MatrixXd::Ones(2, 3);
    decay_mask.col(2).setZero();
    const Eigen::MatrixXd w0 = p.weights;
    const Eigen::MatrixXd v1 = -0.01 * (g + 0.002 * decay_mask.cwiseProduct(w0));
    const Eigen::MatrixXd w1 = w0 + v1;
    const Eigen::MatrixXd v2 = 0.9 * v1 - 0.01 * (g2 + 0.002 * decay_mask.cwiseProduct(w1));
    const Eigen::MatrixXd w2 = w1 + v2;
    CHECK((q.weights - w2).cwiseAbs().maxCoeff() < 1e-15);
    CHECK((state.velocity - v2).cwiseAbs().maxCoeff() < 1e-15);
  }
  SUBCASE("shape mismatch") {
    auto state = make_optimizer(p, 0.1, 0.0, 0.0);
    CHECK_THROWS_AS(sgd_step(p, state, Eigen::MatrixXd::Zero(3, 3)), InputError);
  }
}

TEST_CASE("checkpoint json") {
  std::mt19937_64 rng(1);
  const ScorerParams p = testing::random_params(rng, 3, 4);
  const auto j = checkpoint_to_json(p, {{"note", "x"}});
  CHECK(j.at("c") == 3);
  CHECK(j.at("d") == 4);
  CHECK(j.at("weights").size() == 15);
  CHECK(j.at("weights")[5].get<double>() == p.weights(1, 0));
  CHECK(checkpoint_from_json(nlohmann::json::parse(j.dump())) == p);

  auto broken = nlohmann::json::parse(j.dump());
  broken["weights"].erase(0);
  CHECK_THROWS_AS(checkpoint_from_json(broken), InputError);
  broken.erase("weights");
  CHECK_THROWS_WITH_AS(checkpoint_from_json(broken), doctest::Contains("weights"), InputError);
}
