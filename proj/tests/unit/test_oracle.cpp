#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "emdet/em.hpp"
#include "emdet/error.hpp"
#include "emdet/oracle.hpp"
#include "random_instances.hpp"

using namespace emdet;

TEST_CASE("brute posterior on a uniform scorer") {
  ImageRecord im;
  im.id = "u";
  im.width = 60;
  im.height = 10;
  for (int i = 0; i < 4; ++i) im.proposals.emplace_back(12.0 * i, 0, 12.0 * i + 5, 5);
  im.features = Eigen::MatrixXd::Zero(4, 2);
  im.annotation = WeakAnnotation{ImageLabel({1, 2})};
  const auto post = oracle::brute_posterior(im, ScorerParams(3, 2));
  CHECK(post.weights.size() == 12);
  for (double w : post.weights) CHECK(w == doctest::Approx(1.0 / 12).epsilon(1e-15));
  CHECK(oracle::brute_marginal_likelihood(im, ScorerParams(3, 2)) ==
        doctest::Approx(std::log(12.0) + 4 * std::log(1.0 / 3)).epsilon(1e-14));
}

TEST_CASE("brute likelihood does not depend on proposal order") {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 40; ++trial) {
    const auto shape = testing::random_shape(rng);
    auto im = testing::random_weak_image(rng, shape, "x");
    const auto p = testing::random_params(rng, shape.categories, shape.feature_dim);
    const double base = oracle::brute_marginal_likelihood(im, p);
    std::vector<int> perm(im.proposals.size());
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    ImageRecord shuffled = im;
    for (std::size_t i = 0; i < perm.size(); ++i) {
      shuffled.proposals[i] = im.proposals[perm[i]];
      shuffled.features.row(static_cast<Eigen::Index>(i)) = im.features.row(perm[i]);
    }
    CHECK(oracle::brute_marginal_likelihood(shuffled, p) == doctest::Approx(base).epsilon(1e-12));
  }
}

TEST_CASE("fast path agrees with the reference") {
  std::mt19937_64 rng(22);
  Dataset ds;
  for (int n = 0; n < 12; ++n) ds.images.push_back(testing::random_weak_image(rng, {7, 1 + n % 2, 4, 3}, "i" + std::to_string(n)));
  const auto p = testing::random_params(rng, 4, 3);
  EmConfig cfg;
  for (auto mode : {LatentMode::exact, LatentMode::hard}) {
    cfg.mode = mode;
    const auto r = oracle::compare(ds, p, cfg);
    CHECK(r.pass);
    CHECK(r.images == 12);
  }
  cfg.mode = LatentMode::k_em;
  cfg.k = 100;
  auto r = oracle::compare(ds, p, cfg);
  CHECK(r.pass);
  CHECK(r.vacuous_images == 12);
  cfg.k = 4;
  r = oracle::compare(ds, p, cfg);
  CHECK(r.pass);
  CHECK(r.truncated_images > 0);
  CHECK(r.to_json()["pass"] == true);

  SUBCASE("a wrong expansion rule is caught") {
    cfg.mode = LatentMode::exact;
    cfg.center_overlap = 0.3;
    CHECK(!oracle::compare(ds, p, cfg).pass);
  }
  SUBCASE("guard") {
    Dataset big;
    big.images.push_back(testing::random_weak_image(rng, {320, 2, 3, 3}, "big"));
    CHECK_THROWS_AS(oracle::compare(big, ScorerParams(3, 3), cfg), GuardError);
  }
}

TEST_CASE("restricted posterior renormalizes over the subset") {
  std::mt19937_64 rng(23);
  const auto im = testing::random_weak_image(rng, {6, 2, 3, 3}, "x");
  const auto p = testing::random_params(rng, 3, 3);
  const auto exact = oracle::brute_posterior(im, p);
  LatentConfigSet subset{LatentMode::k_em, im.image_label(),
                         {exact.configs.configs[0], exact.configs.configs[3]}};
  const auto w = oracle::restrict_posterior(exact, subset);
  const double z = exact.weights[0] + exact.weights[3];
  CHECK(w[0] == doctest::Approx(exact.weights[0] / z));
  CHECK(w[1] == doctest::Approx(exact.weights[3] / z));
  const auto best = oracle::argmax_config(exact);
  CHECK(exact.weights[best] == *std::max_element(exact.weights.begin(), exact.weights.end()));
}
