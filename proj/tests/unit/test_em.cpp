#include <doctest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "emdet/em.hpp"
#include "emdet/error.hpp"
#include "emdet/oracle.hpp"
#include "finite_difference.hpp"
#include "random_instances.hpp"

using namespace emdet;

namespace {

ImageRecord weak_image(std::vector<Box> boxes, std::vector<int> z, int d = 2) {
  ImageRecord im;
  im.id = "img";
  im.width = 200;
  im.height = 200;
  im.proposals = std::move(boxes);
  im.features = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(im.proposals.size()), d);
  im.annotation = WeakAnnotation{ImageLabel(std::move(z))};
  return im;
}

std::vector<Box> isolated_boxes(int n) {
  std::vector<Box> out;
  for (int i = 0; i < n; ++i) out.emplace_back(10.0 * i, 0, 10.0 * i + 5, 5);
  return out;
}

Dataset small_mixed_dataset(std::mt19937_64& rng, int weak, int strong, int b, int c, int d) {
  Dataset ds;
  for (int n = 0; n < weak; ++n) {
    testing::InstanceShape shape{b, 1 + n % std::min(2, c - 1), c, d};
    ds.images.push_back(testing::random_weak_image(rng, shape, "w" + std::to_string(n)));
  }
  for (int n = 0; n < strong; ++n) {
    auto im = testing::random_weak_image(rng, {b, 1, c, d}, "s" + std::to_string(n));
    im.annotation = StrongAnnotation{{{im.proposals[0], 1 + n % (c - 1)}}};
    ds.images.push_back(std::move(im));
  }
  return ds;
}

}  // namespace

TEST_CASE("objective closed forms") {
  Dataset ds;
  ds.images.push_back(weak_image(isolated_boxes(3), {1}));
  const ScorerParams uniform(2, 2);
  const auto v = objective(ds, uniform);
  CHECK(v.weak_term == doctest::Approx(std::log(3.0) + 3 * std::log(0.5)).epsilon(1e-14));
  CHECK(v.strong_term == 0.0);
  CHECK(v.total == v.weak_term);

  SUBCASE("no weak images") {
    Dataset strong;
    auto im = weak_image(isolated_boxes(3), {1});
    im.annotation = StrongAnnotation{{{Box(0, 0, 5, 5), 1}}};
    strong.images.push_back(im);
    const auto s = objective(strong, uniform);
    CHECK(s.weak_term == 0.0);
    CHECK(s.strong_term == doctest::Approx(3 * std::log(0.5)));
  }
  SUBCASE("guard") {
    Dataset big;
    big.images.push_back(weak_image(isolated_boxes(11), {1, 2}));
    CHECK_THROWS_AS(objective(big, ScorerParams(3, 2), 0.0, 100), GuardError);
  }
  SUBCASE("regularizer is reported separately") {
    ScorerParams p(2, 2);
    p.weights << 1, 2, 9, 0, 0, 9;
    const auto r = objective(ds, p, 0.5);
    CHECK(r.regularizer == doctest::Approx(0.25 * 5));
    CHECK(r.total == r.strong_term + r.weak_term);
  }
}

TEST_CASE("objective weak term equals the brute-force marginal") {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 50; ++trial) {
    const auto shape = testing::random_shape(rng);
    Dataset ds;
    ds.images.push_back(testing::random_weak_image(rng, shape, "x"));
    const auto p = testing::random_params(rng, shape.categories, shape.feature_dim);
    CHECK(std::abs(objective(ds, p).weak_term - oracle::brute_marginal_likelihood(ds.images[0], p)) < 1e-9);
  }
}

TEST_CASE("e_step") {
  EmConfig cfg;
  SUBCASE("uniform scorer, exact mode") {
    cfg.mode = LatentMode::exact;
    const auto post = e_step(weak_image(isolated_boxes(5), {1}), ScorerParams(2, 2), cfg);
    REQUIRE(post.weights.size() == 5);
    for (double w : post.weights) CHECK(w == doctest::Approx(0.2).epsilon(1e-15));
  }
  SUBCASE("hard mode returns select_hard's config with weight one") {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 50; ++trial) {
      const auto shape = testing::random_shape(rng);
      const auto im = testing::random_weak_image(rng, shape, "x");
      const auto p = testing::random_params(rng, shape.categories, shape.feature_dim);
      cfg.mode = LatentMode::hard;
      const auto post = e_step(im, p, cfg);
      const auto lp = log_softmax_rows(p, im.features);
      const auto expected = select_hard(enumerate_exact(im.proposals, im.image_label()), lp, im.proposals);
      REQUIRE(post.configs.size() == 1);
      CHECK(post.weights == std::vector<double>{1.0});
      CHECK(post.configs.configs[0] == expected.configs[0]);
    }
  }
  SUBCASE("k_em with K >= B^M equals exact") {
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 50; ++trial) {
      const auto shape = testing::random_shape(rng);
      const auto im = testing::random_weak_image(rng, shape, "x");
      const auto p = testing::random_params(rng, shape.categories, shape.feature_dim);
      cfg.mode = LatentMode::exact;
      const auto exact = e_step(im, p, cfg);
      cfg.mode = LatentMode::k_em;
      cfg.k = 64;
      const auto kem = e_step(im, p, cfg);
      REQUIRE(kem.configs.configs == exact.configs.configs);
      for (std::size_t k = 0; k < exact.weights.size(); ++k) {
        CHECK(std::abs(kem.weights[k] - exact.weights[k]) <= 1e-9 * exact.weights[k]);
      }
    }
  }
  SUBCASE("errors") {
    auto strong = weak_image(isolated_boxes(3), {1});
    strong.annotation = StrongAnnotation{{{Box(0, 0, 5, 5), 1}}};
    CHECK_THROWS_AS(e_step(strong, ScorerParams(2, 2), cfg), InputError);
    cfg.mode = LatentMode::exact;
    CHECK_THROWS_AS(e_step(weak_image(isolated_boxes(1), {1, 2}), ScorerParams(3, 2), cfg), InputError);
  }
}

TEST_CASE("first E-step from init scores is proportional to the product of center scores") {
  const auto im = weak_image(isolated_boxes(3), {1, 2});
  Eigen::MatrixXd scores(3, 2);
  scores << 0.5, 0.1, 0.2, 0.4, 0.3, 0.3;
  EmConfig cfg;
  cfg.mode = LatentMode::exact;
  const auto post = e_step_from_scores(im, scores, cfg);
  REQUIRE(post.configs.size() == 6);
  double z = 0.0;
  for (const auto& c : post.configs.configs) z += scores(c.centers[0].proposal, 0) * scores(c.centers[1].proposal, 1);
  for (std::size_t k = 0; k < post.weights.size(); ++k) {
    const auto& c = post.configs.configs[k];
    CHECK(post.weights[k] ==
          doctest::Approx(scores(c.centers[0].proposal, 0) * scores(c.centers[1].proposal, 1) / z).epsilon(1e-14));
  }
  cfg.mode = LatentMode::hard;
  const auto hard = e_step_from_scores(im, scores, cfg);
  CHECK(hard.configs.configs[0] == LatentConfig{{{1, 0}, {2, 1}}});
  cfg.mode = LatentMode::k_em;
  cfg.k = 4;
  const auto kem = e_step_from_scores(im, scores, cfg);
  // top-2 for category 1: {0, 2}; for category 2: {1, 2}
  CHECK(kem.configs.size() == 3);
}

TEST_CASE("soft labels") {
  SUBCASE("hard posterior gives the one-hot expansion") {
    const std::vector<Box> b = {Box(0, 0, 10, 10), Box(1, 1, 11, 11), Box(20, 20, 30, 30)};
    PosteriorTable post{"img", {LatentMode::hard, ImageLabel({2}), {LatentConfig{{{2, 0}}}}}, {1.0}};
    const auto q = soft_labels(post, b, 3);
    Eigen::MatrixXd expected(3, 3);
    expected << 0, 0, 1, 0, 0, 1, 1, 0, 0;
    CHECK(q.q == expected);
  }
  SUBCASE("uniform posterior over two isolated centers") {
    PosteriorTable post{"img",
                        {LatentMode::exact, ImageLabel({1}), {LatentConfig{{{1, 0}}}, LatentConfig{{{1, 1}}}}},
                        {0.5, 0.5}};
    const auto q = soft_labels(post, isolated_boxes(3), 2);
    CHECK(q.q(0, 0) == 0.5);
    CHECK(q.q(0, 1) == 0.5);
    CHECK(q.q(1, 1) == 0.5);
    CHECK(q.q(2, 0) == 1.0);
  }
}

TEST_CASE("soft-label gradient equals the gradient of the expected complete-data log likelihood") {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 30; ++trial) {
    const auto shape = testing::random_shape(rng, 2, 7);
    Dataset ds;
    ds.images.push_back(testing::random_weak_image(rng, shape, "x"));
    const auto& im = ds.images[0];
    const auto prev = testing::random_params(rng, shape.categories, shape.feature_dim);
    const auto now = testing::random_params(rng, shape.categories, shape.feature_dim);
    EmConfig cfg;
    cfg.mode = LatentMode::exact;
    const auto post = e_step(im, prev, cfg);
    const std::vector<SoftLabels> labels = {soft_labels(post, im.proposals, shape.categories)};

    // Direct route: Σ_y w_y Σ_i log p(y_i | b_i) with per-configuration one-hot targets.
    Eigen::MatrixXd direct = Eigen::MatrixXd::Zero(shape.categories, shape.feature_dim + 1);
    double direct_value = 0.0;
    for (std::size_t k = 0; k < post.configs.size(); ++k) {
      const auto y = expand(post.configs.configs[k], im.proposals);
      std::vector<TrainingSample> batch;
      for (int i = 0; i < im.proposal_count(); ++i) {
        Eigen::VectorXd t = Eigen::VectorXd::Zero(shape.categories);
        t(y.labels[i]) = 1.0;
        batch.push_back({im.features.row(i).transpose(), t});
      }
      const auto g = weighted_ce_gradient(now, batch, 0.0);
      direct += post.weights[k] * g.gradient;
      direct_value -= post.weights[k] * g.loss;
    }
    const auto fast = full_batch_gradient(ds, labels, now, 0.0);
    CHECK((fast.gradient - direct).cwiseAbs().maxCoeff() < 1e-8);
    CHECK(-fast.loss == doctest::Approx(direct_value).epsilon(1e-12));
    CHECK(expected_log_likelihood(ds, labels, now) == doctest::Approx(direct_value).epsilon(1e-12));

    const auto numeric = testing::central_difference(
        [&](const Eigen::MatrixXd& w) {
          double q = 0.0;
          const auto lp = log_softmax_rows(ScorerParams(w), im.features);
          for (std::size_t k = 0; k < post.configs.size(); ++k) {
            q += post.weights[k] * oracle::labeling_log_likelihood(expand(post.configs.configs[k], im.proposals), lp);
          }
          return -q;
        },
        now.weights);
    CHECK(testing::relative_error(fast.gradient, numeric) < 1e-6);
  }
}

TEST_CASE("strong labels follow the max-IoU ground truth at 0.5") {
  ImageRecord im = weak_image({Box(0, 0, 10, 10), Box(50, 50, 60, 60), Box(0, 0, 10, 6), Box(0, 20, 10, 30)}, {1});
  im.annotation = StrongAnnotation{{{Box(0, 0, 10, 10), 1}, {Box(0, 0, 10, 3.3), 2}, {Box(0, 20, 10, 30), 2}}};
  CHECK(iou(Box(0, 0, 10, 6), Box(0, 0, 10, 10)) == doctest::Approx(0.6));
  CHECK(iou(Box(0, 0, 10, 6), Box(0, 0, 10, 3.3)) == doctest::Approx(0.55));
  const auto y = strong_labels(im, 3);
  Eigen::MatrixXd expected(4, 3);
  expected << 0, 1, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1;
  CHECK(y.q == expected);
}

TEST_CASE("mini-batch composition") {
  std::mt19937_64 rng(6);
  auto im = testing::random_weak_image(rng, {30, 1, 3, 4}, "x");
  SoftLabels q{"x", Eigen::MatrixXd::Zero(30, 3)};
  for (int i = 0; i < 30; ++i) q.q(i, i < 20 ? 0 : 1 + i % 2) = 1.0;
  EmConfig cfg;
  const auto a = sample_minibatch(im, q, cfg, rng);
  const auto b = sample_minibatch(flipped(im), q, cfg, rng);
  CHECK(a.size() + b.size() == 128u);
  int fg = 0;
  for (const auto& s : a) fg += s.target(0) == 0.0 ? 1 : 0;
  CHECK(fg == 16);  // 10 foreground-eligible proposals, drawn with replacement

  SUBCASE("no foreground-eligible proposal") {
    SoftLabels bg{"x", Eigen::MatrixXd::Zero(30, 3)};
    bg.q.col(0).setOnes();
    bool missing = false;
    const auto only_bg = sample_minibatch(im, bg, cfg, rng, &missing);
    CHECK(missing);
    CHECK(only_bg.size() == 48u);
  }
}

TEST_CASE("m_step") {
  std::mt19937_64 rng(8);
  Dataset ds = small_mixed_dataset(rng, 3, 2, 6, 3, 3);
  const auto p0 = testing::random_params(rng, 3, 3);
  EmConfig cfg;
  cfg.mode = LatentMode::exact;
  std::vector<PosteriorTable> posts;
  for (const auto& im : ds.images)
    if (im.is_weak()) posts.push_back(e_step(im, p0, cfg));
  const auto labels = dataset_soft_labels(ds, posts, 3);

  SUBCASE("zero steps leave params unchanged") {
    cfg.sgd_steps_per_m_step = 0;
    auto trainer = make_trainer(p0, cfg);
    CHECK(m_step(ds, labels, p0, trainer, cfg) == p0);
  }
  SUBCASE("learning-rate schedule runs on a global step counter") {
    cfg.sgd_steps_per_m_step = 7;
    cfg.lr = {0.05, 10, 0.005};
    auto trainer = make_trainer(p0, cfg);
    auto p = m_step(ds, labels, p0, trainer, cfg);
    CHECK(trainer.global_step == 7);
    CHECK(trainer.optimizer.learning_rate == 0.05);
    p = m_step(ds, labels, p, trainer, cfg);
    CHECK(trainer.global_step == 14);
    CHECK(trainer.optimizer.learning_rate == 0.005);
  }
  SUBCASE("full-batch gradient descent with a small fixed step decreases the loss monotonically") {
    Dataset one;
    one.images.push_back(ds.images[0]);
    const std::vector<SoftLabels> l1 = {labels[0]};
    ScorerParams p = p0;
    double last = full_batch_gradient(one, l1, p, 0.0).loss;
    for (int step = 0; step < 200; ++step) {
      const auto g = full_batch_gradient(one, l1, p, 0.0);
      p = ScorerParams(p.weights - 0.01 * g.gradient);
      const double now = full_batch_gradient(one, l1, p, 0.0).loss;
      REQUIRE(now <= last);
      last = now;
    }
  }
  SUBCASE("backtracking M-step never increases the loss") {
    const double before = full_batch_gradient(ds, labels, p0, 0.0).loss;
    const auto p = m_step_full_batch(ds, labels, p0, cfg);
    CHECK(full_batch_gradient(ds, labels, p, 0.0).loss < before);
  }
}

TEST_CASE("run_em") {
  std::mt19937_64 rng(10);
  Dataset ds = small_mixed_dataset(rng, 4, 2, 7, 3, 3);
  const auto p0 = testing::random_params(rng, 3, 3, 0.5);
  EmConfig cfg;
  cfg.mode = LatentMode::exact;
  cfg.sgd_steps_per_m_step = 50;

  SUBCASE("zero iterations return the init") {
    cfg.em_iterations = 0;
    const auto r = run_em(ds, p0, cfg);
    CHECK(r.params == p0);
    CHECK(r.trace.size() == 1);
  }
  SUBCASE("exact E-step with full-batch M-step is monotone") {
    cfg.em_iterations = 5;
    cfg.m_step = MStepKind::full_batch;
    const auto r = run_em(ds, p0, cfg);
    REQUIRE(r.trace.size() == 6);
    for (std::size_t t = 1; t < r.trace.size(); ++t) {
      CHECK(r.trace[t].objective.total >= r.trace[t - 1].objective.total - 1e-8);
      CHECK(r.trace[t].surrogate_after >= r.trace[t].surrogate_before);
    }
  }
  SUBCASE("identical seeds give bit-identical checkpoints") {
    cfg.mode = LatentMode::k_em;
    cfg.k = 5;
    const auto a = run_em(ds, p0, cfg);
    const auto b = run_em(ds, p0, cfg);
    CHECK(checkpoint_to_json(a.params).dump() == checkpoint_to_json(b.params).dump());
    cfg.seed = 1;
    CHECK(!(run_em(ds, p0, cfg).params == a.params));
  }
  SUBCASE("hard mode runs (trace recorded, no monotonicity claim)") {
    cfg.mode = LatentMode::hard;
    cfg.em_iterations = 2;
    CHECK(run_em(ds, p0, cfg).trace.size() == 3);
  }
  SUBCASE("init scores start from zero weights") {
    InitScores scores;
    for (const auto& im : ds.images) scores.by_image[im.id] = Eigen::MatrixXd::Constant(im.proposal_count(), 2, 0.5);
    cfg.em_iterations = 1;
    const auto r = run_em(ds, scores, cfg);
    CHECK(r.params.categories() == 3);
    CHECK(r.trace[0].objective.total == doctest::Approx(objective(ds, ScorerParams(3, 3)).total));
  }
  SUBCASE("trace csv") {
    cfg.em_iterations = 1;
    std::ostringstream os;
    write_trace_csv(os, run_em(ds, p0, cfg).trace);
    CHECK(os.str().rfind("iteration,strong_term,weak_term,total\n0,", 0) == 0);
  }
  SUBCASE("config errors") {
    CHECK_THROWS_AS(EmConfig::from_json(nlohmann::json{{"K", 0}}), InputError);
    CHECK_THROWS_AS(EmConfig::from_json(nlohmann::json{{"bogus", 1}}), InputError);
    CHECK(EmConfig::from_json(nlohmann::json{{"mode", "hard"}}).mode == LatentMode::hard);
    CHECK_NOTHROW(EmConfig::large_scale_schedule().validate());
    CHECK(EmConfig::large_scale_schedule().sgd_steps_per_m_step == 40000);
    CHECK_THROWS_AS(run_em(Dataset{}, p0, cfg), InputError);
    CHECK_THROWS_AS(run_em(ds, ScorerParams(3, 5), cfg), InputError);
  }
}
