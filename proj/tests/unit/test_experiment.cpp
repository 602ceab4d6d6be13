#include <doctest.h>

#include <sstream>

#include "emdet/error.hpp"
#include "emdet/experiment.hpp"

using namespace emdet;

TEST_CASE("fraction lists") {
  CHECK(parse_fractions("0,0.2,1") == std::vector<double>{0.0, 0.2, 1.0});
  CHECK(parse_fractions("1.0") == std::vector<double>{1.0});
  CHECK_THROWS_AS(parse_fractions(""), InputError);
  CHECK_THROWS_AS(parse_fractions("0,1.5"), InputError);
  CHECK_THROWS_AS(parse_fractions("0,abc"), InputError);
  CHECK_THROWS_AS(parse_fractions("0.5x"), InputError);
}

TEST_CASE("sweep rows") {
  GeneratorSpec spec;
  spec.train_images = 10;
  spec.test_images = 4;
  spec.proposals_per_image = 10;
  spec.jitters_per_object = 2;
  spec.feature_dim = 6;
  const auto bench = generate(spec);
  EmConfig cfg;
  cfg.sgd_steps_per_m_step = 10;
  cfg.em_iterations = 1;
  const auto sweep = run_sweep(bench.train, bench.test, {0.0, 1.0}, cfg);
  REQUIRE(sweep.rows.size() == 2);
  CHECK(sweep.rows[0].strong_images == 0);
  CHECK(sweep.rows[1].strong_images == 10);
  CHECK(sweep.manifest["runs"].size() == 2);
  std::ostringstream os;
  write_sweep_csv(os, sweep.rows);
  CHECK(os.str().rfind("fraction,mAP,meanCorLoc,seed\n0,", 0) == 0);
  CHECK_THROWS_AS(run_sweep(split_semi(bench.train, 0.5, 0).dataset, bench.test, {1.0}, cfg), InputError);
}
