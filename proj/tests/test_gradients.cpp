#include "doctest.h"
#include "support/gradient_suite.hpp"

using namespace nf::testing;

TEST_CASE("every op matches finite differences in f64") {
  for (const auto& r : op_gradient_suite<double>(20, 1e-5)) {
    INFO(r.name << " worst relative error " << r.worst);
    CHECK(r.instances >= 20);
    CHECK(r.worst <= 1e-4);
  }
}

TEST_CASE("every op matches finite differences in f32") {
  for (const auto& r : op_gradient_suite<float>(20, 1e-2)) {
    INFO(r.name << " worst relative error " << r.worst);
    CHECK(r.worst <= 1e-2);
  }
}

TEST_CASE("composed network matches finite differences") {
  const auto r = composed_gradient_check<double>(20, 1e-5);
  INFO("worst relative error " << r.worst);
  CHECK(r.worst <= 1e-4);
}

TEST_CASE("composed fusion network matches finite differences") {
  for (uint64_t seed = 1; seed <= 20; ++seed) {
    const double err = fusion_network_gradcheck(seed, 3, 1e-5);
    INFO("seed " << seed << " relative error " << err);
    CHECK(err <= 1e-4);
  }
}
