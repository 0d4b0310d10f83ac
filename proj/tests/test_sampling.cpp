#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "cicf/sampling.hpp"
#include "fixtures.hpp"

using namespace cicf;

namespace {

std::vector<std::size_t> v(std::initializer_list<std::size_t> xs) { return xs; }

}  // namespace

TEST_CASE("proportional allocation by largest remainder") {
  CHECK(proportional_allocation(v({50, 30, 20}), 10).counts == v({5, 3, 2}));
  CHECK(proportional_allocation(v({70, 20, 10}), 5).counts == v({4, 1, 0}));
  CHECK(proportional_allocation(v({10, 10, 10}), 3).counts == v({1, 1, 1}));
  CHECK(proportional_allocation(v({10, 10, 10}), 2).counts == v({1, 1, 0}));
  CHECK(proportional_allocation(v({3, 5}), 8).counts == v({3, 5}));
  CHECK_THROWS_AS(proportional_allocation(v({3, 5}), 9), ConfigError);
  CHECK_THROWS_AS(proportional_allocation(v({3, 5}), 0), ConfigError);
}

TEST_CASE("property: proportional allocation sums to M, respects caps, stays within one of the quota") {
  Rng rng(17);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<std::size_t> sizes(1 + rng.below(12));
    for (auto& s : sizes) s = 1 + rng.below(50);
    const std::size_t n = std::accumulate(sizes.begin(), sizes.end(), std::size_t{0});
    const std::size_t m = 1 + rng.below(n);
    const Allocation a = proportional_allocation(sizes, m);
    CHECK(a.total() == m);
    for (std::size_t k = 0; k < sizes.size(); ++k) {
      CHECK(a.counts[k] <= sizes[k]);
      const double quota = static_cast<double>(m) * static_cast<double>(sizes[k]) / static_cast<double>(n);
      CHECK(std::abs(static_cast<double>(a.counts[k]) - quota) < 1.0);
    }
  }
}

TEST_CASE("equal allocation") {
  CHECK(equal_allocation(4, 8).counts == v({2, 2, 2, 2}));
  CHECK(equal_allocation(3, 10).counts == v({4, 3, 3}));
  CHECK(equal_allocation(3, 2).counts == v({1, 1, 0}));
  const Allocation twenty_one = equal_allocation(21, 84);
  CHECK(std::all_of(twenty_one.counts.begin(), twenty_one.counts.end(), [](std::size_t c) { return c == 4; }));
  CHECK(equal_allocation(v({1, 10, 10}), 9).counts == v({1, 4, 4}));
  CHECK_THROWS_AS(equal_allocation(v({1, 2}), 4), ConfigError);
}

TEST_CASE("stratified draws match the allocation exactly") {
  const fixtures::Stratified s = fixtures::strata({20, 12, 8});
  const Allocation a = proportional_allocation(s.assignment.sizes, 10);
  Rng rng(5);
  for (int it = 0; it < 50; ++it) {
    const auto rows = draw_indices(s.data, s.assignment, SamplerKind::stratified_proportional, &a, 10, rng);
    CHECK(cluster_histogram(rows, s.assignment) == a.counts);
    CHECK(std::is_sorted(rows.begin(), rows.end()));
    CHECK(std::adjacent_find(rows.begin(), rows.end()) == rows.end());
  }
  Allocation bad{{30, 0, 0}};
  CHECK_THROWS_AS(draw_indices(s.data, s.assignment, SamplerKind::stratified_proportional, &bad, 30, rng),
                  AllocationError);
}

TEST_CASE("random sampler with M = N is a permutation; draws are seed-deterministic") {
  const fixtures::Stratified s = fixtures::strata({7, 6});
  Rng rng(3);
  auto rows = draw_indices(s.data, s.assignment, SamplerKind::random, nullptr, 13, rng);
  std::sort(rows.begin(), rows.end());
  std::vector<std::size_t> all(13);
  std::iota(all.begin(), all.end(), std::size_t{0});
  CHECK(rows == all);

  Rng a(99), b(99);
  const Allocation alloc = proportional_allocation(s.assignment.sizes, 5);
  CHECK(draw_indices(s.data, s.assignment, SamplerKind::stratified_proportional, &alloc, 5, a) ==
        draw_indices(s.data, s.assignment, SamplerKind::stratified_proportional, &alloc, 5, b));
  CHECK(draw_indices(s.data, s.assignment, SamplerKind::random, nullptr, 5, a) ==
        draw_indices(s.data, s.assignment, SamplerKind::random, nullptr, 5, b));
}

TEST_CASE("class-weighted sampler apportions over classes") {
  const fixtures::Stratified s = fixtures::strata({30, 10});
  Rng rng(1);
  const auto rows = draw_indices(s.data, s.assignment, SamplerKind::class_weighted_random, nullptr, 8, rng);
  CHECK(cluster_histogram(rows, s.assignment) == v({6, 2}));
}

TEST_CASE("sampler difference metric") {
  CHECK(sampler_difference(v({5, 3, 2}), v({4, 4, 2})).e == 2);
  CHECK(sampler_difference(v({5, 3, 2}), v({4, 4, 2})).ratio == doctest::Approx(0.2));
  CHECK(sampler_difference(v({1, 2}), v({1, 2})).e == 0);
  CHECK_THROWS_AS(sampler_difference(v({1, 2}), v({2, 2})), ConfigError);
  CHECK_THROWS_AS(sampler_difference(v({1, 2}), v({3})), ConfigError);

  Rng rng(4);
  for (int t = 0; t < 200; ++t) {
    auto random_hist = [&] {
      std::vector<std::size_t> h(4, 0);
      for (int i = 0; i < 10; ++i) ++h[rng.below(4)];
      return h;
    };
    const auto a = random_hist(), b = random_hist(), c = random_hist();
    CHECK(sampler_difference(a, b).e == sampler_difference(b, a).e);
    CHECK(sampler_difference(a, c).e <= sampler_difference(a, b).e + sampler_difference(b, c).e);
    CHECK(sampler_difference(a, b).e % 2 == 0);
  }
}

TEST_CASE("within-cluster inclusion frequencies are uniform") {
  const fixtures::Stratified s = fixtures::strata({10, 5});
  const Allocation a{{3, 2}};
  Rng rng(2024);
  const int draws = 20000;
  std::vector<int> hits(15, 0);
  for (int t = 0; t < draws; ++t)
    for (std::size_t r : draw_indices(s.data, s.assignment, SamplerKind::stratified_proportional, &a, 5, rng))
      ++hits[r];
  for (std::size_t r = 0; r < 15; ++r) {
    const double p = r < 10 ? 0.3 : 0.4;
    const double sd = std::sqrt(draws * p * (1.0 - p));
    CHECK(std::abs(hits[r] - draws * p) <= 3.5 * sd);
  }
}

TEST_CASE("batch log format and sampler names") {
  std::ostringstream out;
  BatchLog log(out, 3);
  log.record(0, v({1, 2, 3}));
  log.record(1, v({3, 2, 1}));
  CHECK(out.str() == "iteration,k0,k1,k2\n0,1,2,3\n1,3,2,1\n");
  for (SamplerKind k : {SamplerKind::stratified_proportional, SamplerKind::stratified_equal, SamplerKind::random,
                        SamplerKind::class_weighted_random})
    CHECK(parse_sampler_kind(to_string(k)) == k);
  CHECK_THROWS_AS(parse_sampler_kind("bogus"), ConfigError);
}
