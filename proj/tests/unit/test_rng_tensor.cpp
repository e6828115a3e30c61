#include <cmath>

#include <doctest.h>

#include "nfa/rng.hpp"
#include "nfa/tensor.hpp"

using namespace nfa;

TEST_CASE("rng streams are reproducible and seed-sensitive") {
  Rng a(42), b(42), c(43);
  bool all_equal = true, any_diff = false;
  for (int i = 0; i < 1000; ++i) {
    const auto va = a.next_u64();
    all_equal = all_equal && (va == b.next_u64());
    any_diff = any_diff || (va != c.next_u64());
  }
  CHECK(all_equal);
  CHECK(any_diff);
}

TEST_CASE("uniform stays in range, normal has sane moments") {
  Rng rng(7);
  double sum = 0, sum2 = 0;
  for (int i = 0; i < 20000; ++i) {
    const double u = rng.uniform(-2.0, 3.0);
    CHECK(u >= -2.0);
    CHECK(u < 3.0);
    const double n = rng.normal();
    sum += n;
    sum2 += n * n;
  }
  CHECK(std::fabs(sum / 20000.0) < 0.03);
  CHECK(std::fabs(sum2 / 20000.0 - 1.0) < 0.05);
}

TEST_CASE("fork yields a different stream") {
  Rng a(5);
  Rng b = a.fork(1);
  Rng c(5);
  CHECK(b.next_u64() != c.next_u64());
}

TEST_CASE("tensor invariants are enforced") {
  CHECK_THROWS_AS(TensorD({2, 3}, {1.0, 2.0}), std::invalid_argument);
  CHECK_THROWS_AS(TensorD({0}, {}), std::invalid_argument);
  CHECK_THROWS_AS(TensorD({2, 0}, {}), std::invalid_argument);
  CHECK_THROWS_AS(TensorD::scalar(1.0).reshaped({2}), std::invalid_argument);
  CHECK_THROWS_AS(TensorD({2}, {1.0, 2.0}).item(), std::invalid_argument);
}

TEST_CASE("reshape shares data and cast converts") {
  TensorD t({2, 3}, {1, 2, 3, 4, 5, 6});
  TensorD r = t.reshaped({3, 2});
  CHECK(r.shape() == Shape{3, 2});
  CHECK(r.data() == t.data());
  TensorF f = t.cast<float>();
  CHECK(f.at(4) == 5.0f);
  CHECK(t.numel() == 6);
}

TEST_CASE("all_finite flags nan and inf") {
  CHECK(TensorD({2}, {1.0, 2.0}).all_finite());
  CHECK_FALSE(TensorD({2}, {1.0, std::nan("")}).all_finite());
  CHECK_FALSE(TensorD({1}, {std::numeric_limits<double>::infinity()}).all_finite());
}

TEST_CASE("factories produce the requested distributions deterministically") {
  Rng r1(9), r2(9);
  const TensorD a = TensorD::uniform({50}, -1, 1, r1);
  const TensorD b = TensorD::uniform({50}, -1, 1, r2);
  CHECK(a.vec() == b.vec());
  for (std::int64_t i = 0; i < 50; ++i) {
    CHECK(a.at(i) >= -1.0);
    CHECK(a.at(i) < 1.0);
  }
  CHECK(TensorD::zeros({4, 4}).numel() == 16);
  CHECK(TensorD::full({3}, 2.5).at(2) == 2.5);
}
