#include <doctest.h>

#include <cmath>

#include "modalfuse/errors.hpp"
#include "modalfuse/losses.hpp"
#include "modalfuse/ops.hpp"
#include "test_support.hpp"

using namespace modalfuse;
using testutil::random_tensor;

namespace {

LabelMap random_labels(std::int64_t b, std::int64_t h, std::int64_t w, std::int32_t k, Rng& rng,
                       double ignore_p = 0.1) {
  LabelMap l(b, h, w);
  for (auto& v : l.ids) v = rng.bernoulli(ignore_p) ? 255 : static_cast<std::int32_t>(rng.integer(0, k - 1));
  return l;
}

double pixel_ce(const Tensor& z, std::int64_t b, std::int64_t i, std::int64_t j, std::int32_t y) {
  double s = 0.0;
  for (std::int64_t k = 0; k < z.dim(1); ++k) s += std::exp(z.at({b, k, i, j}));
  return std::log(s) - z.at({b, y, i, j});
}

}  // namespace

TEST_CASE("hard pixels are misclassified valid pixels, ties to the lowest index") {
  Tensor z({1, 3, 1, 4});
  // Pixel 0: argmax 1, label 1 -> easy. Pixel 1: tie between 0 and 2 -> argmax 0, label 2 -> hard.
  // Pixel 2: argmax 2, label 0 -> hard. Pixel 3: ignored.
  const double vals[3][4] = {{0, 5, 0, 9}, {3, 1, 0, 0}, {1, 5, 4, 0}};
  for (int k = 0; k < 3; ++k)
    for (int p = 0; p < 4; ++p) z.at({0, k, 0, p}) = vals[k][p];
  LabelMap y(1, 1, 4);
  y.ids = {1, 2, 0, 255};
  HardPixelMask m = hard_pixel_set(z, y, 255);
  CHECK(m == HardPixelMask{0, 1, 1, 0});
}

TEST_CASE("hard pixel set matches a brute-force loop") {
  Rng rng(1);
  for (int t = 0; t < 20; ++t) {
    Tensor z = random_tensor({2, 4, 5, 5}, rng, -2, 2);
    // Force some exact ties.
    z.at({0, 1, 0, 0}) = z.at({0, 0, 0, 0});
    LabelMap y = random_labels(2, 5, 5, 4, rng);
    HardPixelMask m = hard_pixel_set(z, y, 255);
    for (std::int64_t b = 0; b < 2; ++b)
      for (std::int64_t i = 0; i < 5; ++i)
        for (std::int64_t j = 0; j < 5; ++j) {
          const std::int32_t lab = y.at(b, i, j);
          std::int64_t best = 0;
          double bv = z.at({b, 0, i, j});
          for (std::int64_t k = 1; k < 4; ++k)
            if (z.at({b, k, i, j}) > bv) bv = z.at({b, k, i, j}), best = k;
          const bool hard = lab != 255 && best != lab;
          CHECK(m[static_cast<std::size_t>((b * 5 + i) * 5 + j)] == (hard ? 1 : 0));
        }
  }
}

TEST_CASE("auxiliary loss averages only over hard pixels") {
  Rng rng(2);
  Tensor zr = random_tensor({1, 3, 2, 2}, rng), za = random_tensor({1, 3, 2, 2}, rng);
  LabelMap y(1, 2, 2);
  y.ids = {0, 1, 2, 1};
  HardPixelMask omega{1, 0, 0, 1};
  auto [lr, la] = aux_loss(Var::constant(zr), Var::constant(za), y, omega, 255);
  CHECK(lr.value()[0] == doctest::Approx(0.5 * (pixel_ce(zr, 0, 0, 0, 0) + pixel_ce(zr, 0, 1, 1, 1))).epsilon(1e-14));
  CHECK(la.value()[0] == doctest::Approx(0.5 * (pixel_ce(za, 0, 0, 0, 0) + pixel_ce(za, 0, 1, 1, 1))).epsilon(1e-14));
}

TEST_CASE("empty hard set gives exactly zero auxiliary loss and gradient") {
  Tensor z({1, 2, 1, 2});
  z.at({0, 1, 0, 0}) = 3.0;  // predicts 1
  z.at({0, 0, 0, 1}) = 3.0;  // predicts 0
  LabelMap y(1, 1, 2);
  y.ids = {1, 0};
  Var zr = Var::leaf(Tensor({1, 2, 1, 2}, 0.3), true), za = Var::leaf(Tensor({1, 2, 1, 2}, -0.3), true);
  LossOptions opt;
  LossTerms t = total_loss(Var::constant(z), zr, za, y, opt);
  CHECK(t.breakdown.aux_rgb == 0.0);
  CHECK(t.breakdown.aux_aux == 0.0);
  CHECK(t.breakdown.hard_pixel_fraction == 0.0);
  CHECK(t.breakdown.total == t.breakdown.main);
  backward(t.total);
  if (zr.has_grad()) for (double g : zr.grad().values()) CHECK(g == 0.0);
  if (za.has_grad()) for (double g : za.grad().values()) CHECK(g == 0.0);
}

TEST_CASE("auxiliary gradients vanish outside the hard set and no gradient flows through it") {
  Rng rng(3);
  Var z = Var::leaf(random_tensor({1, 3, 4, 4}, rng, -2, 2), true);
  Var zr = Var::leaf(random_tensor({1, 3, 4, 4}, rng), true);
  Var za = Var::leaf(random_tensor({1, 3, 4, 4}, rng), true);
  LabelMap y = random_labels(1, 4, 4, 3, rng, 0.0);
  HardPixelMask omega = hard_pixel_set(z.value(), y, 255);
  LossOptions opt;
  LossTerms t = total_loss(z, zr, za, y, opt);
  backward(t.total);
  for (std::int64_t p = 0; p < 16; ++p) {
    for (std::int64_t k = 0; k < 3; ++k) {
      if (omega[static_cast<std::size_t>(p)] == 0) {
        CHECK(zr.grad()[k * 16 + p] == 0.0);
        CHECK(za.grad()[k * 16 + p] == 0.0);
      }
    }
  }
  // The main logits only receive the main cross-entropy gradient.
  Var z2 = Var::leaf(z.value(), true);
  backward(main_loss(z2, y, 255));
  for (std::int64_t i = 0; i < 48; ++i) CHECK(z.grad()[i] == doctest::Approx(z2.grad()[i]).epsilon(1e-15));
}

TEST_CASE("total loss is main + lambda * (rgb + aux)") {
  Rng rng(4);
  Tensor z = random_tensor({2, 4, 3, 3}, rng), zr = random_tensor({2, 4, 3, 3}, rng),
         za = random_tensor({2, 4, 3, 3}, rng);
  LabelMap y = random_labels(2, 3, 3, 4, rng);
  LossOptions opt{0.4, 255};
  LossTerms t = total_loss(Var::constant(z), Var::constant(zr), Var::constant(za), y, opt);
  CHECK(t.breakdown.total ==
        doctest::Approx(t.breakdown.main + 0.4 * (t.breakdown.aux_rgb + t.breakdown.aux_aux)).epsilon(1e-14));
  double main = 0.0;
  std::int64_t n = 0;
  for (std::int64_t b = 0; b < 2; ++b)
    for (std::int64_t i = 0; i < 3; ++i)
      for (std::int64_t j = 0; j < 3; ++j)
        if (y.at(b, i, j) != 255) main += pixel_ce(z, b, i, j, y.at(b, i, j)), ++n;
  CHECK(t.breakdown.main == doctest::Approx(main / static_cast<double>(n)).epsilon(1e-13));
  CHECK(t.breakdown.valid_pixels == n);

  LossTerms only = total_loss(Var::constant(z), Var(), Var(), y, opt);
  CHECK(only.breakdown.total == only.breakdown.main);
  opt.lambda_aux = -1.0;
  CHECK_THROWS_AS(total_loss(Var::constant(z), Var(), Var(), y, opt), ConfigError);
  CHECK_THROWS_AS(main_loss(Var::constant(z), LabelMap(2, 3, 4), 255), ShapeError);
}
