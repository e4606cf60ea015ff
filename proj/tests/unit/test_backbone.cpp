#include <doctest.h>

#include "modalfuse/archive.hpp"
#include "modalfuse/backbone.hpp"
#include "modalfuse/errors.hpp"
#include "test_support.hpp"

using namespace modalfuse;
using testutil::random_tensor;

namespace {

EncoderSpec small_spec() {
  EncoderSpec s;
  s.depth = 4;
  s.embed_dim = 8;
  s.num_heads = 2;
  s.patch_size = 2;
  s.mlp_ratio = 2;
  s.taps = {1, 2, 4};
  s.native_grid_h = 2;
  s.native_grid_w = 2;
  return s;
}

}  // namespace

TEST_CASE("default taps split eight blocks into four stages of two") {
  const auto stages = partition_stages(EncoderSpec{});
  REQUIRE(stages.size() == 4);
  CHECK(stages[0] == BlockRange{1, 2});
  CHECK(stages[1] == BlockRange{3, 4});
  CHECK(stages[2] == BlockRange{5, 6});
  CHECK(stages[3] == BlockRange{7, 8});
}

TEST_CASE("every valid tap set partitions the blocks exactly once") {
  for (std::int64_t depth = 1; depth <= 10; ++depth) {
    // Enumerate all subsets of 1..depth-1 as interior taps.
    for (std::int64_t mask = 0; mask < (std::int64_t{1} << (depth - 1)); ++mask) {
      EncoderSpec s;
      s.depth = depth;
      s.taps.clear();
      for (std::int64_t b = 1; b < depth; ++b)
        if (mask & (std::int64_t{1} << (b - 1))) s.taps.push_back(b);
      s.taps.push_back(depth);
      const auto stages = partition_stages(s);
      std::vector<int> seen(static_cast<std::size_t>(depth + 1), 0);
      for (const auto& r : stages) {
        CHECK(r.first <= r.last);
        for (std::int64_t l = r.first; l <= r.last; ++l) ++seen[static_cast<std::size_t>(l)];
      }
      for (std::int64_t l = 1; l <= depth; ++l) CHECK(seen[static_cast<std::size_t>(l)] == 1);
    }
  }
}

TEST_CASE("invalid encoder specs are rejected") {
  EncoderSpec s;
  s.taps = {2, 4, 6};
  CHECK_THROWS_AS(partition_stages(s), ConfigError);
  s.taps = {4, 2, 8};
  CHECK_THROWS_AS(partition_stages(s), ConfigError);
  s = EncoderSpec{};
  s.num_heads = 3;
  CHECK_THROWS_AS(s.validate(), ConfigError);
}

TEST_CASE("patch embedding produces a channel-last token grid") {
  Rng rng(1);
  Backbone bb(small_spec(), 42, rng);
  TokenGrid t = bb.embed_rgb(random_tensor({2, 3, 4, 6}, rng));
  CHECK(t.data.shape() == Shape{2, 2, 3, 8});
  CHECK(t.modality == Modality::Rgb);
  CHECK_THROWS_AS(bb.embed_rgb(random_tensor({1, 3, 5, 4}, rng)), ShapeError);
  CHECK_THROWS_AS(bb.embed_rgb(random_tensor({1, 1, 4, 4}, rng)), ShapeError);
  CHECK_THROWS_AS(bb.embed_aux(random_tensor({1, 3, 4, 4}, rng)), ShapeError);
}

TEST_CASE("a zero image embeds to bias plus the positional table") {
  Rng rng(2);
  Backbone bb(small_spec(), 42, rng);
  TokenGrid t = bb.embed_rgb(Tensor({1, 3, 4, 4}));
  const Tensor& pos = bb.frozen().pos_embed.value();
  const Tensor& bias = bb.frozen().rgb_embed.bias.value();
  for (std::int64_t i = 0; i < 2; ++i)
    for (std::int64_t j = 0; j < 2; ++j)
      for (std::int64_t c = 0; c < 8; ++c)
        CHECK(t.data.value().at({0, i, j, c}) == doctest::Approx(pos.at({i, j, c}) + bias[c]).epsilon(1e-15));
}

TEST_CASE("positional table is resampled for other grid sizes") {
  Rng rng(3);
  Backbone bb(small_spec(), 42, rng);
  TokenGrid zeros{Var::constant(Tensor({1, 4, 3, 8})), Modality::Rgb};
  Tensor got = bb.add_positional(zeros).data.value();
  Tensor want = ops::resize_bicubic(bb.frozen().pos_embed.value(), 4, 3);
  CHECK(got.reshaped({4, 3, 8}) == want);
}

TEST_CASE("both streams share frozen weights") {
  Rng rng(4);
  Backbone bb(small_spec(), 42, rng);
  Tensor a = random_tensor({1, 2, 2, 8}, rng), b = random_tensor({1, 2, 2, 8}, rng);
  TokenGrid x{Var::constant(a), Modality::Rgb}, y{Var::constant(b), Modality::Aux};
  auto [x1, y1] = bb.run_stage(2, x, y);
  auto [y2, x2] = bb.run_stage(2, y, x);
  CHECK(x1.data.value() == x2.data.value());
  CHECK(y1.data.value() == y2.data.value());
  CHECK(x1.modality == Modality::Rgb);
  CHECK(y1.modality == Modality::Aux);
}

TEST_CASE("stages compose into the full block sequence") {
  Rng rng(5);
  Backbone bb(small_spec(), 42, rng);
  TokenGrid x{Var::constant(random_tensor({1, 2, 2, 8}, rng)), Modality::Rgb};
  TokenGrid seq = x;
  for (std::int64_t l = 1; l <= 4; ++l) seq = bb.run_block(seq, l);
  TokenGrid staged = x, other = x;
  for (std::int64_t s = 0; s < 3; ++s) std::tie(staged, other) = bb.run_stage(s, staged, other);
  CHECK(staged.data.value() == seq.data.value());
  CHECK(staged.data.value().all_finite());
  CHECK_THROWS_AS(bb.run_block(x, 0), std::out_of_range);
  CHECK_THROWS_AS(bb.run_stage(3, x, x), std::out_of_range);
}

TEST_CASE("a block with zero projections is the identity") {
  Rng rng(6);
  Backbone bb(small_spec(), 42, rng);
  auto& blk = bb.frozen().blocks[0];
  blk.proj.weight.mutable_value().fill(0.0);
  blk.proj.bias.mutable_value().fill(0.0);
  blk.fc2.weight.mutable_value().fill(0.0);
  blk.fc2.bias.mutable_value().fill(0.0);
  TokenGrid x{Var::constant(random_tensor({1, 2, 2, 8}, rng)), Modality::Rgb};
  CHECK(bb.run_block(x, 1).data.value() == x.data.value());
}

TEST_CASE("frozen weights are seeded independently of the run stream") {
  Rng r1(1), r2(99);
  Backbone a(small_spec(), 42, r1), b(small_spec(), 42, r2);
  CHECK(a.frozen().blocks[3].fc1.weight.value() == b.frozen().blocks[3].fc1.weight.value());
  CHECK_FALSE(a.aux_embed().proj.weight.value() == b.aux_embed().proj.weight.value());
  ParamList ps;
  a.collect(ps);
  for (const auto& p : ps) CHECK(p.var.requires_grad() == !is_frozen_group(p.group));
}

TEST_CASE("frozen weights survive a save and load through the weight file") {
  const auto dir = testutil::temp_dir("backbone_io");
  Rng r1(1), r2(1);
  Backbone a(small_spec(), 42, r1), b(small_spec(), 7, r2);
  a.save_frozen(dir / "frozen.mfa");
  b.load_frozen(dir / "frozen.mfa");
  ParamList pa, pb;
  a.collect(pa);
  b.collect(pb);
  for (std::size_t k = 0; k < pa.size(); ++k) {
    if (!is_frozen_group(pa[k].group)) continue;
    const Tensor& va = pa[k].var.value();
    const Tensor& vb = pb[k].var.value();
    for (std::int64_t i = 0; i < va.numel(); ++i)
      CHECK(vb[i] == static_cast<double>(static_cast<float>(va[i])));
  }

  Archive broken = read_archive(dir / "frozen.mfa");
  broken.entries.pop_back();
  write_archive(dir / "broken.mfa", broken);
  CHECK_THROWS_AS(b.load_frozen(dir / "broken.mfa"), FormatError);
}
