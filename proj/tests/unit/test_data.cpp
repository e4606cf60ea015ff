#include <doctest.h>

#include <fstream>

#include "modalfuse/data.hpp"
#include "modalfuse/errors.hpp"
#include "test_support.hpp"

using namespace modalfuse;
using testutil::random_tensor;

namespace {

TilePair marker_tile(std::int64_t h, std::int64_t w) {
  TilePair t;
  t.rgb = Tensor({3, h, w});
  t.dsm = Tensor({1, h, w});
  t.labels = LabelMap(1, h, w);
  for (std::int64_t i = 0; i < h; ++i)
    for (std::int64_t j = 0; j < w; ++j) {
      const double code = static_cast<double>(i * w + j);
      for (std::int64_t c = 0; c < 3; ++c) t.rgb.at({c, i, j}) = code + 1000.0 * static_cast<double>(c);
      t.dsm.at({0, i, j}) = -code;
      t.labels.at(0, i, j) = static_cast<std::int32_t>(i * w + j);
    }
  t.tile_id = "marker";
  return t;
}

}  // namespace

TEST_CASE("dsm is min-max normalised per band and per tile") {
  Tensor d({2, 1, 3}, std::vector<double>{10, 20, 30, 5, 5, 5});
  Tensor n = normalize_dsm(d);
  CHECK(n[0] == 0.0);
  CHECK(n[1] == 0.5);
  CHECK(n[2] == 1.0);
  for (int i = 3; i < 6; ++i) CHECK(n[i] == 0.0);
}

TEST_CASE("rgb normalisation depends on the backbone family") {
  Tensor rgb({3, 1, 1}, std::vector<double>{255, 0, 127.5});
  Tensor sam = normalize_rgb(rgb, BackboneFamily::Sam, PixelRange::Byte);
  CHECK(sam[0] == 1.0);
  CHECK(sam[1] == 0.0);
  CHECK(sam[2] == 0.5);
  Tensor dino = normalize_rgb(rgb, BackboneFamily::Dinov2, PixelRange::Byte);
  CHECK(dino[0] == doctest::Approx((1.0 - 0.485) / 0.229));
  CHECK(dino[1] == doctest::Approx((0.0 - 0.456) / 0.224));
  CHECK(dino[2] == doctest::Approx((0.5 - 0.406) / 0.225));
  Tensor back = denormalize_rgb(dino, BackboneFamily::Dinov2, PixelRange::Byte);
  for (int i = 0; i < 3; ++i) CHECK(back[i] == doctest::Approx(rgb[i]).epsilon(1e-12));
  Tensor unit = normalize_rgb(Tensor({3, 1, 1}, 0.25), BackboneFamily::Sam, PixelRange::Unit);
  CHECK(unit[0] == 0.25);
  CHECK(parse_family("dinov2") == BackboneFamily::Dinov2);
  CHECK_THROWS_AS(parse_family("resnet"), ConfigError);
  CHECK_THROWS_AS(parse_pixel_range("percent"), ConfigError);
}

TEST_CASE("crop and flips move every raster together") {
  TilePair t = marker_tile(10, 12);
  Rng rng(1);
  int seen_h = 0, seen_v = 0;
  for (int trial = 0; trial < 40; ++trial) {
    SamplePatch p = random_crop_flip(t, 4, rng);
    seen_h += p.flip_h;
    seen_v += p.flip_v;
    CHECK(p.rgb.shape() == Shape{3, 4, 4});
    for (std::int64_t i = 0; i < 4; ++i)
      for (std::int64_t j = 0; j < 4; ++j) {
        const std::int64_t si = p.top + (p.flip_v ? 3 - i : i);
        const std::int64_t sj = p.left + (p.flip_h ? 3 - j : j);
        const double code = static_cast<double>(si * 12 + sj);
        CHECK(p.rgb.at({0, i, j}) == code);
        CHECK(p.rgb.at({2, i, j}) == code + 2000.0);
        CHECK(p.aux.at({0, i, j}) == -code);
        CHECK(p.labels.at(0, i, j) == static_cast<std::int32_t>(code));
      }
  }
  CHECK((seen_h > 5 && seen_h < 35));
  CHECK((seen_v > 5 && seen_v < 35));
  CHECK_THROWS_AS(random_crop_flip(t, 11, rng), ShapeError);
}

TEST_CASE("batches stack patches in order") {
  TilePair t = marker_tile(6, 6);
  Rng rng(2);
  std::vector<SamplePatch> ps{random_crop_flip(t, 4, rng), random_crop_flip(t, 4, rng)};
  Batch b = stack_patches(ps);
  CHECK(b.rgb.shape() == Shape{2, 3, 4, 4});
  CHECK(b.aux.shape() == Shape{2, 1, 4, 4});
  CHECK(b.labels.batch == 2);
  CHECK(b.rgb.at({1, 1, 2, 3}) == ps[1].rgb.at({1, 2, 3}));
  CHECK(b.labels.at(1, 3, 0) == ps[1].labels.at(0, 3, 0));
}

TEST_CASE("synthetic tiles are deterministic and follow the class layout") {
  SynthSpec s;
  s.tile_size = 32;
  s.cell = 8;
  auto a = synth_dataset(s, 6, 3, 77);
  auto b = synth_dataset(s, 6, 3, 77);
  auto c = synth_dataset(s, 6, 3, 78);
  REQUIRE(a.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(a[i].rgb == b[i].rgb);
    CHECK(a[i].dsm == b[i].dsm);
    CHECK(a[i].labels == b[i].labels);
    a[i].validate(6);
  }
  CHECK_FALSE(a[0].rgb == c[0].rgb);
  // One class per cell.
  for (std::int64_t ci = 0; ci < 4; ++ci)
    for (std::int64_t cj = 0; cj < 4; ++cj) {
      const auto id = a[0].labels.at(0, ci * 8, cj * 8);
      for (std::int64_t i = 0; i < 8; ++i)
        for (std::int64_t j = 0; j < 8; ++j) CHECK(a[0].labels.at(0, ci * 8 + i, cj * 8 + j) == id);
    }
  for (double v : a[0].rgb.values()) CHECK((v >= 0.0 && v <= 255.0));
}

TEST_CASE("joint mode needs the height raster to separate classes") {
  SynthSpec s;
  s.tile_size = 64;
  s.cell = 16;
  s.pixel_noise = 0.0;
  s.height_noise = 0.0;
  auto tiles = synth_dataset(s, 6, 8, 5);
  // Classes c and c + 3 share a texture and differ in height band.
  double low = 0.0, high = 0.0;
  std::int64_t nl = 0, nh = 0;
  for (const auto& t : tiles) {
    Tensor d = normalize_dsm(t.dsm);
    for (std::int64_t i = 0; i < 64; ++i)
      for (std::int64_t j = 0; j < 64; ++j) {
        const auto y = t.labels.at(0, i, j);
        if (y < 3) low += d.at({0, i, j}), ++nl;
        else high += d.at({0, i, j}), ++nh;
      }
  }
  CHECK(high / static_cast<double>(nh) > low / static_cast<double>(nl));
}

TEST_CASE("raster files round-trip") {
  const auto dir = testutil::temp_dir("data_io");
  Rng rng(3);
  Tensor rgb({3, 5, 7});
  for (auto& v : rgb.values()) v = static_cast<double>(rng.integer(0, 255));
  write_ppm(dir / "a.ppm", rgb);
  CHECK(read_ppm(dir / "a.ppm") == rgb);

  Tensor g16({1, 4, 3});
  for (auto& v : g16.values()) v = static_cast<double>(rng.integer(0, 65535));
  write_pgm(dir / "a.pgm", g16, 65535);
  CHECK(read_pgm(dir / "a.pgm") == g16);

  Tensor dsm = random_tensor({2, 3, 4}, rng, -50, 300);
  write_dsm_f32(dir / "a.dsm.f32", dsm);
  Tensor back = read_dsm_f32(dir / "a.dsm.f32");
  for (std::int64_t i = 0; i < dsm.numel(); ++i) CHECK(back[i] == static_cast<double>(static_cast<float>(dsm[i])));

  std::vector<ClassEntry> classes{{0, "impervious", 255, 255, 255}, {1, "building", 0, 0, 255}};
  write_class_table(dir / "classes.txt", classes);
  auto read = read_class_table(dir / "classes.txt");
  REQUIRE(read.size() == 2);
  CHECK(read[1].name == "building");
  CHECK(read[1].b == 255);

  std::ofstream(dir / "bad.ppm") << "P3\n1 1\n255\n0 0 0\n";
  CHECK_THROWS_AS(read_ppm(dir / "bad.ppm"), FormatError);
  CHECK_THROWS(read_ppm(dir / "missing.ppm"));
}

TEST_CASE("palette labels decode by exact colour only") {
  std::vector<ClassEntry> classes{{0, "a", 255, 0, 0}, {1, "b", 0, 255, 0}};
  Tensor img({3, 1, 2}, std::vector<double>{255, 0, 0, 255, 0, 0});
  LabelMap l = decode_palette(img, classes);
  CHECK(l.ids == std::vector<std::int32_t>{0, 1});
  img.at({0, 0, 1}) = 1.0;
  CHECK_THROWS_AS(decode_palette(img, classes), FormatError);
}

TEST_CASE("splits round-trip through a directory") {
  const auto dir = testutil::temp_dir("split_io");
  SynthSpec s;
  s.tile_size = 16;
  s.cell = 8;
  auto tiles = synth_dataset(s, 6, 2, 9);
  save_split(dir, "train", tiles);
  auto back = load_split(dir, "train", 6);
  REQUIRE(back.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(back[i].rgb == tiles[i].rgb);
    CHECK(back[i].labels == tiles[i].labels);
    for (std::int64_t k = 0; k < tiles[i].dsm.numel(); ++k)
      CHECK(back[i].dsm[k] == static_cast<double>(static_cast<float>(tiles[i].dsm[k])));
  }
  CHECK_THROWS(load_split(dir, "test", 6));
}

TEST_CASE("window origins cover the tile and end flush") {
  CHECK(window_starts(10, 4, 2) == std::vector<std::int64_t>{0, 2, 4, 6});
  CHECK(window_starts(11, 4, 4) == std::vector<std::int64_t>{0, 4, 7});
  CHECK(window_starts(4, 4, 2) == std::vector<std::int64_t>{0});
  CHECK(window_starts(3, 4, 2) == std::vector<std::int64_t>{0});
  CHECK_THROWS_AS(window_starts(10, 4, 5), ConfigError);
  CHECK_THROWS_AS(window_starts(10, 4, 0), ConfigError);
}

TEST_CASE("sliding window averages overlapping predictions") {
  TilePair t = marker_tile(9, 7);
  // Echo the first RGB channel into class 0 and a constant 1 into class 1.
  Predictor echo = [](const Tensor& rgb, const Tensor&) {
    const std::int64_t n = rgb.dim(0), c = rgb.dim(2);
    Tensor out({n, 2, c, c});
    for (std::int64_t k = 0; k < n; ++k)
      for (std::int64_t i = 0; i < c; ++i)
        for (std::int64_t j = 0; j < c; ++j) {
          out.at({k, 0, i, j}) = rgb.at({k, 0, i, j});
          out.at({k, 1, i, j}) = 1.0;
        }
    return out;
  };
  Tensor logits = sliding_window_inference(echo, t, 4, 2, 2);
  CHECK(logits.shape() == Shape{2, 9, 7});
  for (std::int64_t i = 0; i < 9; ++i)
    for (std::int64_t j = 0; j < 7; ++j) {
      CHECK(logits.at({0, i, j}) == doctest::Approx(t.rgb.at({0, i, j})).epsilon(1e-14));
      CHECK(logits.at({1, i, j}) == doctest::Approx(1.0).epsilon(1e-14));
    }
  // Smaller than the crop: zero-padded then cropped.
  TilePair small = marker_tile(3, 2);
  Tensor sl = sliding_window_inference(echo, small, 4, 2, 2);
  CHECK(sl.shape() == Shape{2, 3, 2});
  CHECK(sl.at({0, 2, 1}) == small.rgb.at({0, 2, 1}));
}

TEST_CASE("argmax picks the lowest index on ties") {
  Tensor l({3, 1, 2}, std::vector<double>{1, 0, 1, 5, 0, 5});
  LabelMap m = argmax_labels(l);
  CHECK(m.ids == std::vector<std::int32_t>{0, 1});
}
