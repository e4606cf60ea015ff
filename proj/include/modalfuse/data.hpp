#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "modalfuse/labels.hpp"
#include "modalfuse/rng.hpp"
#include "modalfuse/tensor.hpp"

namespace modalfuse {

/// One co-registered tile: rgb [3, H, W], dsm [C_a, H, W], labels [1, H, W].
struct TilePair {
  Tensor rgb;
  Tensor dsm;
  LabelMap labels;
  std::string tile_id;

  std::int64_t height() const { return rgb.dim(1); }
  std::int64_t width() const { return rgb.dim(2); }
  /// Throws ShapeError unless all three rasters share spatial dims.
  void validate(std::int64_t num_classes) const;
};

enum class BackboneFamily { Sam, Dinov2 };
enum class PixelRange { Byte, Unit };

BackboneFamily parse_family(const std::string& name);
PixelRange parse_pixel_range(const std::string& name);

/// Per-tile, per-band min-max to [0, 1]; a constant band becomes zeros.
Tensor normalize_dsm(const Tensor& dsm);
/// Scales to [0, 1]; the dinov2 family additionally standardises each channel
/// with the ImageNet mean and deviation.
Tensor normalize_rgb(const Tensor& rgb, BackboneFamily family, PixelRange range);
Tensor denormalize_rgb(const Tensor& rgb, BackboneFamily family, PixelRange range);

/// Normalises both modalities of a raw tile.
TilePair prepare_tile(const TilePair& raw, BackboneFamily family, PixelRange range);

struct SamplePatch {
  Tensor rgb;  // [3, crop, crop]
  Tensor aux;  // [C_a, crop, crop]
  LabelMap labels;
  std::int64_t top = 0;
  std::int64_t left = 0;
  bool flip_h = false;  // mirror left-right
  bool flip_v = false;  // mirror top-bottom
};

/// Uniform crop window plus independent Bernoulli(0.5) horizontal and vertical
/// flips, applied identically to all rasters.
SamplePatch random_crop_flip(const TilePair& pair, std::int64_t crop, Rng& rng);

struct Batch {
  Tensor rgb;  // [B, 3, H, W]
  Tensor aux;  // [B, C_a, H, W]
  LabelMap labels;
};

Batch stack_patches(const std::vector<SamplePatch>& patches);

enum class SynthMode { Joint, RgbOnly, AuxOnly };
SynthMode parse_synth_mode(const std::string& name);
std::string synth_mode_name(SynthMode mode);

/// Generator for tiles whose labels depend on declared modalities. Each
/// cell x cell block carries one class. In joint mode a class c has texture
/// c % T and height band c / T with T = num_classes / height_bands; the RGB
/// brightness also carries a weak, cell-jittered hint of the band.
struct SynthSpec {
  std::int64_t tile_size = 64;
  std::int64_t cell = 16;
  std::int64_t height_bands = 2;
  SynthMode mode = SynthMode::Joint;
  double pixel_noise = 0.06;     // per-pixel RGB noise, fraction of 255
  double height_noise = 0.05;    // per-pixel DSM noise, fraction of a band step
  double rgb_height_cue = 0.16;  // RGB brightness offset between extreme bands, fraction of 255
  double cue_jitter = 0.08;      // per-cell brightness jitter, fraction of 255
  std::int64_t aux_channels = 1;
};

/// Raw tiles (RGB in [0, 255], DSM in metres). Byte-identical for a seed.
std::vector<TilePair> synth_dataset(const SynthSpec& spec, std::int64_t num_classes,
                                    std::int64_t count, std::uint64_t seed,
                                    const std::string& id_prefix = "tile");

// Directory layout: <root>/<split>/<id>.rgb.ppm, <id>.dsm.{f32,pgm},
// <id>.labels.{pgm,ppm}; <root>/classes.txt with "id name r g b" lines.

struct ClassEntry {
  std::int32_t id = 0;
  std::string name;
  std::uint8_t r = 0, g = 0, b = 0;
};

std::vector<ClassEntry> read_class_table(const std::filesystem::path& path);
void write_class_table(const std::filesystem::path& path, const std::vector<ClassEntry>& classes);

/// 8-bit binary PPM (P6) to [3, H, W] in [0, 255].
Tensor read_ppm(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const Tensor& rgb);
/// 8- or 16-bit binary PGM (P5) to [1, H, W] of raw sample values.
Tensor read_pgm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const Tensor& gray, int max_value);

/// Planar float DSM: "MFDSM001", u32 channels, u32 height, u32 width, then
/// channels*height*width little-endian f32 values.
Tensor read_dsm_f32(const std::filesystem::path& path);
void write_dsm_f32(const std::filesystem::path& path, const Tensor& dsm);

/// Palette labels decode by exact colour match only.
LabelMap decode_palette(const Tensor& rgb, const std::vector<ClassEntry>& classes);

std::vector<TilePair> load_split(const std::filesystem::path& root, const std::string& split,
                                 std::int64_t num_classes);
/// Writes tiles with id-valued PGM labels and f32 DSMs.
void save_split(const std::filesystem::path& root, const std::string& split,
                const std::vector<TilePair>& tiles);

/// Window origins along one axis: 0, stride, ... with the last window shifted
/// inward to end at size. A size below crop yields the single origin 0.
std::vector<std::int64_t> window_starts(std::int64_t size, std::int64_t crop, std::int64_t stride);

/// Maps normalised [B, 3, c, c] and [B, C_a, c, c] batches to logits [B, K, c, c].
using Predictor = std::function<Tensor(const Tensor& rgb, const Tensor& aux)>;

/// Full-tile logits [K, H, W] averaged over overlapping windows. Tiles smaller
/// than the crop are zero-padded and the padding is cropped from the output.
Tensor sliding_window_inference(const Predictor& predictor, const TilePair& tile,
                                std::int64_t crop, std::int64_t stride, std::int64_t num_classes);

/// Per-pixel argmax over [K, H, W] (lowest index on ties).
LabelMap argmax_labels(const Tensor& logits);

}  // namespace modalfuse
