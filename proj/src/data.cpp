#include "modalfuse/data.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "modalfuse/errors.hpp"

namespace modalfuse {

namespace fs = std::filesystem;

namespace {

constexpr std::array<double, 3> kImagenetMean{0.485, 0.456, 0.406};
constexpr std::array<double, 3> kImagenetStd{0.229, 0.224, 0.225};
constexpr char kDsmMagic[8] = {'M', 'F', 'D', 'S', 'M', '0', '0', '1'};
constexpr double kBandStep = 10.0;  // metres between height bands
constexpr std::int64_t kWindowBatch = 16;

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

// Reads the next whitespace-delimited header token, skipping '#' comments.
std::string header_token(std::istream& in) {
  std::string tok;
  char c;
  while (in.get(c)) {
    if (c == '#') {
      std::string rest;
      std::getline(in, rest);
      if (!tok.empty()) break;
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(c);
  }
  return tok;
}

struct NetpbmHeader {
  std::int64_t width = 0, height = 0, max_value = 0;
};

NetpbmHeader read_netpbm_header(std::istream& in, const std::string& magic, const fs::path& path) {
  const std::string m = header_token(in);
  if (m != magic) throw FormatError(path.string() + ": expected " + magic + " header, got '" + m + "'");
  NetpbmHeader h;
  try {
    h.width = std::stoll(header_token(in));
    h.height = std::stoll(header_token(in));
    h.max_value = std::stoll(header_token(in));
  } catch (const std::exception&) {
    throw FormatError(path.string() + ": malformed header");
  }
  if (h.width <= 0 || h.height <= 0 || h.max_value <= 0 || h.max_value > 65535) {
    throw FormatError(path.string() + ": invalid dimensions or maximum value");
  }
  return h;
}

std::ifstream open_in(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return in;
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  return out;
}

template <typename T>
void put_le(std::ostream& out, T v) {
  char bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.write(bytes, sizeof(T));
}

template <typename T>
T get_le(std::istream& in, const fs::path& path) {
  char bytes[sizeof(T)];
  if (!in.read(bytes, sizeof(T))) throw FormatError(path.string() + ": truncated");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T v;
  std::memcpy(&v, bytes, sizeof(T));
  return v;
}

std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  const double c = v * s;
  const double hp = h * 6.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  std::array<double, 3> rgb{0, 0, 0};
  switch (static_cast<int>(hp) % 6) {
    case 0: rgb = {c, x, 0}; break;
    case 1: rgb = {x, c, 0}; break;
    case 2: rgb = {0, c, x}; break;
    case 3: rgb = {0, x, c}; break;
    case 4: rgb = {x, 0, c}; break;
    default: rgb = {c, 0, x}; break;
  }
  const double m = v - c;
  return {255.0 * (rgb[0] + m), 255.0 * (rgb[1] + m), 255.0 * (rgb[2] + m)};
}

// Copies a [C, H, W] raster into the (possibly padded) window origin.
void copy_window(const Tensor& src, std::int64_t top, std::int64_t left, std::int64_t crop,
                 double* dst) {
  const std::int64_t C = src.dim(0), H = src.dim(1), W = src.dim(2);
  for (std::int64_t c = 0; c < C; ++c)
    for (std::int64_t i = 0; i < crop; ++i) {
      const std::int64_t si = top + i;
      for (std::int64_t j = 0; j < crop; ++j) {
        const std::int64_t sj = left + j;
        dst[(c * crop + i) * crop + j] = (si < H && sj < W) ? src[(c * H + si) * W + sj] : 0.0;
      }
    }
}

}  // namespace

void TilePair::validate(std::int64_t num_classes) const {
  if (rgb.rank() != 3 || dsm.rank() != 3) {
    throw ShapeError("tile " + tile_id + ": rasters must be [C, H, W]");
  }
  if (rgb.dim(0) != 3) throw ShapeError("tile " + tile_id + ": rgb must have 3 channels");
  if (dsm.dim(1) != rgb.dim(1) || dsm.dim(2) != rgb.dim(2) || labels.height != rgb.dim(1) ||
      labels.width != rgb.dim(2) || labels.batch != 1) {
    throw ShapeError("tile " + tile_id + ": rgb " + shape_str(rgb.shape()) + ", dsm " +
                     shape_str(dsm.shape()) + " and labels " + std::to_string(labels.height) + "x" +
                     std::to_string(labels.width) + " differ in spatial size");
  }
  for (std::size_t i = 0; i < labels.ids.size(); ++i) {
    if (labels.ids[i] < 0 || labels.ids[i] >= num_classes) {
      throw FormatError("tile " + tile_id + ": label " + std::to_string(labels.ids[i]) +
                        " at pixel " + std::to_string(i) + " outside [0, " +
                        std::to_string(num_classes) + ")");
    }
  }
}

BackboneFamily parse_family(const std::string& name) {
  const std::string n = lower(name);
  if (n == "sam") return BackboneFamily::Sam;
  if (n == "dinov2") return BackboneFamily::Dinov2;
  throw ConfigError("backbone.family must be 'sam' or 'dinov2', got '" + name + "'");
}

PixelRange parse_pixel_range(const std::string& name) {
  const std::string n = lower(name);
  if (n == "byte") return PixelRange::Byte;
  if (n == "unit") return PixelRange::Unit;
  throw ConfigError("data.rgb_range must be 'byte' or 'unit', got '" + name + "'");
}

Tensor normalize_dsm(const Tensor& dsm) {
  if (dsm.rank() != 3) throw ShapeError("normalize_dsm: expected [C, H, W]");
  Tensor out = dsm;
  const std::int64_t plane = dsm.dim(1) * dsm.dim(2);
  for (std::int64_t c = 0; c < dsm.dim(0); ++c) {
    double* p = out.ptr() + c * plane;
    const auto [lo, hi] = std::minmax_element(p, p + plane);
    const double mn = *lo, range = *hi - *lo;
    for (std::int64_t i = 0; i < plane; ++i) p[i] = range > 0.0 ? (p[i] - mn) / range : 0.0;
  }
  return out;
}

Tensor normalize_rgb(const Tensor& rgb, BackboneFamily family, PixelRange range) {
  if (rgb.rank() != 3 && rgb.rank() != 4) throw ShapeError("normalize_rgb: expected [(B,) C, H, W]");
  Tensor out = rgb;
  const std::int64_t C = rgb.dim(rgb.rank() - 3);
  const std::int64_t plane = rgb.dim(rgb.rank() - 2) * rgb.dim(rgb.rank() - 1);
  const double scale = range == PixelRange::Byte ? 1.0 / 255.0 : 1.0;
  for (std::int64_t i = 0; i < out.numel(); ++i) {
    double v = out[i] * scale;
    if (family == BackboneFamily::Dinov2) {
      const auto c = static_cast<std::size_t>((i / plane) % C % 3);
      v = (v - kImagenetMean[c]) / kImagenetStd[c];
    }
    out[i] = v;
  }
  return out;
}

Tensor denormalize_rgb(const Tensor& rgb, BackboneFamily family, PixelRange range) {
  if (rgb.rank() != 3 && rgb.rank() != 4) throw ShapeError("denormalize_rgb: expected [(B,) C, H, W]");
  Tensor out = rgb;
  const std::int64_t C = rgb.dim(rgb.rank() - 3);
  const std::int64_t plane = rgb.dim(rgb.rank() - 2) * rgb.dim(rgb.rank() - 1);
  const double scale = range == PixelRange::Byte ? 255.0 : 1.0;
  for (std::int64_t i = 0; i < out.numel(); ++i) {
    double v = out[i];
    if (family == BackboneFamily::Dinov2) {
      const auto c = static_cast<std::size_t>((i / plane) % C % 3);
      v = v * kImagenetStd[c] + kImagenetMean[c];
    }
    out[i] = v * scale;
  }
  return out;
}

TilePair prepare_tile(const TilePair& raw, BackboneFamily family, PixelRange range) {
  return {normalize_rgb(raw.rgb, family, range), normalize_dsm(raw.dsm), raw.labels, raw.tile_id};
}

SamplePatch random_crop_flip(const TilePair& pair, std::int64_t crop, Rng& rng) {
  const std::int64_t H = pair.height(), W = pair.width();
  if (crop < 1 || crop > H || crop > W) {
    throw ShapeError("crop " + std::to_string(crop) + " does not fit tile " + pair.tile_id + " (" +
                     std::to_string(H) + "x" + std::to_string(W) + ")");
  }
  SamplePatch s;
  s.top = rng.integer(0, H - crop);
  s.left = rng.integer(0, W - crop);
  s.flip_h = rng.bernoulli(0.5);
  s.flip_v = rng.bernoulli(0.5);

  auto src_i = [&](std::int64_t i) { return s.top + (s.flip_v ? crop - 1 - i : i); };
  auto src_j = [&](std::int64_t j) { return s.left + (s.flip_h ? crop - 1 - j : j); };
  auto cut = [&](const Tensor& t) {
    const std::int64_t C = t.dim(0);
    Tensor out(Shape{C, crop, crop});
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t i = 0; i < crop; ++i)
        for (std::int64_t j = 0; j < crop; ++j)
          out[(c * crop + i) * crop + j] = t[(c * H + src_i(i)) * W + src_j(j)];
    return out;
  };
  s.rgb = cut(pair.rgb);
  s.aux = cut(pair.dsm);
  s.labels = LabelMap(1, crop, crop);
  for (std::int64_t i = 0; i < crop; ++i)
    for (std::int64_t j = 0; j < crop; ++j) s.labels.at(0, i, j) = pair.labels.at(0, src_i(i), src_j(j));
  return s;
}

Batch stack_patches(const std::vector<SamplePatch>& patches) {
  if (patches.empty()) throw ShapeError("stack_patches: empty batch");
  const auto B = static_cast<std::int64_t>(patches.size());
  const Tensor& r0 = patches[0].rgb;
  const Tensor& a0 = patches[0].aux;
  Batch b;
  b.rgb = Tensor(Shape{B, r0.dim(0), r0.dim(1), r0.dim(2)});
  b.aux = Tensor(Shape{B, a0.dim(0), a0.dim(1), a0.dim(2)});
  b.labels = LabelMap(B, r0.dim(1), r0.dim(2));
  const std::size_t per_label = patches[0].labels.ids.size();
  for (std::int64_t i = 0; i < B; ++i) {
    const auto& p = patches[static_cast<std::size_t>(i)];
    if (p.rgb.shape() != r0.shape() || p.aux.shape() != a0.shape()) {
      throw ShapeError("stack_patches: patches differ in shape");
    }
    std::copy(p.rgb.storage().begin(), p.rgb.storage().end(), b.rgb.ptr() + i * r0.numel());
    std::copy(p.aux.storage().begin(), p.aux.storage().end(), b.aux.ptr() + i * a0.numel());
    std::copy(p.labels.ids.begin(), p.labels.ids.end(),
              b.labels.ids.begin() + static_cast<std::ptrdiff_t>(i * static_cast<std::int64_t>(per_label)));
  }
  return b;
}

SynthMode parse_synth_mode(const std::string& name) {
  const std::string n = lower(name);
  if (n == "joint") return SynthMode::Joint;
  if (n == "rgb_only") return SynthMode::RgbOnly;
  if (n == "aux_only") return SynthMode::AuxOnly;
  throw ConfigError("data.synthetic.mode must be joint, rgb_only or aux_only, got '" + name + "'");
}

std::string synth_mode_name(SynthMode mode) {
  switch (mode) {
    case SynthMode::Joint: return "joint";
    case SynthMode::RgbOnly: return "rgb_only";
    case SynthMode::AuxOnly: return "aux_only";
  }
  return "joint";
}

std::vector<TilePair> synth_dataset(const SynthSpec& spec, std::int64_t num_classes,
                                    std::int64_t count, std::uint64_t seed,
                                    const std::string& id_prefix) {
  if (spec.tile_size < 1 || spec.cell < 1 || count < 0 || spec.aux_channels < 1) {
    throw ConfigError("data.synthetic sizes must be positive");
  }
  if (num_classes < 2) throw ConfigError("model.num_classes must be at least 2");
  std::int64_t textures = num_classes, bands = num_classes;
  if (spec.mode == SynthMode::Joint) {
    if (spec.height_bands < 1 || num_classes % spec.height_bands != 0) {
      throw ConfigError("data.synthetic.height_bands must divide model.num_classes");
    }
    bands = spec.height_bands;
    textures = num_classes / bands;
  }
  std::vector<std::array<double, 3>> palette;
  for (std::int64_t t = 0; t < textures; ++t) {
    palette.push_back(hsv_to_rgb(static_cast<double>(t) / static_cast<double>(textures), 0.6, 0.6));
  }

  Rng rng(seed);
  const std::int64_t S = spec.tile_size;
  const std::int64_t cells = (S + spec.cell - 1) / spec.cell;
  std::vector<TilePair> tiles;
  tiles.reserve(static_cast<std::size_t>(count));
  for (std::int64_t n = 0; n < count; ++n) {
    TilePair t;
    t.tile_id = id_prefix + "_" + std::to_string(n);
    t.rgb = Tensor(Shape{3, S, S});
    t.dsm = Tensor(Shape{spec.aux_channels, S, S});
    t.labels = LabelMap(1, S, S);
    const double ground = rng.uniform(50.0, 150.0);

    const auto ncell = static_cast<std::size_t>(cells * cells);
    std::vector<std::int64_t> cls(ncell), tex(ncell), band(ncell);
    std::vector<double> jitter(ncell);
    for (std::size_t k = 0; k < ncell; ++k) {
      cls[k] = rng.integer(0, num_classes - 1);
      switch (spec.mode) {
        case SynthMode::Joint:
          tex[k] = cls[k] % textures;
          band[k] = cls[k] / textures;
          break;
        case SynthMode::RgbOnly:
          tex[k] = cls[k];
          band[k] = rng.integer(0, bands - 1);
          break;
        case SynthMode::AuxOnly:
          tex[k] = rng.integer(0, textures - 1);
          band[k] = cls[k];
          break;
      }
      jitter[k] = rng.normal(0.0, spec.cue_jitter * 255.0);
    }
    for (std::int64_t i = 0; i < S; ++i)
      for (std::int64_t j = 0; j < S; ++j) {
        const auto k = static_cast<std::size_t>((i / spec.cell) * cells + j / spec.cell);
        t.labels.at(0, i, j) = static_cast<std::int32_t>(cls[k]);
        double shift = 0.0;
        if (spec.mode == SynthMode::Joint && bands > 1) {
          const double rel = static_cast<double>(band[k]) / static_cast<double>(bands - 1) - 0.5;
          shift = rel * spec.rgb_height_cue * 255.0 + jitter[k];
        }
        for (std::int64_t c = 0; c < 3; ++c) {
          const double v = palette[static_cast<std::size_t>(tex[k])][static_cast<std::size_t>(c)] +
                           shift + rng.normal(0.0, spec.pixel_noise * 255.0);
          t.rgb[(c * S + i) * S + j] = std::clamp(std::round(v), 0.0, 255.0);
        }
        for (std::int64_t c = 0; c < spec.aux_channels; ++c) {
          const double h = ground + kBandStep * static_cast<double>(band[k]) +
                           rng.normal(0.0, spec.height_noise * kBandStep);
          t.dsm[(c * S + i) * S + j] = static_cast<double>(static_cast<float>(h));
        }
      }
    tiles.push_back(std::move(t));
  }
  return tiles;
}

std::vector<ClassEntry> read_class_table(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open class table " + path.string());
  std::vector<ClassEntry> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    std::istringstream ss(line);
    ClassEntry e;
    int r, g, b;
    if (!(ss >> e.id)) continue;
    if (!(ss >> e.name >> r >> g >> b) || r < 0 || r > 255 || g < 0 || g > 255 || b < 0 || b > 255) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) +
                        ": expected 'id name r g b' with 8-bit colour components");
    }
    e.r = static_cast<std::uint8_t>(r);
    e.g = static_cast<std::uint8_t>(g);
    e.b = static_cast<std::uint8_t>(b);
    out.push_back(e);
  }
  return out;
}

void write_class_table(const fs::path& path, const std::vector<ClassEntry>& classes) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out << "# id name r g b\n";
  for (const auto& c : classes) {
    out << c.id << ' ' << c.name << ' ' << int(c.r) << ' ' << int(c.g) << ' ' << int(c.b) << '\n';
  }
}

Tensor read_ppm(const fs::path& path) {
  std::ifstream in = open_in(path);
  const NetpbmHeader h = read_netpbm_header(in, "P6", path);
  if (h.max_value > 255) throw FormatError(path.string() + ": only 8-bit PPM is supported");
  std::vector<unsigned char> bytes(static_cast<std::size_t>(3 * h.width * h.height));
  if (!in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()))) {
    throw FormatError(path.string() + ": truncated pixel data");
  }
  Tensor out(Shape{3, h.height, h.width});
  const std::int64_t plane = h.height * h.width;
  for (std::int64_t p = 0; p < plane; ++p)
    for (std::int64_t c = 0; c < 3; ++c) out[c * plane + p] = bytes[static_cast<std::size_t>(3 * p + c)];
  return out;
}

void write_ppm(const fs::path& path, const Tensor& rgb) {
  if (rgb.rank() != 3 || rgb.dim(0) != 3) throw ShapeError("write_ppm: expected [3, H, W]");
  const std::int64_t H = rgb.dim(1), W = rgb.dim(2), plane = H * W;
  std::ofstream out = open_out(path);
  out << "P6\n" << W << ' ' << H << "\n255\n";
  std::vector<unsigned char> bytes(static_cast<std::size_t>(3 * plane));
  for (std::int64_t p = 0; p < plane; ++p)
    for (std::int64_t c = 0; c < 3; ++c) {
      const double v = rgb[c * plane + p];
      if (v < 0.0 || v > 255.0 || v != std::round(v)) {
        throw FormatError("write_ppm: value " + std::to_string(v) + " is not an 8-bit sample");
      }
      bytes[static_cast<std::size_t>(3 * p + c)] = static_cast<unsigned char>(v);
    }
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Tensor read_pgm(const fs::path& path) {
  std::ifstream in = open_in(path);
  const NetpbmHeader h = read_netpbm_header(in, "P5", path);
  const std::int64_t plane = h.width * h.height;
  Tensor out(Shape{1, h.height, h.width});
  if (h.max_value <= 255) {
    std::vector<unsigned char> bytes(static_cast<std::size_t>(plane));
    if (!in.read(reinterpret_cast<char*>(bytes.data()), plane)) {
      throw FormatError(path.string() + ": truncated pixel data");
    }
    for (std::int64_t p = 0; p < plane; ++p) out[p] = bytes[static_cast<std::size_t>(p)];
  } else {
    std::vector<unsigned char> bytes(static_cast<std::size_t>(2 * plane));
    if (!in.read(reinterpret_cast<char*>(bytes.data()), 2 * plane)) {
      throw FormatError(path.string() + ": truncated pixel data");
    }
    // Netpbm stores 16-bit samples big-endian.
    for (std::int64_t p = 0; p < plane; ++p) {
      out[p] = static_cast<double>((bytes[static_cast<std::size_t>(2 * p)] << 8) |
                                   bytes[static_cast<std::size_t>(2 * p + 1)]);
    }
  }
  return out;
}

void write_pgm(const fs::path& path, const Tensor& gray, int max_value) {
  if (gray.rank() != 3 || gray.dim(0) != 1) throw ShapeError("write_pgm: expected [1, H, W]");
  if (max_value < 1 || max_value > 65535) throw FormatError("write_pgm: invalid maximum value");
  const std::int64_t H = gray.dim(1), W = gray.dim(2), plane = H * W;
  std::ofstream out = open_out(path);
  out << "P5\n" << W << ' ' << H << '\n' << max_value << '\n';
  const bool wide = max_value > 255;
  std::vector<unsigned char> bytes(static_cast<std::size_t>((wide ? 2 : 1) * plane));
  for (std::int64_t p = 0; p < plane; ++p) {
    const double v = gray[p];
    if (v < 0.0 || v > max_value || v != std::round(v)) {
      throw FormatError("write_pgm: value " + std::to_string(v) + " out of range");
    }
    const auto u = static_cast<unsigned>(v);
    if (wide) {
      bytes[static_cast<std::size_t>(2 * p)] = static_cast<unsigned char>(u >> 8);
      bytes[static_cast<std::size_t>(2 * p + 1)] = static_cast<unsigned char>(u & 0xFF);
    } else {
      bytes[static_cast<std::size_t>(p)] = static_cast<unsigned char>(u);
    }
  }
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Tensor read_dsm_f32(const fs::path& path) {
  std::ifstream in = open_in(path);
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kDsmMagic, 8) != 0) {
    throw FormatError(path.string() + ": not a float DSM file");
  }
  const auto C = get_le<std::uint32_t>(in, path);
  const auto H = get_le<std::uint32_t>(in, path);
  const auto W = get_le<std::uint32_t>(in, path);
  if (C == 0 || H == 0 || W == 0) throw FormatError(path.string() + ": empty raster");
  Tensor out(Shape{C, H, W});
  for (std::int64_t i = 0; i < out.numel(); ++i) {
    out[i] = std::bit_cast<float>(get_le<std::uint32_t>(in, path));
  }
  return out;
}

void write_dsm_f32(const fs::path& path, const Tensor& dsm) {
  if (dsm.rank() != 3) throw ShapeError("write_dsm_f32: expected [C, H, W]");
  std::ofstream out = open_out(path);
  out.write(kDsmMagic, 8);
  put_le(out, static_cast<std::uint32_t>(dsm.dim(0)));
  put_le(out, static_cast<std::uint32_t>(dsm.dim(1)));
  put_le(out, static_cast<std::uint32_t>(dsm.dim(2)));
  for (std::int64_t i = 0; i < dsm.numel(); ++i) {
    put_le(out, std::bit_cast<std::uint32_t>(static_cast<float>(dsm[i])));
  }
}

LabelMap decode_palette(const Tensor& rgb, const std::vector<ClassEntry>& classes) {
  if (rgb.rank() != 3 || rgb.dim(0) != 3) throw ShapeError("decode_palette: expected [3, H, W]");
  const std::int64_t H = rgb.dim(1), W = rgb.dim(2), plane = H * W;
  LabelMap out(1, H, W);
  for (std::int64_t p = 0; p < plane; ++p) {
    const double r = rgb[p], g = rgb[plane + p], b = rgb[2 * plane + p];
    auto it = std::find_if(classes.begin(), classes.end(), [&](const ClassEntry& e) {
      return e.r == r && e.g == g && e.b == b;
    });
    if (it == classes.end()) {
      throw FormatError("label colour (" + std::to_string(int(r)) + ", " + std::to_string(int(g)) +
                        ", " + std::to_string(int(b)) + ") at row " + std::to_string(p / W) +
                        ", column " + std::to_string(p % W) + " is not in the class table");
    }
    out.ids[static_cast<std::size_t>(p)] = it->id;
  }
  return out;
}

std::vector<TilePair> load_split(const fs::path& root, const std::string& split,
                                 std::int64_t num_classes) {
  const fs::path dir = root / split;
  if (!fs::is_directory(dir)) throw ConfigError("data.root: missing directory " + dir.string());
  std::vector<std::string> ids;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (ends_with(name, ".rgb.ppm")) ids.push_back(name.substr(0, name.size() - 8));
  }
  std::sort(ids.begin(), ids.end());
  if (ids.empty()) throw ConfigError("data.root: no *.rgb.ppm tiles in " + dir.string());

  std::vector<ClassEntry> classes;
  bool have_classes = false;
  std::vector<TilePair> tiles;
  for (const auto& id : ids) {
    TilePair t;
    t.tile_id = id;
    t.rgb = read_ppm(dir / (id + ".rgb.ppm"));
    if (fs::exists(dir / (id + ".dsm.f32"))) {
      t.dsm = read_dsm_f32(dir / (id + ".dsm.f32"));
    } else if (fs::exists(dir / (id + ".dsm.pgm"))) {
      t.dsm = read_pgm(dir / (id + ".dsm.pgm"));
    } else {
      throw FormatError("tile " + id + ": no .dsm.f32 or .dsm.pgm file");
    }
    if (fs::exists(dir / (id + ".labels.pgm"))) {
      Tensor raw = read_pgm(dir / (id + ".labels.pgm"));
      t.labels = LabelMap(1, raw.dim(1), raw.dim(2));
      for (std::int64_t i = 0; i < raw.numel(); ++i) {
        t.labels.ids[static_cast<std::size_t>(i)] = static_cast<std::int32_t>(raw[i]);
      }
    } else if (fs::exists(dir / (id + ".labels.ppm"))) {
      if (!have_classes) {
        classes = read_class_table(root / "classes.txt");
        have_classes = true;
      }
      t.labels = decode_palette(read_ppm(dir / (id + ".labels.ppm")), classes);
    } else {
      throw FormatError("tile " + id + ": no .labels.pgm or .labels.ppm file");
    }
    t.validate(num_classes);
    tiles.push_back(std::move(t));
  }
  return tiles;
}

void save_split(const fs::path& root, const std::string& split, const std::vector<TilePair>& tiles) {
  const fs::path dir = root / split;
  fs::create_directories(dir);
  for (const auto& t : tiles) {
    write_ppm(dir / (t.tile_id + ".rgb.ppm"), t.rgb);
    write_dsm_f32(dir / (t.tile_id + ".dsm.f32"), t.dsm);
    Tensor labels(Shape{1, t.labels.height, t.labels.width});
    for (std::int64_t i = 0; i < labels.numel(); ++i) labels[i] = t.labels.ids[static_cast<std::size_t>(i)];
    write_pgm(dir / (t.tile_id + ".labels.pgm"), labels, 255);
  }
}

std::vector<std::int64_t> window_starts(std::int64_t size, std::int64_t crop, std::int64_t stride) {
  if (crop < 1 || stride < 1 || stride > crop) {
    throw ConfigError("sliding window needs 1 <= eval.stride <= crop");
  }
  if (size <= crop) return {0};
  std::vector<std::int64_t> starts;
  for (std::int64_t s = 0; s + crop < size; s += stride) starts.push_back(s);
  starts.push_back(size - crop);
  return starts;
}

Tensor sliding_window_inference(const Predictor& predictor, const TilePair& tile,
                                std::int64_t crop, std::int64_t stride, std::int64_t num_classes) {
  const std::int64_t H = tile.height(), W = tile.width();
  const std::int64_t Crgb = tile.rgb.dim(0), Caux = tile.dsm.dim(0);
  const auto rows = window_starts(H, crop, stride);
  const auto cols = window_starts(W, crop, stride);
  std::vector<std::pair<std::int64_t, std::int64_t>> windows;
  for (auto r : rows)
    for (auto c : cols) windows.emplace_back(r, c);

  Tensor sum(Shape{num_classes, H, W});
  std::vector<std::int64_t> hits(static_cast<std::size_t>(H * W), 0);
  for (std::size_t first = 0; first < windows.size(); first += kWindowBatch) {
    const auto n = static_cast<std::int64_t>(std::min<std::size_t>(kWindowBatch, windows.size() - first));
    Tensor rgb(Shape{n, Crgb, crop, crop});
    Tensor aux(Shape{n, Caux, crop, crop});
    for (std::int64_t k = 0; k < n; ++k) {
      const auto [top, left] = windows[first + static_cast<std::size_t>(k)];
      copy_window(tile.rgb, top, left, crop, rgb.ptr() + k * Crgb * crop * crop);
      copy_window(tile.dsm, top, left, crop, aux.ptr() + k * Caux * crop * crop);
    }
    const Tensor logits = predictor(rgb, aux);
    if (logits.shape() != Shape{n, num_classes, crop, crop}) {
      throw ShapeError("sliding window: predictor returned " + shape_str(logits.shape()));
    }
    for (std::int64_t k = 0; k < n; ++k) {
      const auto [top, left] = windows[first + static_cast<std::size_t>(k)];
      const std::int64_t h = std::min(crop, H - top), w = std::min(crop, W - left);
      for (std::int64_t c = 0; c < num_classes; ++c)
        for (std::int64_t i = 0; i < h; ++i)
          for (std::int64_t j = 0; j < w; ++j) {
            sum[(c * H + top + i) * W + left + j] += logits[((k * num_classes + c) * crop + i) * crop + j];
          }
      for (std::int64_t i = 0; i < h; ++i)
        for (std::int64_t j = 0; j < w; ++j) ++hits[static_cast<std::size_t>((top + i) * W + left + j)];
    }
  }
  for (std::int64_t c = 0; c < num_classes; ++c)
    for (std::int64_t p = 0; p < H * W; ++p) sum[c * H * W + p] /= static_cast<double>(hits[static_cast<std::size_t>(p)]);
  return sum;
}

LabelMap argmax_labels(const Tensor& logits) {
  if (logits.rank() != 3) throw ShapeError("argmax_labels: expected [K, H, W]");
  const std::int64_t K = logits.dim(0), H = logits.dim(1), W = logits.dim(2), P = H * W;
  LabelMap out(1, H, W);
  for (std::int64_t p = 0; p < P; ++p) {
    std::int64_t best = 0;
    for (std::int64_t k = 1; k < K; ++k) {
      if (logits[k * P + p] > logits[best * P + p]) best = k;
    }
    out.ids[static_cast<std::size_t>(p)] = static_cast<std::int32_t>(best);
  }
  return out;
}

}  // namespace modalfuse
