#pragma once

#include <array>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "dmpo/tensor.hpp"

namespace dmpo {

// ---------------------------------------------------------------------------
// Dataset container: 8-bit images plus integer labels.
// ---------------------------------------------------------------------------

struct Dataset {
  std::vector<std::uint8_t> images;  // [count, side, side, channels] row-major
  std::vector<int> labels;
  std::int64_t side = 0;
  std::int64_t channels = 1;
  int num_classes = 0;
  std::string provenance;

  std::int64_t count() const { return static_cast<std::int64_t>(labels.size()); }
  std::int64_t image_bytes() const { return side * side * channels; }

  const std::uint8_t* image(std::int64_t i) const { return images.data() + i * image_bytes(); }
};

// ---------------------------------------------------------------------------
// Synthetic task. Each class is a (coarse texture, fine glyph) pair:
// label = glyph_count * texture_index + glyph_index. Textures are low
// frequency patterns readable from coarse features; the 6x6 glyph is the fine
// cue that rewards deeper processing.
// ---------------------------------------------------------------------------

struct SyntheticSpec {
  int base_textures = 4;  // K_b
  int glyphs = 4;         // K_g
  std::int64_t image_side = 32;
  double contrast_lo = 0.55;
  double contrast_hi = 1.0;
  double noise_level = 0.08;
  std::int64_t sample_count = 1000;
  std::uint64_t seed = 1;

  int num_classes() const { return base_textures * glyphs; }

  void validate() const {
    if (base_textures < 2 || glyphs < 2)
      throw ConfigError("synthetic spec requires base_textures >= 2 and glyphs >= 2");
    if (glyphs > 16) throw ConfigError("synthetic spec supports at most 16 glyphs");
    if (image_side < 8) throw ConfigError("synthetic image side must be >= 8");
    if (contrast_lo > contrast_hi || contrast_lo < 0.0)
      throw ConfigError("synthetic contrast range invalid");
    if (noise_level < 0.0) throw ConfigError("synthetic noise level must be >= 0");
    if (sample_count < 1) throw ConfigError("synthetic sample count must be >= 1");
  }
};

namespace detail {

// 6x6 glyph stamps; '#' marks a lit cell.
inline const std::array<std::array<const char*, 6>, 16>& glyph_table() {
  static const std::array<std::array<const char*, 6>, 16> g = {{
      {"######", "#....#", "#....#", "#....#", "#....#", "######"},  // ring
      {"#....#", ".#..#.", "..##..", "..##..", ".#..#.", "#....#"},  // X
      {"..##..", "..##..", "######", "######", "..##..", "..##.."},  // plus
      {"#.....", "##....", ".##...", "..##..", "...##.", "....##"},  // slash
      {"######", "......", "######", "......", "######", "......"},  // bars
      {"#.#.#.", ".#.#.#", "#.#.#.", ".#.#.#", "#.#.#.", ".#.#.#"},  // checker
      {"######", "#.....", "#.....", "#.....", "#.....", "#....."},  // corner
      {"..##..", ".####.", "######", "######", ".####.", "..##.."},  // blob
      {"#....#", "#....#", "#....#", "#....#", "#....#", "######"},  // U
      {"######", "...#..", "..#...", ".#....", "#.....", "######"},  // Z
      {"#.#.#.", "#.#.#.", "#.#.#.", "#.#.#.", "#.#.#.", "#.#.#."},  // stripes
      {"......", ".####.", ".#..#.", ".#..#.", ".####.", "......"},  // box
      {"###...", "###...", "###...", "...###", "...###", "...###"},  // diag blocks
      {"..#...", ".###..", "#####.", ".###..", "..#...", "......"},  // diamond
      {"#####.", "#.....", "####..", "#.....", "#.....", "#....."},  // F
      {"......", "..##..", ".#..#.", ".#..#.", "..##..", "......"},  // o
  }};
  return g;
}

struct TextureParams {
  double angle1, freq1, phase1;
  double angle2, freq2, phase2;
};

inline TextureParams texture_params(std::uint64_t seed, int texture_index) {
  SplitMix64 r(sub_seed(sub_seed(seed, hash64("texture")), static_cast<std::uint64_t>(texture_index)));
  TextureParams p{};
  p.angle1 = r.next_unit() * 3.141592653589793;
  p.freq1 = 1.0 + std::floor(r.next_unit() * 3.0);
  p.phase1 = r.next_unit() * 6.283185307179586;
  p.angle2 = r.next_unit() * 3.141592653589793;
  p.freq2 = 2.0 + std::floor(r.next_unit() * 3.0);
  p.phase2 = r.next_unit() * 6.283185307179586;
  return p;
}

inline double texture_value(const TextureParams& p, double x, double y, double side) {
  const double two_pi = 6.283185307179586;
  double a = std::sin(two_pi * p.freq1 * (std::cos(p.angle1) * x + std::sin(p.angle1) * y) / side + p.phase1);
  double b = std::sin(two_pi * p.freq2 * (std::cos(p.angle2) * x + std::sin(p.angle2) * y) / side + p.phase2);
  return 0.5 + 0.25 * a + 0.25 * b;
}

constexpr double kGlyphValue = 1.0;   // glyph cells are the unique brightness extreme
constexpr double kTextureCeil = 0.7;  // textures stay below the glyph band
constexpr std::int64_t kGlyphSide = 6;

}  // namespace detail

// Pure function of (spec, seed): any sample is reconstructible on its own
// from splitmix64 streams keyed by (seed, sample index). Disjoint splits of
// one task come from the same seed with different first_index ranges, so
// textures are shared while samples never repeat.
inline Dataset generate_synthetic(const SyntheticSpec& spec, std::int64_t first_index = 0) {
  spec.validate();
  Dataset ds;
  ds.side = spec.image_side;
  ds.channels = 1;
  ds.num_classes = spec.num_classes();
  ds.images.resize(static_cast<std::size_t>(spec.sample_count * spec.image_side * spec.image_side));
  ds.labels.resize(static_cast<std::size_t>(spec.sample_count));
  ds.provenance = "synthetic(seed=" + std::to_string(spec.seed) + ",first=" + std::to_string(first_index) + ")";

  std::vector<detail::TextureParams> textures;
  textures.reserve(static_cast<std::size_t>(spec.base_textures));
  for (int t = 0; t < spec.base_textures; ++t)
    textures.push_back(detail::texture_params(spec.seed, t));

  const std::int64_t side = spec.image_side;
  const std::int64_t pos_range = side - detail::kGlyphSide + 1;
  const auto& glyphs = detail::glyph_table();

  for (std::int64_t i = 0; i < spec.sample_count; ++i) {
    SplitMix64 r(sub_seed(spec.seed, static_cast<std::uint64_t>(first_index + i)));
    // draw order: label, contrast, gx, gy, then per-pixel noise row-major
    const int label = static_cast<int>(r.next_below(static_cast<std::uint64_t>(ds.num_classes)));
    const double contrast = r.next_range(spec.contrast_lo, spec.contrast_hi);
    const std::int64_t gx = static_cast<std::int64_t>(r.next_below(static_cast<std::uint64_t>(pos_range)));
    const std::int64_t gy = static_cast<std::int64_t>(r.next_below(static_cast<std::uint64_t>(pos_range)));
    const int tex_idx = label / spec.glyphs;
    const int glyph_idx = label % spec.glyphs;
    ds.labels[static_cast<std::size_t>(i)] = label;
    std::uint8_t* img = ds.images.data() + i * side * side;
    for (std::int64_t y = 0; y < side; ++y)
      for (std::int64_t x = 0; x < side; ++x) {
        double v = detail::kTextureCeil * contrast *
                   detail::texture_value(textures[static_cast<std::size_t>(tex_idx)],
                                         static_cast<double>(x), static_cast<double>(y),
                                         static_cast<double>(side));
        if (y >= gy && y < gy + detail::kGlyphSide && x >= gx && x < gx + detail::kGlyphSide) {
          if (glyphs[static_cast<std::size_t>(glyph_idx)][static_cast<std::size_t>(y - gy)][x - gx] == '#')
            v = detail::kGlyphValue;
        }
        v += (r.next_unit() * 2.0 - 1.0) * spec.noise_level;
        if (v < 0.0) v = 0.0;
        if (v > 1.0) v = 1.0;
        img[y * side + x] = static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// IDX container (big-endian): magic 0x00000803 + [count, rows, cols] + bytes
// for images, magic 0x00000801 + [count] + bytes for labels.
// ---------------------------------------------------------------------------

namespace detail {

inline void write_be32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

struct ByteReader {
  std::vector<unsigned char> bytes;
  std::uint64_t pos = 0;
  std::string name;

  std::uint32_t read_be32(const char* what) {
    if (pos + 4 > bytes.size())
      throw ParseError(name + ": truncated while reading " + std::string(what), pos);
    std::uint32_t v = (std::uint32_t(bytes[pos]) << 24) | (std::uint32_t(bytes[pos + 1]) << 16) |
                      (std::uint32_t(bytes[pos + 2]) << 8) | std::uint32_t(bytes[pos + 3]);
    pos += 4;
    return v;
  }

  const unsigned char* read_payload(std::uint64_t n, const char* what) {
    if (pos + n > bytes.size())
      throw ParseError(name + ": truncated " + std::string(what) + " payload, need " +
                           std::to_string(n) + " bytes, have " + std::to_string(bytes.size() - pos),
                       pos);
    const unsigned char* p = bytes.data() + pos;
    pos += n;
    return p;
  }

  void expect_end() {
    if (pos != bytes.size())
      throw ParseError(name + ": " + std::to_string(bytes.size() - pos) + " trailing bytes", pos);
  }
};

inline ByteReader slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  ByteReader r;
  r.name = path;
  r.bytes.assign(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
  return r;
}

}  // namespace detail

inline void save_idx(const Dataset& ds, const std::string& images_path,
                     const std::string& labels_path) {
  if (ds.channels != 1) throw ConfigError("IDX export supports single-channel images only");
  {
    std::ofstream f(images_path, std::ios::binary);
    if (!f) throw IoError("cannot write " + images_path);
    detail::write_be32(f, 0x00000803u);
    detail::write_be32(f, static_cast<std::uint32_t>(ds.count()));
    detail::write_be32(f, static_cast<std::uint32_t>(ds.side));
    detail::write_be32(f, static_cast<std::uint32_t>(ds.side));
    f.write(reinterpret_cast<const char*>(ds.images.data()),
            static_cast<std::streamsize>(ds.images.size()));
  }
  {
    std::ofstream f(labels_path, std::ios::binary);
    if (!f) throw IoError("cannot write " + labels_path);
    detail::write_be32(f, 0x00000801u);
    detail::write_be32(f, static_cast<std::uint32_t>(ds.count()));
    for (int v : ds.labels) f.put(static_cast<char>(static_cast<unsigned char>(v)));
  }
}

inline Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  auto ir = detail::slurp(images_path);
  const std::uint64_t magic_off = ir.pos;
  const std::uint32_t magic = ir.read_be32("images magic");
  if (magic != 0x00000803u)
    throw ParseError(images_path + ": bad images magic 0x" + [&] {
      char buf[16];
      std::snprintf(buf, sizeof buf, "%08X", magic);
      return std::string(buf);
    }() + ", want 0x00000803", magic_off);
  const std::uint32_t count = ir.read_be32("image count");
  const std::uint32_t rows = ir.read_be32("rows");
  const std::uint32_t cols = ir.read_be32("cols");
  if (rows != cols) throw ParseError(images_path + ": non-square images unsupported", 8);
  const std::uint64_t payload = std::uint64_t(count) * rows * cols;
  const unsigned char* px = ir.read_payload(payload, "image");
  ir.expect_end();

  auto lr = detail::slurp(labels_path);
  const std::uint64_t lmagic_off = lr.pos;
  const std::uint32_t lmagic = lr.read_be32("labels magic");
  if (lmagic != 0x00000801u)
    throw ParseError(labels_path + ": bad labels magic, want 0x00000801", lmagic_off);
  const std::uint32_t lcount = lr.read_be32("label count");
  if (lcount != count)
    throw ParseError(labels_path + ": label count " + std::to_string(lcount) +
                         " does not match image count " + std::to_string(count),
                     4);
  const unsigned char* pl = lr.read_payload(lcount, "label");
  lr.expect_end();

  Dataset ds;
  ds.side = rows;
  ds.channels = 1;
  ds.images.assign(px, px + payload);
  ds.labels.resize(count);
  int max_label = 0;
  for (std::uint32_t i = 0; i < count; ++i) {
    ds.labels[i] = pl[i];
    max_label = std::max(max_label, ds.labels[i]);
  }
  ds.num_classes = max_label + 1;
  ds.provenance = "idx(" + images_path + ")";
  return ds;
}

// ---------------------------------------------------------------------------
// Splitting and batching
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<std::int64_t> seeded_permutation(std::int64_t n, std::uint64_t seed) {
  std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
  SplitMix64 r(seed);
  for (std::int64_t i = n - 1; i > 0; --i) {
    const std::int64_t j = static_cast<std::int64_t>(r.next_below(static_cast<std::uint64_t>(i + 1)));
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
  }
  return idx;
}

inline Dataset take(const Dataset& ds, const std::vector<std::int64_t>& idx, std::int64_t lo,
                    std::int64_t hi) {
  Dataset out;
  out.side = ds.side;
  out.channels = ds.channels;
  out.num_classes = ds.num_classes;
  out.provenance = ds.provenance + "/slice";
  const std::int64_t ib = ds.image_bytes();
  out.images.resize(static_cast<std::size_t>((hi - lo) * ib));
  out.labels.resize(static_cast<std::size_t>(hi - lo));
  for (std::int64_t k = lo; k < hi; ++k) {
    const std::int64_t src = idx[static_cast<std::size_t>(k)];
    std::copy_n(ds.image(src), ib, out.images.data() + (k - lo) * ib);
    out.labels[static_cast<std::size_t>(k - lo)] = ds.labels[static_cast<std::size_t>(src)];
  }
  return out;
}

}  // namespace detail

// Seeded permutation followed by contiguous slices. Slice sizes are
// llround(fraction * count), then decremented from the last nonempty slice
// if rounding overshoots the total.
inline std::vector<Dataset> split(const Dataset& ds, const std::vector<double>& fractions,
                                  std::uint64_t seed) {
  double sum = 0.0;
  for (double f : fractions) {
    if (f <= 0.0) throw ConfigError("split fractions must be positive");
    sum += f;
  }
  if (sum > 1.0 + 1e-9) throw ConfigError("split fractions sum to " + std::to_string(sum) + " > 1");
  const std::int64_t n = ds.count();
  std::vector<std::int64_t> sizes;
  std::int64_t total = 0;
  for (double f : fractions) {
    std::int64_t s = std::llround(f * static_cast<double>(n));
    sizes.push_back(s);
    total += s;
  }
  while (total > n) {
    for (auto it = sizes.rbegin(); it != sizes.rend(); ++it)
      if (*it > 0) {
        --*it;
        --total;
        break;
      }
  }
  auto idx = detail::seeded_permutation(n, seed);
  std::vector<Dataset> out;
  std::int64_t off = 0;
  for (std::int64_t s : sizes) {
    out.push_back(detail::take(ds, idx, off, off + s));
    off += s;
  }
  return out;
}

// Per-epoch seeded shuffle into index batches; the final partial batch is
// kept. Pure function of (seed, epoch).
inline std::vector<std::vector<std::int64_t>> batches(const Dataset& ds, std::int64_t batch_size,
                                                      std::uint64_t seed, std::int64_t epoch) {
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  auto idx = detail::seeded_permutation(ds.count(), sub_seed(seed, static_cast<std::uint64_t>(epoch)));
  std::vector<std::vector<std::int64_t>> out;
  for (std::int64_t off = 0; off < ds.count(); off += batch_size) {
    const std::int64_t hi = std::min(off + batch_size, ds.count());
    out.emplace_back(idx.begin() + off, idx.begin() + hi);
  }
  return out;
}

// Images normalized to [0,1] as a [B, side, side, channels] tensor.
inline Tensor batch_images(const Dataset& ds, const std::vector<std::int64_t>& indices) {
  const std::int64_t ib = ds.image_bytes();
  Tensor t = Tensor::uninitialized({static_cast<std::int64_t>(indices.size()), ds.side, ds.side, ds.channels});
  double* p = t.data();
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const std::uint8_t* img = ds.image(indices[k]);
    for (std::int64_t i = 0; i < ib; ++i) p[static_cast<std::int64_t>(k) * ib + i] = img[i] / 255.0;
  }
  return t;
}

inline std::vector<int> batch_labels(const Dataset& ds, const std::vector<std::int64_t>& indices) {
  std::vector<int> out(indices.size());
  for (std::size_t k = 0; k < indices.size(); ++k) out[k] = ds.labels[static_cast<std::size_t>(indices[k])];
  return out;
}

}  // namespace dmpo
