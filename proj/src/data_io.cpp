#include "celldiff/data_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <zlib.h>

#include "celldiff/rng.hpp"

namespace celldiff {

namespace {

[[noreturn]] void fail(const std::string& msg) {
  throw std::runtime_error(msg);
}

std::uint32_t read_be32(std::istream& in, const std::string& path) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4))
    fail("idx: truncated header in " + path);
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
         (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

double byte_to_pixel(unsigned char b) { return -1.0 + 2.0 * (b / 255.0); }

unsigned char pixel_to_byte(double v) {
  const double mapped = (v + 1.0) * 0.5 * 255.0;
  const long r = std::lround(mapped);
  return static_cast<unsigned char>(std::clamp(r, 0L, 255L));
}

}  // namespace

Dataset Dataset::slice(int begin, int end) const {
  Dataset out;
  out.num_classes = num_classes;
  for (int i = begin; i < end && i < count(); ++i) {
    out.images.push_back(images[static_cast<std::size_t>(i)]);
    out.labels.push_back(labels[static_cast<std::size_t>(i)]);
  }
  return out;
}

IdxTensor read_idx(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("idx: cannot open " + path);
  const std::uint32_t magic = read_be32(in, path);
  int ndims = 0;
  if (magic == 0x00000801u)
    ndims = 1;
  else if (magic == 0x00000803u)
    ndims = 3;
  else
    fail("idx: wrong magic in " + path);
  IdxTensor t;
  std::size_t total = 1;
  for (int d = 0; d < ndims; ++d) {
    const std::uint32_t n = read_be32(in, path);
    t.dims.push_back(static_cast<int>(n));
    total *= n;
  }
  std::vector<unsigned char> bytes(total);
  if (!in.read(reinterpret_cast<char*>(bytes.data()),
               static_cast<std::streamsize>(total)))
    fail("idx: truncated payload in " + path);
  t.values.resize(total);
  if (ndims == 3)
    for (std::size_t i = 0; i < total; ++i)
      t.values[i] = byte_to_pixel(bytes[i]);
  else
    for (std::size_t i = 0; i < total; ++i)
      t.values[i] = static_cast<double>(bytes[i]);
  return t;
}

Dataset load_mnist_dir(const std::string& dir, const std::string& split) {
  const std::string img_path = dir + "/" + split + "-images-idx3-ubyte";
  const std::string lbl_path = dir + "/" + split + "-labels-idx1-ubyte";
  IdxTensor imgs = read_idx(img_path);
  IdxTensor lbls = read_idx(lbl_path);
  if (imgs.dims.size() != 3 || lbls.dims.size() != 1 ||
      imgs.dims[0] != lbls.dims[0])
    fail("mnist: inconsistent image/label files in " + dir);
  const int n = imgs.dims[0], h = imgs.dims[1], w = imgs.dims[2];
  Dataset ds;
  ds.num_classes = 10;
  ds.images.reserve(static_cast<std::size_t>(n));
  ds.labels.reserve(static_cast<std::size_t>(n));
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int i = 0; i < n; ++i) {
    Grid g(1, h, w);
    std::copy_n(imgs.values.begin() + static_cast<std::ptrdiff_t>(i * plane),
                plane, g.data.begin());
    ds.images.push_back(std::move(g));
    ds.labels.push_back(static_cast<int>(lbls.values[static_cast<std::size_t>(i)]));
  }
  return ds;
}

std::string find_mnist_dir(const std::vector<std::string>& candidates) {
  namespace fs = std::filesystem;
  for (const auto& dir : candidates) {
    if (dir.empty()) continue;
    if (fs::exists(fs::path(dir) / "train-images-idx3-ubyte") &&
        fs::exists(fs::path(dir) / "train-labels-idx1-ubyte") &&
        fs::exists(fs::path(dir) / "t10k-images-idx3-ubyte") &&
        fs::exists(fs::path(dir) / "t10k-labels-idx1-ubyte"))
      return dir;
  }
  return "";
}

Dataset make_toy_dataset(const std::string& kind, int n, int size,
                         std::uint64_t seed) {
  if (size < 4) throw std::invalid_argument("toy dataset: size must be >= 4");
  const bool bars = kind == "bars";
  if (!bars && kind != "blobs")
    throw std::invalid_argument("toy dataset: kind must be bars|blobs");
  Rng rng(seed);
  Dataset ds;
  ds.num_classes = 2;
  const int band = std::max(1, size / 4);
  for (int i = 0; i < n; ++i) {
    const int label = i % 2;
    Grid g(1, size, size, -1.0);
    if (bars) {
      const int pos = rng.uniform_int(0, size - band);
      const double intensity = rng.uniform(0.75, 1.0);
      for (int r = 0; r < size; ++r)
        for (int c = 0; c < size; ++c) {
          const int along = label == 0 ? r : c;
          if (along >= pos && along < pos + band)
            g.at(0, r, c) = -1.0 + 2.0 * intensity;
        }
    } else {
      const double base = size <= 8 ? 0.25 : 0.25;  // quadrant anchors
      const double cx =
          (label == 0 ? base : 1.0 - base) * (size - 1) + rng.uniform(-1.0, 1.0);
      const double cy =
          (label == 0 ? base : 1.0 - base) * (size - 1) + rng.uniform(-1.0, 1.0);
      const double sigma = size / 5.0;
      const double intensity = rng.uniform(0.75, 1.0);
      for (int r = 0; r < size; ++r)
        for (int c = 0; c < size; ++c) {
          const double d2 = (r - cy) * (r - cy) + (c - cx) * (c - cx);
          const double v =
              -1.0 + 2.0 * intensity * std::exp(-d2 / (2.0 * sigma * sigma));
          g.at(0, r, c) = std::clamp(v, -1.0, 1.0);
        }
    }
    ds.images.push_back(std::move(g));
    ds.labels.push_back(label);
  }
  return ds;
}

// ---------------------------------------------------------------------------
// image emission
// ---------------------------------------------------------------------------

namespace {

// Tiles single-channel images row-major; multichannel images use channel 0.
std::vector<unsigned char> tile_bytes(const std::vector<Grid>& images,
                                      int cols, int& out_w, int& out_h) {
  if (images.empty()) fail("image grid: need at least one image");
  const int ih = images[0].height, iw = images[0].width;
  for (const auto& g : images)
    if (g.height != ih || g.width != iw)
      fail("image grid: images must share one shape");
  const int n = static_cast<int>(images.size());
  if (cols <= 0)
    cols = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n))));
  const int rows = (n + cols - 1) / cols;
  out_w = cols * iw;
  out_h = rows * ih;
  std::vector<unsigned char> raster(
      static_cast<std::size_t>(out_w) * out_h, 0);
  for (int i = 0; i < n; ++i) {
    const int tr = i / cols, tc = i % cols;
    const Grid& g = images[static_cast<std::size_t>(i)];
    for (int r = 0; r < ih; ++r)
      for (int c = 0; c < iw; ++c)
        raster[static_cast<std::size_t>(tr * ih + r) * out_w + tc * iw + c] =
            pixel_to_byte(g.at(0, r, c));
  }
  return raster;
}

}  // namespace

void write_pgm_grid(const std::vector<Grid>& images, const std::string& path,
                    int cols) {
  int w = 0, h = 0;
  const auto raster = tile_bytes(images, cols, w, h);
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("pgm: cannot open " + path + " for writing");
  out << "P5\n" << w << " " << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(raster.data()),
            static_cast<std::streamsize>(raster.size()));
  if (!out) fail("pgm: write failed for " + path);
}

Grid read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("pgm: cannot open " + path);
  std::string magic;
  in >> magic;
  if (magic != "P5") fail("pgm: not a P5 file: " + path);
  int w = 0, h = 0, maxval = 0;
  in >> w >> h >> maxval;
  if (maxval != 255) fail("pgm: only maxval 255 supported");
  in.get();  // single whitespace after header
  std::vector<unsigned char> bytes(static_cast<std::size_t>(w) * h);
  if (!in.read(reinterpret_cast<char*>(bytes.data()),
               static_cast<std::streamsize>(bytes.size())))
    fail("pgm: truncated payload in " + path);
  Grid g(1, h, w);
  for (std::size_t i = 0; i < bytes.size(); ++i)
    g.data[i] = byte_to_pixel(bytes[i]);
  return g;
}

namespace {

void png_chunk(std::ofstream& out, const char* type,
               const std::vector<unsigned char>& payload) {
  unsigned char head[8];
  const std::uint32_t len = static_cast<std::uint32_t>(payload.size());
  head[0] = (len >> 24) & 0xff;
  head[1] = (len >> 16) & 0xff;
  head[2] = (len >> 8) & 0xff;
  head[3] = len & 0xff;
  std::memcpy(head + 4, type, 4);
  out.write(reinterpret_cast<const char*>(head), 8);
  if (!payload.empty())
    out.write(reinterpret_cast<const char*>(payload.data()),
              static_cast<std::streamsize>(payload.size()));
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, reinterpret_cast<const Bytef*>(type), 4);
  if (!payload.empty())
    crc = crc32(crc, payload.data(), static_cast<uInt>(payload.size()));
  unsigned char tail[4] = {static_cast<unsigned char>((crc >> 24) & 0xff),
                           static_cast<unsigned char>((crc >> 16) & 0xff),
                           static_cast<unsigned char>((crc >> 8) & 0xff),
                           static_cast<unsigned char>(crc & 0xff)};
  out.write(reinterpret_cast<const char*>(tail), 4);
}

}  // namespace

void write_png_grid(const std::vector<Grid>& images, const std::string& path,
                    int cols) {
  int w = 0, h = 0;
  const auto raster = tile_bytes(images, cols, w, h);
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("png: cannot open " + path + " for writing");
  static const unsigned char sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  out.write(reinterpret_cast<const char*>(sig), 8);
  std::vector<unsigned char> ihdr(13);
  auto put32 = [](unsigned char* p, std::uint32_t v) {
    p[0] = (v >> 24) & 0xff;
    p[1] = (v >> 16) & 0xff;
    p[2] = (v >> 8) & 0xff;
    p[3] = v & 0xff;
  };
  put32(ihdr.data(), static_cast<std::uint32_t>(w));
  put32(ihdr.data() + 4, static_cast<std::uint32_t>(h));
  ihdr[8] = 8;   // bit depth
  ihdr[9] = 0;   // grayscale
  ihdr[10] = ihdr[11] = ihdr[12] = 0;
  png_chunk(out, "IHDR", ihdr);
  // one filter byte (0) per scanline
  std::vector<unsigned char> scan(static_cast<std::size_t>(h) * (w + 1));
  for (int r = 0; r < h; ++r) {
    scan[static_cast<std::size_t>(r) * (w + 1)] = 0;
    std::memcpy(scan.data() + static_cast<std::size_t>(r) * (w + 1) + 1,
                raster.data() + static_cast<std::size_t>(r) * w,
                static_cast<std::size_t>(w));
  }
  uLongf bound = compressBound(static_cast<uLong>(scan.size()));
  std::vector<unsigned char> idat(bound);
  if (compress2(idat.data(), &bound, scan.data(),
                static_cast<uLong>(scan.size()), 6) != Z_OK)
    fail("png: deflate failed");
  idat.resize(bound);
  png_chunk(out, "IDAT", idat);
  png_chunk(out, "IEND", {});
  if (!out) fail("png: write failed for " + path);
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

namespace {

void put_u32(std::ostream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), 4);
}
void put_i32(std::ostream& out, std::int32_t v) {
  out.write(reinterpret_cast<const char*>(&v), 4);
}
void put_u64(std::ostream& out, std::uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), 8);
}
void put_str(std::ostream& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::uint32_t get_u32(std::istream& in, const std::string& path) {
  std::uint32_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), 4)) fail("checkpoint: truncated " + path);
  return v;
}
std::int32_t get_i32(std::istream& in, const std::string& path) {
  std::int32_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), 4)) fail("checkpoint: truncated " + path);
  return v;
}
std::uint64_t get_u64(std::istream& in, const std::string& path) {
  std::uint64_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), 8)) fail("checkpoint: truncated " + path);
  return v;
}
std::string get_str(std::istream& in, const std::string& path) {
  const std::uint32_t n = get_u32(in, path);
  std::string s(n, '\0');
  if (n && !in.read(s.data(), n)) fail("checkpoint: truncated " + path);
  return s;
}

}  // namespace

const Checkpoint::Array* Checkpoint::find(const std::string& name) const {
  for (const auto& a : arrays)
    if (a.name == name) return &a;
  return nullptr;
}

std::string Checkpoint::config_value(const std::string& key) const {
  for (const auto& [k, v] : config)
    if (k == key) return v;
  fail("checkpoint: missing config key '" + key + "'");
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("checkpoint: cannot open " + path + " for writing");
  out.write("CNDF", 4);
  put_u32(out, ckpt.version);
  put_u32(out, static_cast<std::uint32_t>(ckpt.config.size()));
  for (const auto& [k, v] : ckpt.config) {
    put_str(out, k);
    put_str(out, v);
  }
  put_u32(out, static_cast<std::uint32_t>(ckpt.arrays.size()));
  for (const auto& a : ckpt.arrays) {
    put_str(out, a.name);
    put_u32(out, static_cast<std::uint32_t>(a.shape.size()));
    for (int d : a.shape) put_i32(out, d);
    put_u64(out, a.values.size());
    out.write(reinterpret_cast<const char*>(a.values.data()),
              static_cast<std::streamsize>(a.values.size() * sizeof(double)));
  }
  put_str(out, ckpt.rng_state);
  put_u32(out, ckpt.epoch);
  if (!out) fail("checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("checkpoint: cannot open " + path);
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "CNDF", 4) != 0)
    fail("checkpoint: bad magic in " + path);
  Checkpoint ckpt;
  ckpt.version = get_u32(in, path);
  if (ckpt.version != Checkpoint::kVersion)
    fail("checkpoint: version mismatch in " + path + ": file has version " +
         std::to_string(ckpt.version) + ", reader expects " +
         std::to_string(Checkpoint::kVersion));
  const std::uint32_t ncfg = get_u32(in, path);
  for (std::uint32_t i = 0; i < ncfg; ++i) {
    std::string k = get_str(in, path);
    std::string v = get_str(in, path);
    ckpt.config.emplace_back(std::move(k), std::move(v));
  }
  const std::uint32_t narr = get_u32(in, path);
  for (std::uint32_t i = 0; i < narr; ++i) {
    Checkpoint::Array a;
    a.name = get_str(in, path);
    const std::uint32_t nd = get_u32(in, path);
    for (std::uint32_t d = 0; d < nd; ++d) a.shape.push_back(get_i32(in, path));
    const std::uint64_t count = get_u64(in, path);
    a.values.resize(count);
    if (count && !in.read(reinterpret_cast<char*>(a.values.data()),
                          static_cast<std::streamsize>(count * sizeof(double))))
      fail("checkpoint: truncated " + path);
    ckpt.arrays.push_back(std::move(a));
  }
  ckpt.rng_state = get_str(in, path);
  ckpt.epoch = get_u32(in, path);
  return ckpt;
}

}  // namespace celldiff
