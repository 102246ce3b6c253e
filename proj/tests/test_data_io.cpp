#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "celldiff/data_io.hpp"
#include "celldiff/rng.hpp"

using namespace celldiff;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("celldiff_test_" + std::to_string(std::rand()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string file(const std::string& name) const {
    return (path / name).string();
  }
};

void write_bytes(const std::string& path, const std::vector<unsigned char>& b) {
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(b.data()),
            static_cast<std::streamsize>(b.size()));
}

std::vector<unsigned char> file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

TEST_CASE("idx reader parses a hand-built two-image fixture exactly") {
  TempDir dir;
  // magic 0x00000803, 2 images of 2x2, bytes 0,51,102,153 / 204,255,0,128
  std::vector<unsigned char> fixture = {
      0x00, 0x00, 0x08, 0x03, 0x00, 0x00, 0x00, 0x02, 0x00, 0x00,
      0x00, 0x02, 0x00, 0x00, 0x00, 0x02, 0,    51,   102,  153,
      204,  255,  0,    128};
  const std::string path = dir.file("imgs");
  write_bytes(path, fixture);
  IdxTensor t = read_idx(path);
  REQUIRE(t.dims == std::vector<int>{2, 2, 2});
  const double expected[8] = {
      -1.0,          -1.0 + 2.0 * 51 / 255.0,  -1.0 + 2.0 * 102 / 255.0,
      -1.0 + 2.0 * 153 / 255.0, -1.0 + 2.0 * 204 / 255.0, 1.0,
      -1.0,          -1.0 + 2.0 * 128 / 255.0};
  for (int i = 0; i < 8; ++i)
    CHECK(t.values[static_cast<std::size_t>(i)] == expected[i]);
}

TEST_CASE("idx reader: labels pass through, errors are loud") {
  TempDir dir;
  std::vector<unsigned char> labels = {0x00, 0x00, 0x08, 0x01, 0x00,
                                       0x00, 0x00, 0x03, 4,    9,   0};
  const std::string lpath = dir.file("labels");
  write_bytes(lpath, labels);
  IdxTensor t = read_idx(lpath);
  CHECK(t.values == std::vector<double>{4.0, 9.0, 0.0});

  std::vector<unsigned char> truncated(labels.begin(), labels.begin() + 9);
  const std::string tpath = dir.file("trunc");
  write_bytes(tpath, truncated);
  CHECK_THROWS(read_idx(tpath));

  std::vector<unsigned char> wrong = labels;
  wrong[2] = 0x07;
  const std::string wpath = dir.file("wrong");
  write_bytes(wpath, wrong);
  CHECK_THROWS(read_idx(wpath));

  CHECK_THROWS(read_idx(dir.file("missing")));
}

TEST_CASE("toy datasets are deterministic, balanced, and in range") {
  for (const char* kind : {"bars", "blobs"}) {
    Dataset a = make_toy_dataset(kind, 20, 8, 5);
    Dataset b = make_toy_dataset(kind, 20, 8, 5);
    REQUIRE(a.count() == 20);
    int class1 = 0;
    for (int i = 0; i < a.count(); ++i) {
      CHECK(a.images[static_cast<std::size_t>(i)].data ==
            b.images[static_cast<std::size_t>(i)].data);
      CHECK(a.labels[static_cast<std::size_t>(i)] ==
            b.labels[static_cast<std::size_t>(i)]);
      class1 += a.labels[static_cast<std::size_t>(i)];
      for (double v : a.images[static_cast<std::size_t>(i)].data) {
        CHECK(v >= -1.0);
        CHECK(v <= 1.0);
      }
    }
    CHECK(class1 == 10);
  }
  CHECK_THROWS_AS(make_toy_dataset("bars", 4, 2, 1), std::invalid_argument);
  CHECK_THROWS_AS(make_toy_dataset("squares", 4, 8, 1), std::invalid_argument);
}

TEST_CASE("pgm emission: extreme values and round trip") {
  TempDir dir;
  Grid dark(1, 2, 2, -1.0);
  const std::string dpath = dir.file("dark.pgm");
  write_pgm_grid({dark}, dpath, 1);
  auto bytes = file_bytes(dpath);
  // header "P5\n2 2\n255\n" then four zero bytes
  REQUIRE(bytes.size() == 11 + 4);
  for (std::size_t i = 11; i < bytes.size(); ++i) CHECK(bytes[i] == 0x00);

  Grid bright(1, 2, 2, 1.0);
  const std::string bpath = dir.file("bright.pgm");
  write_pgm_grid({bright}, bpath, 1);
  auto bb = file_bytes(bpath);
  for (std::size_t i = 11; i < bb.size(); ++i) CHECK(bb[i] == 0xff);

  Rng rng(3);
  Grid img(1, 5, 7);
  rng.fill_uniform(img.data.data(), img.data.size(), -1.0, 1.0);
  const std::string rpath = dir.file("round.pgm");
  write_pgm_grid({img}, rpath, 1);
  Grid back = read_pgm(rpath);
  // the round trip reproduces the 8-bit quantized raster exactly
  const std::string rpath2 = dir.file("round2.pgm");
  write_pgm_grid({back}, rpath2, 1);
  CHECK(file_bytes(rpath) == file_bytes(rpath2));
}

TEST_CASE("png emission produces a decodable signature and deterministic bytes") {
  TempDir dir;
  Rng rng(9);
  Grid img(1, 8, 8);
  rng.fill_uniform(img.data.data(), img.data.size(), -1.0, 1.0);
  const std::string p1 = dir.file("a.png");
  const std::string p2 = dir.file("b.png");
  write_png_grid({img}, p1, 1);
  write_png_grid({img}, p2, 1);
  auto b1 = file_bytes(p1);
  CHECK(b1 == file_bytes(p2));
  REQUIRE(b1.size() > 8);
  CHECK(b1[0] == 0x89);
  CHECK(b1[1] == 'P');
}

TEST_CASE("checkpoint: save-load-save is byte-identical") {
  TempDir dir;
  Checkpoint ckpt;
  ckpt.config = {{"kind", "conv"}, {"image_size", "8"}};
  ckpt.arrays.push_back({"w", {2, 3}, {1.5, -2.25, 0.0, 1e-17, 3.0, -4.5}});
  ckpt.arrays.push_back({"b", {2}, {0.25, 0.75}});
  ckpt.rng_state = Rng(42).state();
  ckpt.epoch = 7;
  const std::string p1 = dir.file("a.cndf");
  save_checkpoint(p1, ckpt);
  Checkpoint loaded = load_checkpoint(p1);
  CHECK(loaded.config == ckpt.config);
  CHECK(loaded.epoch == 7);
  CHECK(loaded.rng_state == ckpt.rng_state);
  REQUIRE(loaded.arrays.size() == 2);
  CHECK(loaded.arrays[0].values == ckpt.arrays[0].values);
  const std::string p2 = dir.file("b.cndf");
  save_checkpoint(p2, loaded);
  CHECK(file_bytes(p1) == file_bytes(p2));
}

TEST_CASE("checkpoint: version and magic mismatches name the problem") {
  TempDir dir;
  Checkpoint ckpt;
  ckpt.arrays.push_back({"w", {1}, {1.0}});
  const std::string path = dir.file("v.cndf");
  save_checkpoint(path, ckpt);
  auto bytes = file_bytes(path);
  bytes[4] = 9;  // version field
  const std::string vpath = dir.file("v9.cndf");
  write_bytes(vpath, bytes);
  try {
    load_checkpoint(vpath);
    FAIL("expected version error");
  } catch (const std::runtime_error& e) {
    const std::string msg = e.what();
    CHECK(msg.find("9") != std::string::npos);
    CHECK(msg.find("1") != std::string::npos);
  }
  bytes[0] = 'X';
  const std::string mpath = dir.file("m.cndf");
  write_bytes(mpath, bytes);
  CHECK_THROWS(load_checkpoint(mpath));
}
