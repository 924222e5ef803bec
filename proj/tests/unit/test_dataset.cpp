#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "doctest.h"

#include "flopsgate/dataset.hpp"
#include "support/checks.hpp"

using namespace flopsgate;
namespace fs = std::filesystem;

namespace {

std::vector<std::uint8_t> file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void put_bytes(const fs::path& p, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void gzip_file(const fs::path& src, const fs::path& dst) {
  const auto bytes = file_bytes(src);
  gzFile f = gzopen(dst.c_str(), "wb");
  REQUIRE(f != nullptr);
  REQUIRE(gzwrite(f, bytes.data(), static_cast<unsigned>(bytes.size())) == static_cast<int>(bytes.size()));
  gzclose(f);
}

std::string error_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const DatasetError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("two-image fixture gives exact normalized values") {
  const auto dir = testing::scratch_dir("idx_fixture");
  std::vector<std::uint8_t> pixels(2 * 4, 0);
  pixels[0] = 255;
  pixels[5] = 128;
  write_idx_images(dir / "img", 2, 2, pixels);
  write_idx_labels(dir / "lbl", std::vector<std::uint8_t>{7, 3});

  // Header bytes are big-endian: magic, count, rows, cols.
  const auto raw = file_bytes(dir / "img");
  REQUIRE(raw.size() == 16 + 8);
  CHECK(raw[2] == 0x08);
  CHECK(raw[3] == 0x03);
  CHECK(raw[7] == 2);

  const auto d = load_idx(dir / "img", dir / "lbl", Split::test);
  CHECK(d.size() == 2);
  CHECK(d.sample_shape == Shape{1, 2, 2});
  CHECK(d.labels == std::vector<int>{7, 3});
  CHECK(d.split == Split::test);
  CHECK(d.features[0] == doctest::Approx((1.0 - 0.1307) / 0.3081).epsilon(1e-6));
  CHECK(d.features[0] == doctest::Approx(2.8215).epsilon(1e-4));
  CHECK(d.features[1] == doctest::Approx(-0.1307 / 0.3081).epsilon(1e-6));
  CHECK(d.features[5] == doctest::Approx((128.0 / 255.0 - 0.1307) / 0.3081).epsilon(1e-6));
}

TEST_CASE("writer and reader round trip bit-exactly") {
  const auto dir = testing::scratch_dir("idx_roundtrip");
  Rng rng(1);
  std::vector<std::uint8_t> pixels(5 * 28 * 28);
  for (auto& p : pixels) p = static_cast<std::uint8_t>(rng.below(256));
  write_idx_images(dir / "img", 28, 28, pixels);
  const auto parsed = parse_idx(file_bytes(dir / "img"), kIdxImageMagic, "img");
  CHECK(parsed.dims == std::vector<std::uint32_t>{5, 28, 28});
  CHECK(parsed.data == pixels);
}

TEST_CASE("malformed files give typed errors") {
  const auto dir = testing::scratch_dir("idx_errors");
  write_idx_images(dir / "img", 28, 28, std::vector<std::uint8_t>(3 * 784, 9));
  write_idx_labels(dir / "lbl", std::vector<std::uint8_t>{1, 2, 3});
  write_idx_labels(dir / "lbl2", std::vector<std::uint8_t>{1, 2});
  write_idx_labels(dir / "bad_label", std::vector<std::uint8_t>{1, 2, 10});

  CHECK(error_of([&] { (void)load_idx(dir / "lbl", dir / "lbl", Split::train); }).find("not an IDX file") !=
        std::string::npos);

  auto truncated = file_bytes(dir / "img");
  truncated.resize(truncated.size() - 100);
  put_bytes(dir / "short", truncated);
  const auto msg = error_of([&] { (void)load_idx(dir / "short", dir / "lbl", Split::train); });
  CHECK(msg.find("short read at offset") != std::string::npos);

  CHECK(error_of([&] { (void)load_idx(dir / "img", dir / "lbl2", Split::train); }).find("count mismatch") !=
        std::string::npos);
  CHECK_FALSE(error_of([&] { (void)load_idx(dir / "img", dir / "bad_label", Split::train); }).empty());
  CHECK_THROWS_AS((void)load_idx(dir / "missing", dir / "lbl", Split::train), DatasetError);
}

TEST_CASE("gzip files load the same as raw ones") {
  const auto dir = testing::scratch_dir("idx_gzip");
  testing::write_fake_mnist(dir / "raw", 12, 6, 3);
  fs::create_directories(dir / "gz");
  for (const char* name : {"train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte",
                           "t10k-labels-idx1-ubyte"}) {
    gzip_file(dir / "raw" / name, dir / "gz" / (std::string(name) + ".gz"));
  }
  // The compressed file really is compressed.
  const auto gz = file_bytes(dir / "gz" / "train-images-idx3-ubyte.gz");
  REQUIRE(gz.size() > 2);
  CHECK(gz[0] == 0x1f);
  CHECK(gz[1] == 0x8b);

  CHECK(mnist_present(dir / "raw"));
  CHECK(mnist_present(dir / "gz"));
  CHECK_FALSE(mnist_present(dir / "nothing_here"));
  for (auto split : {Split::train, Split::test}) {
    const auto a = load_mnist(dir / "raw", split);
    const auto b = load_mnist(dir / "gz", split);
    CHECK(a.size() == (split == Split::train ? 12u : 6u));
    CHECK(a.features == b.features);
    CHECK(a.labels == b.labels);
  }
}

TEST_CASE("real MNIST has 60000 and 10000 examples" * doctest::skip(!mnist_present(FLOPSGATE_MNIST_DIR))) {
  const auto train = load_mnist(FLOPSGATE_MNIST_DIR, Split::train);
  const auto test = load_mnist(FLOPSGATE_MNIST_DIR, Split::test);
  CHECK(train.size() == 60000);
  CHECK(test.size() == 10000);
  CHECK(train.sample_shape == Shape{1, 28, 28});
  double mean = 0.0;
  for (float v : train.features) mean += v;
  mean /= static_cast<double>(train.features.size());
  CHECK(std::abs(mean) < 0.01);
}

TEST_CASE("batches keep the tail and partition the index set") {
  const auto b = batch_indices(10, 3, 42);
  std::vector<std::size_t> sizes;
  std::set<std::size_t> seen;
  for (const auto& batch : b) {
    sizes.push_back(batch.size());
    seen.insert(batch.begin(), batch.end());
  }
  CHECK(sizes == std::vector<std::size_t>{3, 3, 3, 1});
  CHECK(seen.size() == 10);
  CHECK(*seen.rbegin() == 9);
  CHECK(batch_indices(10, 3, 42) == b);
  CHECK(batch_indices(10, 3, 43) != b);
  CHECK(batch_indices(0, 3, 1).empty());
  CHECK_THROWS_AS((void)batch_indices(10, 0, 1), std::invalid_argument);
}

TEST_CASE("make_batch gathers rows") {
  const auto d = synthetic_blobs(3, 9, 4, 5);
  const std::vector<std::size_t> idx{4, 0};
  const auto b = make_batch<double>(d, idx);
  CHECK(b.inputs.shape() == Shape{2, 4});
  CHECK(b.labels == std::vector<int>{d.labels[4], d.labels[0]});
  for (std::size_t k = 0; k < 4; ++k) CHECK(b.inputs[k] == static_cast<double>(d.features[4 * 4 + k]));
}

TEST_CASE("blobs are reproducible and empty for n = 0") {
  CHECK(synthetic_blobs(4, 0, 8, 1).size() == 0);
  const auto a = synthetic_blobs(4, 50, 8, 1);
  const auto b = synthetic_blobs(4, 50, 8, 1);
  CHECK(a.features == b.features);
  CHECK(a.labels == b.labels);
  CHECK_THROWS((void)synthetic_blobs(4, 10, 2, 1));
}

TEST_CASE("softmax regression separates the blobs") {
  const std::size_t classes = 4, dim = 8;
  const auto train = synthetic_blobs(classes, 2000, dim, 11);
  const auto test = synthetic_blobs(classes, 2000, dim, 12);
  std::vector<double> w(dim * classes, 0.0), b(classes, 0.0);
  auto logits = [&](const Dataset& d, std::size_t i, std::vector<double>& out) {
    for (std::size_t k = 0; k < classes; ++k) {
      double s = b[k];
      for (std::size_t j = 0; j < dim; ++j) s += d.features[i * dim + j] * w[j * classes + k];
      out[k] = s;
    }
  };
  std::vector<double> z(classes);
  for (int epoch = 0; epoch < 30; ++epoch) {
    std::vector<double> gw(w.size(), 0.0), gb(classes, 0.0);
    for (std::size_t i = 0; i < train.size(); ++i) {
      logits(train, i, z);
      const double mx = *std::max_element(z.begin(), z.end());
      double sum = 0.0;
      for (auto& v : z) sum += (v = std::exp(v - mx));
      for (std::size_t k = 0; k < classes; ++k) {
        const double g = z[k] / sum - (static_cast<int>(k) == train.labels[i] ? 1.0 : 0.0);
        gb[k] += g;
        for (std::size_t j = 0; j < dim; ++j) gw[j * classes + k] += g * train.features[i * dim + j];
      }
    }
    for (std::size_t q = 0; q < w.size(); ++q) w[q] -= 0.5 * gw[q] / train.size();
    for (std::size_t k = 0; k < classes; ++k) b[k] -= 0.5 * gb[k] / train.size();
  }
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    logits(test, i, z);
    wrong += static_cast<int>(std::max_element(z.begin(), z.end()) - z.begin()) != test.labels[i];
  }
  CHECK(static_cast<double>(wrong) / test.size() < 0.02);
}

TEST_CASE("default data directory honours the environment") {
  setenv("FLOPSGATE_DATA_DIR", "/tmp/somewhere", 1);
  CHECK(default_data_dir() == fs::path("/tmp/somewhere"));
  unsetenv("FLOPSGATE_DATA_DIR");
  CHECK(default_data_dir().string().find("flopsgate") != std::string::npos);
}
