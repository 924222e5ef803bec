#include "flopsgate/dataset.hpp"

#include <zlib.h>

#include <cstdlib>
#include <fstream>
#include <numeric>

namespace flopsgate {
namespace fs = std::filesystem;

namespace {

std::uint32_t read_be32(std::span<const std::uint8_t> bytes, std::size_t offset) {
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

void write_file(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream os(path, std::ios::binary);
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw DatasetError("cannot write " + path.string());
}

fs::path find_variant(const fs::path& dir, const std::string& stem) {
  for (const auto& name : {stem, stem + ".gz"}) {
    if (fs::exists(dir / name)) return dir / name;
  }
  return {};
}

}  // namespace

std::string to_string(Split s) { return s == Split::train ? "train" : "test"; }

Dataset Dataset::head(std::size_t n) const {
  Dataset out = *this;
  n = std::min(n, size());
  out.labels.resize(n);
  out.features.resize(n * sample_numel());
  return out;
}

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  if (!fs::exists(path)) throw DatasetError("missing file " + path.string());
  gzFile file = gzopen(path.c_str(), "rb");
  if (!file) throw DatasetError("cannot open " + path.string());
  std::vector<std::uint8_t> out;
  std::vector<std::uint8_t> chunk(1 << 20);
  for (;;) {
    const int got = gzread(file, chunk.data(), static_cast<unsigned>(chunk.size()));
    if (got < 0) {
      int code = 0;
      const std::string msg = gzerror(file, &code);
      gzclose(file);
      throw DatasetError("read error in " + path.string() + ": " + msg);
    }
    if (got == 0) break;
    out.insert(out.end(), chunk.begin(), chunk.begin() + got);
  }
  gzclose(file);
  return out;
}

IdxArray parse_idx(std::span<const std::uint8_t> bytes, std::uint32_t expected_magic,
                   const std::string& origin) {
  if (bytes.size() < 4) throw DatasetError(origin + ": short read at offset 0");
  const std::uint32_t magic = read_be32(bytes, 0);
  if (magic != expected_magic) {
    char buf[96];
    std::snprintf(buf, sizeof buf, ": not an IDX file of the expected kind (magic 0x%08X, expected 0x%08X)",
                  magic, expected_magic);
    throw DatasetError(origin + buf);
  }
  const std::size_t rank = magic & 0xFF;
  const std::size_t header = 4 + 4 * rank;
  if (bytes.size() < header) throw DatasetError(origin + ": short read at offset " + std::to_string(bytes.size()));
  IdxArray out;
  std::size_t count = 1;
  for (std::size_t d = 0; d < rank; ++d) {
    out.dims.push_back(read_be32(bytes, 4 + 4 * d));
    count *= out.dims.back();
  }
  if (bytes.size() < header + count) {
    throw DatasetError(origin + ": short read at offset " + std::to_string(bytes.size()) + " (expected " +
                       std::to_string(header + count) + " bytes)");
  }
  out.data.assign(bytes.begin() + static_cast<std::ptrdiff_t>(header),
                  bytes.begin() + static_cast<std::ptrdiff_t>(header + count));
  return out;
}

Dataset load_idx(const fs::path& images, const fs::path& labels, Split split, Normalization norm) {
  const auto img = parse_idx(read_bytes(images), kIdxImageMagic, images.string());
  const auto lab = parse_idx(read_bytes(labels), kIdxLabelMagic, labels.string());
  if (img.dims[0] != lab.dims[0]) {
    throw DatasetError("count mismatch: " + std::to_string(img.dims[0]) + " images in " +
                       images.string() + " vs " + std::to_string(lab.dims[0]) + " labels in " +
                       labels.string());
  }
  Dataset d;
  d.split = split;
  d.classes = 10;
  d.sample_shape = {1, img.dims[1], img.dims[2]};
  d.features.resize(img.data.size());
  for (std::size_t i = 0; i < img.data.size(); ++i) {
    const double scaled = static_cast<double>(img.data[i]) / 255.0;
    d.features[i] = static_cast<float>((scaled - norm.mean) / norm.stddev);
  }
  d.labels.resize(lab.data.size());
  for (std::size_t i = 0; i < lab.data.size(); ++i) {
    if (lab.data[i] >= d.classes) {
      throw DatasetError(labels.string() + ": label " + std::to_string(lab.data[i]) + " out of range at index " +
                         std::to_string(i));
    }
    d.labels[i] = lab.data[i];
  }
  return d;
}

void write_idx_images(const fs::path& path, std::uint32_t rows, std::uint32_t cols,
                      std::span<const std::uint8_t> pixels) {
  const std::size_t per = std::size_t{rows} * cols;
  if (per == 0 || pixels.size() % per != 0) throw DatasetError("pixel buffer does not tile images");
  std::vector<std::uint8_t> out;
  put_be32(out, kIdxImageMagic);
  put_be32(out, static_cast<std::uint32_t>(pixels.size() / per));
  put_be32(out, rows);
  put_be32(out, cols);
  out.insert(out.end(), pixels.begin(), pixels.end());
  write_file(path, out);
}

void write_idx_labels(const fs::path& path, std::span<const std::uint8_t> labels) {
  std::vector<std::uint8_t> out;
  put_be32(out, kIdxLabelMagic);
  put_be32(out, static_cast<std::uint32_t>(labels.size()));
  out.insert(out.end(), labels.begin(), labels.end());
  write_file(path, out);
}

fs::path default_data_dir() {
  if (const char* env = std::getenv("FLOPSGATE_DATA_DIR"); env && *env) return env;
  const char* home = std::getenv("HOME");
  return fs::path(home ? home : ".") / ".cache" / "flopsgate" / "mnist";
}

bool mnist_present(const fs::path& dir) {
  for (const char* stem : {"train-images-idx3-ubyte", "train-labels-idx1-ubyte",
                           "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"}) {
    if (find_variant(dir, stem).empty()) return false;
  }
  return true;
}

Dataset load_mnist(const fs::path& dir, Split split) {
  const std::string prefix = split == Split::train ? "train" : "t10k";
  const auto images = find_variant(dir, prefix + "-images-idx3-ubyte");
  const auto labels = find_variant(dir, prefix + "-labels-idx1-ubyte");
  if (images.empty() || labels.empty()) {
    throw DatasetError("MNIST " + to_string(split) + " files not found in " + dir.string() +
                       " (pass --download or set FLOPSGATE_DATA_DIR)");
  }
  return load_idx(images, labels, split);
}

std::vector<std::vector<std::size_t>> batch_indices(std::size_t n, std::size_t batch_size, Rng& rng) {
  if (batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.below(i));
    std::swap(order[i - 1], order[j]);
  }
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(n, start + batch_size);
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                     order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

std::vector<std::vector<std::size_t>> batch_indices(std::size_t n, std::size_t batch_size,
                                                    std::uint64_t seed) {
  Rng rng(seed, 0x5348'5546'464cULL);
  return batch_indices(n, batch_size, rng);
}

template <typename T>
Batch<T> make_batch(const Dataset& d, std::span<const std::size_t> indices) {
  const std::size_t per = d.sample_numel();
  Shape shape{indices.size()};
  shape.insert(shape.end(), d.sample_shape.begin(), d.sample_shape.end());
  Batch<T> b{Tensor<T>(shape), std::vector<int>(indices.size())};
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= d.size()) throw std::out_of_range("batch index past dataset end");
    const float* src = d.features.data() + indices[i] * per;
    T* dst = b.inputs.data() + i * per;
    for (std::size_t k = 0; k < per; ++k) dst[k] = static_cast<T>(src[k]);
    b.labels[i] = d.labels[indices[i]];
  }
  return b;
}

template Batch<float> make_batch(const Dataset&, std::span<const std::size_t>);
template Batch<double> make_batch(const Dataset&, std::span<const std::size_t>);

Dataset synthetic_blobs(std::size_t classes, std::size_t n, std::size_t dim, std::uint64_t seed,
                        double separation) {
  if (classes < 2) throw std::invalid_argument("synthetic_blobs: need at least two classes");
  if (dim < classes) throw std::invalid_argument("synthetic_blobs: dim must be >= classes");
  Rng rng(seed, 0x424c'4f42ULL);
  Dataset d;
  d.sample_shape = {dim};
  d.classes = classes;
  d.features.resize(n * dim);
  d.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto label = static_cast<std::size_t>(rng.below(classes));
    d.labels[i] = static_cast<int>(label);
    for (std::size_t k = 0; k < dim; ++k) {
      d.features[i * dim + k] = static_cast<float>(rng.normal() + (k == label ? separation : 0.0));
    }
  }
  return d;
}

}  // namespace flopsgate
