#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "flopsgate/model.hpp"
#include "flopsgate/rng.hpp"

namespace flopsgate {

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Split { train, test };

std::string to_string(Split s);

/// Immutable after load. Features are stored as float and converted per batch.
struct Dataset {
  Shape sample_shape;  // {1, 28, 28} for MNIST, {dim} for blobs
  std::vector<float> features;
  std::vector<int> labels;
  std::size_t classes = 10;
  Split split = Split::train;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t sample_numel() const { return shape_numel(sample_shape); }
  /// The first n examples.
  Dataset head(std::size_t n) const;
};

struct Normalization {
  double mean = 0.1307;
  double stddev = 0.3081;
};

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

/// Reads a whole file, transparently inflating gzip.
std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);

struct IdxArray {
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> data;
};

/// Parses an unsigned-byte IDX payload and checks the magic number.
IdxArray parse_idx(std::span<const std::uint8_t> bytes, std::uint32_t expected_magic,
                   const std::string& origin);

/// Pixels scaled to [0, 1], then standardized.
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                 Split split, Normalization norm = {});

void write_idx_images(const std::filesystem::path& path, std::uint32_t rows, std::uint32_t cols,
                      std::span<const std::uint8_t> pixels);
void write_idx_labels(const std::filesystem::path& path, std::span<const std::uint8_t> labels);

/// Directory from FLOPSGATE_DATA_DIR, else ~/.cache/flopsgate/mnist.
std::filesystem::path default_data_dir();

/// Loads `{train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz]` from `dir`.
Dataset load_mnist(const std::filesystem::path& dir, Split split);
bool mnist_present(const std::filesystem::path& dir);

/// Fetches the four gzip files over HTTPS into `dir`. Base URL from
/// FLOPSGATE_MNIST_URL when set.
void download_mnist(const std::filesystem::path& dir);

/// Seeded Fisher-Yates permutation cut into batches; the last partial batch is kept.
std::vector<std::vector<std::size_t>> batch_indices(std::size_t n, std::size_t batch_size, Rng& rng);
std::vector<std::vector<std::size_t>> batch_indices(std::size_t n, std::size_t batch_size,
                                                    std::uint64_t seed);

template <typename T>
Batch<T> make_batch(const Dataset& d, std::span<const std::size_t> indices);

/// Gaussian blobs with unit variance; class k is centred at separation * e_k.
Dataset synthetic_blobs(std::size_t classes, std::size_t n, std::size_t dim, std::uint64_t seed,
                        double separation = 4.0);

}  // namespace flopsgate
