#pragma once

#include <filesystem>
#include <stdexcept>

#include "json.hpp"

#include "flopsgate/model.hpp"

namespace flopsgate {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[8] = {'F', 'L', 'G', 'C', 'K', 'P', 'T', '\0'};
inline constexpr int kCheckpointFormatVersion = 1;

/// Layout: 8-byte magic, little-endian uint32 header length, JSON header
/// (topology, config, gate log alphas, tensor table), then weights and biases
/// as little-endian float32 blobs in table order.
template <typename T>
void save_checkpoint(const std::filesystem::path& path, const GatedModel<T>& m,
                     const nlohmann::json& config = nlohmann::json::object(),
                     const nlohmann::json& extra = nlohmann::json::object());

template <typename T>
struct LoadedCheckpoint {
  GatedModel<T> model;
  nlohmann::json config;
  nlohmann::json extra;
};

template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::filesystem::path& path);

/// Header only, without touching the blobs.
nlohmann::json read_checkpoint_header(const std::filesystem::path& path);

}  // namespace flopsgate
