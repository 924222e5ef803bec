#include "flopsgate/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

namespace flopsgate {
namespace {

using nlohmann::json;

std::uint32_t to_le(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    return (v >> 24) | ((v >> 8) & 0xFF00u) | ((v << 8) & 0xFF0000u) | (v << 24);
  }
  return v;
}

template <typename T>
json gates_json(const std::optional<GateGroup<T>>& g) {
  if (!g) return nullptr;
  std::vector<double> la(g->log_alpha.value.values().begin(), g->log_alpha.value.values().end());
  return {{"granularity", to_string(g->granularity)},
          {"beta", g->hyper.beta},
          {"gamma", g->hyper.gamma},
          {"zeta", g->hyper.zeta},
          {"log_alpha", la}};
}

template <typename T>
std::optional<GateGroup<T>> gates_from_json(const json& j, const std::string& layer) {
  if (j.is_null()) return std::nullopt;
  GateGroup<T> g;
  g.granularity = granularity_from_string(j.at("granularity").get<std::string>());
  g.hyper = {j.at("beta").get<double>(), j.at("gamma").get<double>(), j.at("zeta").get<double>()};
  g.hyper.validate();
  const auto la = j.at("log_alpha").get<std::vector<double>>();
  g.log_alpha.name = layer + ".log_alpha";
  g.log_alpha.role = ParamRole::log_alpha;
  g.log_alpha.value = Tensor<T>({la.size()});
  for (std::size_t i = 0; i < la.size(); ++i) g.log_alpha.value[i] = static_cast<T>(la[i]);
  return g;
}

void append_blob(std::string& out, std::span<const float> values) {
  for (float f : values) {
    const auto bits = to_le(std::bit_cast<std::uint32_t>(f));
    char raw[4];
    std::memcpy(raw, &bits, 4);
    out.append(raw, 4);
  }
}

std::pair<json, std::string> read_container(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) {
    throw CheckpointError(path.string() + ": not a checkpoint (bad magic)");
  }
  std::uint32_t len = 0;
  std::memcpy(&len, bytes.data() + 8, 4);
  len = to_le(len);
  if (bytes.size() < 12 + std::size_t{len}) throw CheckpointError(path.string() + ": truncated header");
  json header;
  try {
    header = json::parse(bytes.substr(12, len));
  } catch (const json::parse_error& e) {
    throw CheckpointError(path.string() + ": corrupt header: " + e.what());
  }
  const int version = header.value("format_version", 0);
  if (version != kCheckpointFormatVersion) {
    throw CheckpointError(path.string() + ": unsupported format_version " + std::to_string(version));
  }
  return {std::move(header), bytes.substr(12 + len)};
}

}  // namespace

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const GatedModel<T>& m, const json& config,
                     const json& extra) {
  m.validate();
  json layers = json::array();
  json tensors = json::array();
  std::string blobs;
  auto add_tensor = [&](const Parameter<T>& p) {
    std::vector<float> values(p.value.numel());
    for (std::size_t i = 0; i < values.size(); ++i) values[i] = static_cast<float>(p.value[i]);
    tensors.push_back({{"name", p.name},
                       {"role", to_string(p.role)},
                       {"shape", p.value.shape()},
                       {"offset", blobs.size()},
                       {"count", values.size()}});
    append_blob(blobs, values);
  };
  for (const auto& layer : m.layers) {
    std::visit(
        [&](const auto& l) {
          using L = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<L, ConvLayer<T>>) {
            layers.push_back({{"type", "conv"},
                              {"name", l.name},
                              {"weight", l.weight.name},
                              {"bias", l.bias.name},
                              {"stride", l.params.stride},
                              {"padding", l.params.padding},
                              {"gates", gates_json(l.gates)}});
            add_tensor(l.weight);
            add_tensor(l.bias);
          } else if constexpr (std::is_same_v<L, DenseLayer<T>>) {
            layers.push_back({{"type", "dense"},
                              {"name", l.name},
                              {"weight", l.weight.name},
                              {"bias", l.bias.name},
                              {"input_select", l.input_select},
                              {"gates", gates_json(l.gates)}});
            add_tensor(l.weight);
            add_tensor(l.bias);
          } else if constexpr (std::is_same_v<L, MaxPool2x2>) {
            layers.push_back({{"type", "maxpool2x2"}});
          } else if constexpr (std::is_same_v<L, Relu>) {
            layers.push_back({{"type", "relu"}});
          } else {
            layers.push_back({{"type", "flatten"}});
          }
        },
        layer);
  }
  const json header = {{"format_version", kCheckpointFormatVersion},
                       {"model",
                        {{"name", m.name}, {"input_shape", m.input_shape}, {"classes", m.classes}, {"layers", layers}}},
                       {"config", config},
                       {"extra", extra},
                       {"tensors", tensors},
                       {"blob_encoding", "float32-le"}};
  const std::string text = header.dump();
  const auto len = to_le(static_cast<std::uint32_t>(text.size()));
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    os.write(kCheckpointMagic, 8);
    os.write(reinterpret_cast<const char*>(&len), 4);
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    os.write(blobs.data(), static_cast<std::streamsize>(blobs.size()));
    if (!os) throw CheckpointError("cannot write checkpoint " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

json read_checkpoint_header(const std::filesystem::path& path) { return read_container(path).first; }

template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::filesystem::path& path) {
  auto [header, blobs] = read_container(path);
  LoadedCheckpoint<T> out;
  try {
    std::map<std::string, json> table;
    for (const auto& t : header.at("tensors")) table[t.at("name").get<std::string>()] = t;
    auto load_param = [&](const std::string& name, ParamRole role) {
      const auto it = table.find(name);
      if (it == table.end()) throw CheckpointError(path.string() + ": missing tensor '" + name + "'");
      const auto& t = it->second;
      Parameter<T> p;
      p.name = name;
      p.role = role;
      p.value = Tensor<T>(t.at("shape").get<Shape>());
      const auto offset = t.at("offset").get<std::size_t>();
      const auto count = t.at("count").get<std::size_t>();
      if (count != p.value.numel() || offset + 4 * count > blobs.size()) {
        throw CheckpointError(path.string() + ": tensor '" + name + "' out of bounds");
      }
      for (std::size_t i = 0; i < count; ++i) {
        std::uint32_t bits = 0;
        std::memcpy(&bits, blobs.data() + offset + 4 * i, 4);
        p.value[i] = static_cast<T>(std::bit_cast<float>(to_le(bits)));
      }
      return p;
    };
    const auto& mj = header.at("model");
    auto& m = out.model;
    m.name = mj.at("name").get<std::string>();
    m.input_shape = mj.at("input_shape").get<Shape>();
    m.classes = mj.at("classes").get<std::size_t>();
    for (const auto& lj : mj.at("layers")) {
      const auto type = lj.at("type").get<std::string>();
      if (type == "conv") {
        ConvLayer<T> l;
        l.name = lj.at("name").get<std::string>();
        l.weight = load_param(lj.at("weight").get<std::string>(), ParamRole::weight);
        l.bias = load_param(lj.at("bias").get<std::string>(), ParamRole::bias);
        l.params.stride = lj.at("stride").get<std::size_t>();
        l.params.padding = lj.at("padding").get<std::size_t>();
        l.gates = gates_from_json<T>(lj.at("gates"), l.name);
        m.layers.emplace_back(std::move(l));
      } else if (type == "dense") {
        DenseLayer<T> l;
        l.name = lj.at("name").get<std::string>();
        l.weight = load_param(lj.at("weight").get<std::string>(), ParamRole::weight);
        l.bias = load_param(lj.at("bias").get<std::string>(), ParamRole::bias);
        l.input_select = lj.value("input_select", std::vector<std::size_t>{});
        l.gates = gates_from_json<T>(lj.at("gates"), l.name);
        m.layers.emplace_back(std::move(l));
      } else if (type == "maxpool2x2") {
        m.layers.emplace_back(MaxPool2x2{});
      } else if (type == "relu") {
        m.layers.emplace_back(Relu{});
      } else if (type == "flatten") {
        m.layers.emplace_back(Flatten{});
      } else {
        throw CheckpointError(path.string() + ": unknown layer type '" + type + "'");
      }
    }
    m.validate();
  } catch (const json::exception& e) {
    throw CheckpointError(path.string() + ": malformed header: " + e.what());
  } catch (const ShapeError& e) {
    throw CheckpointError(path.string() + ": inconsistent topology: " + e.what());
  }
  out.config = header.value("config", json::object());
  out.extra = header.value("extra", json::object());
  return out;
}

template void save_checkpoint(const std::filesystem::path&, const GatedModel<float>&, const json&, const json&);
template void save_checkpoint(const std::filesystem::path&, const GatedModel<double>&, const json&, const json&);
template LoadedCheckpoint<float> load_checkpoint(const std::filesystem::path&);
template LoadedCheckpoint<double> load_checkpoint(const std::filesystem::path&);

}  // namespace flopsgate
