#pragma once

// Checkpoint file: "ADVRSA01", u64 header length, UTF-8 JSON header (config +
// metadata + parameter manifest), then every parameter tensor as raw
// little-endian f64 in declaration order.

#include <advrsa/io.hpp>
#include <advrsa/network.hpp>

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>

namespace advrsa {

inline constexpr std::string_view checkpoint_magic = "ADVRSA01";
inline constexpr int checkpoint_format_version = 1;

struct TrainingMetadata {
  std::uint64_t seed = 0;
  std::size_t epochs = 0;
  double final_accuracy = 0.0;
  std::string config_hash;

  friend bool operator==(const TrainingMetadata&, const TrainingMetadata&) = default;
};

struct NetworkCheckpoint {
  Network network{NetworkConfig::toy()};
  TrainingMetadata metadata;
};

inline nlohmann::json layer_to_json(const LayerSpec& l) {
  nlohmann::json j{{"kind", to_string(l.kind)}};
  switch (l.kind) {
    case LayerKind::conv:
      j["channels"] = l.channels;
      j["kernel"] = l.kernel;
      j["stride"] = l.stride;
      j["padding"] = l.padding;
      break;
    case LayerKind::maxpool:
      j["window"] = l.kernel;
      j["stride"] = l.stride;
      break;
    case LayerKind::lrn:
      j["k"] = l.lrn.k;
      j["alpha"] = l.lrn.alpha;
      j["beta"] = l.lrn.beta;
      j["n"] = l.lrn.n;
      break;
    case LayerKind::affine: j["outputs"] = l.outputs; break;
    case LayerKind::relu:
    case LayerKind::softmax: break;
  }
  return j;
}

inline LayerSpec layer_from_json(const nlohmann::json& j) {
  const LayerKind kind = layer_kind_from_string(j.at("kind").get<std::string>());
  switch (kind) {
    case LayerKind::conv:
      return LayerSpec::conv(j.at("channels"), j.at("kernel"), j.at("stride"), j.at("padding"));
    case LayerKind::maxpool: return LayerSpec::maxpool(j.at("window"), j.at("stride"));
    case LayerKind::lrn: return LayerSpec::local_response_norm({j.at("k"), j.at("alpha"), j.at("beta"), j.at("n")});
    case LayerKind::affine: return LayerSpec::affine(j.at("outputs"));
    case LayerKind::relu: return LayerSpec::relu();
    case LayerKind::softmax: return LayerSpec::softmax();
  }
  throw std::logic_error("unhandled layer kind");
}

inline nlohmann::json config_to_json(const NetworkConfig& c) {
  nlohmann::json layers = nlohmann::json::array();
  for (const LayerSpec& l : c.layers) layers.push_back(layer_to_json(l));
  nlohmann::json report = nlohmann::json::array();
  for (const ReportLayer& r : c.report_layers) {
    report.push_back({{"name", r.name}, {"layer", r.layer}, {"stage", to_string(c.layers.at(r.layer).kind)}});
  }
  return {{"input_shape", c.input_shape}, {"classes", c.classes}, {"layers", layers}, {"report_layers", report}, {"input_offset", c.input_offset}};
}

inline NetworkConfig config_from_json(const nlohmann::json& j) {
  NetworkConfig c;
  c.input_shape = j.at("input_shape").get<Shape>();
  c.classes = j.at("classes");
  c.layers.clear();
  for (const auto& l : j.at("layers")) c.layers.push_back(layer_from_json(l));
  for (const auto& r : j.at("report_layers")) c.report_layers.push_back({r.at("name"), r.at("layer")});
  c.input_offset = j.value("input_offset", 0.0);
  return c;
}

inline std::string encode_checkpoint(const NetworkCheckpoint& ck) {
  const Network& net = ck.network;
  nlohmann::json params = nlohmann::json::array();
  for (const Tensor& t : net.parameters()) params.push_back({{"shape", t.shape()}});
  const nlohmann::json header{
      {"format_version", checkpoint_format_version},
      {"toolkit_version", std::string(toolkit_version)},
      {"config", config_to_json(net.config())},
      {"metadata",
       {{"seed", ck.metadata.seed},
        {"epochs", ck.metadata.epochs},
        {"final_accuracy", ck.metadata.final_accuracy},
        {"config_hash", ck.metadata.config_hash}}},
      {"parameters", params}};
  const std::string text = header.dump();
  ByteWriter w;
  w.bytes(checkpoint_magic);
  w.u64(text.size());
  w.bytes(text);
  for (const Tensor& t : net.parameters()) w.f64s(t.values());
  return w.str();
}

inline NetworkCheckpoint decode_checkpoint(std::string bytes, const std::string& name) {
  ByteReader r(std::move(bytes), name);
  if (r.bytes(checkpoint_magic.size()) != checkpoint_magic) r.fail("bad magic (expected ADVRSA01)");
  const std::uint64_t len = r.u64();
  const std::size_t header_at = r.position();
  const std::string_view text = r.bytes(len);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(name + " at byte " + std::to_string(header_at + e.byte) + ": invalid JSON header: " + e.what());
  }
  try {
    if (header.at("format_version").get<int>() != checkpoint_format_version) {
      throw FormatError(name + ": unsupported checkpoint format version " + header.at("format_version").dump());
    }
    NetworkCheckpoint ck{Network(config_from_json(header.at("config"))), {}};
    const auto& meta = header.at("metadata");
    ck.metadata.seed = meta.at("seed");
    ck.metadata.epochs = meta.at("epochs");
    ck.metadata.final_accuracy = meta.at("final_accuracy");
    ck.metadata.config_hash = meta.at("config_hash");
    const auto& manifest = header.at("parameters");
    auto& params = ck.network.parameters();
    if (manifest.size() != params.size()) {
      r.fail("header lists " + std::to_string(manifest.size()) + " parameter tensors, config implies " +
             std::to_string(params.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (manifest[i].at("shape").get<Shape>() != params[i].shape()) {
        r.fail("parameter " + std::to_string(i) + " shape " + manifest[i].at("shape").dump() +
               " inconsistent with config " + shape_string(params[i].shape()));
      }
      r.f64s(params[i].values());
    }
    if (!r.at_end()) r.fail("trailing bytes after parameter payload");
    return ck;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(name + ": malformed checkpoint header: " + e.what());
  } catch (const ShapeError& e) {
    throw FormatError(name + ": inconsistent network config: " + e.what());
  } catch (const std::invalid_argument& e) {
    throw FormatError(name + ": invalid network config: " + e.what());
  }
}

inline void save_checkpoint(const std::filesystem::path& path, const NetworkCheckpoint& ck) {
  write_text_file(path, encode_checkpoint(ck));
}

inline NetworkCheckpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_text_file(path), path.string());
}

}  // namespace advrsa
