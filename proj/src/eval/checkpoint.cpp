#include "capsct/eval/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include "capsct/ad/errors.hpp"

namespace capsct::eval {

using nlohmann::json;
using pipeline::ArchConfig;
using pipeline::CapsNet;

namespace {

constexpr char kMagic[4] = {'C', 'K', 'P', 'T'};
constexpr std::size_t kHeaderSize = 10;

void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>(v >> 8));
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(const std::string& in, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return v;
}

void put_floats(std::string& out, const std::vector<float>& values) {
  for (float v : values) put_u32(out, std::bit_cast<std::uint32_t>(v));
}

std::vector<float> get_floats(const std::string& in, std::size_t at, std::size_t count) {
  std::vector<float> out(count);
  for (std::size_t i = 0; i < count; ++i) out[i] = std::bit_cast<float>(get_u32(in, at + 4 * i));
  return out;
}

}  // namespace

json to_json(const ArchConfig& a) {
  json hidden = json::array();
  for (const auto& h : a.hidden) hidden.push_back({h.count, h.dim});
  return {{"input_size", a.input_size},
          {"channels", a.channels},
          {"strides", a.strides},
          {"kernel", a.kernel},
          {"pool", a.pool},
          {"dropout", a.dropout},
          {"primary_dim", a.primary_dim},
          {"hidden", hidden},
          {"classes", {a.classes.count, a.classes.dim}},
          {"routing_iterations", a.routing_iterations}};
}

ArchConfig arch_from_json(const json& j) {
  ArchConfig a;
  a.input_size = j.at("input_size").get<std::size_t>();
  a.channels = j.at("channels").get<std::array<std::size_t, 4>>();
  a.strides = j.at("strides").get<std::array<std::size_t, 4>>();
  a.kernel = j.at("kernel").get<std::size_t>();
  a.pool = j.at("pool").get<std::size_t>();
  a.dropout = j.at("dropout").get<double>();
  a.primary_dim = j.at("primary_dim").get<std::size_t>();
  a.hidden.clear();
  for (const auto& h : j.at("hidden")) a.hidden.push_back({h.at(0).get<std::size_t>(), h.at(1).get<std::size_t>()});
  a.classes = {j.at("classes").at(0).get<std::size_t>(), j.at("classes").at(1).get<std::size_t>()};
  a.routing_iterations = j.at("routing_iterations").get<int>();
  return a;
}

std::string checkpoint_bytes(const CapsNet<float>& net, const CheckpointMeta& meta) {
  json tensors = json::array();
  std::string payload;
  auto add = [&](const std::string& name, const ad::Shape& shape, const std::vector<float>& values) {
    tensors.push_back({{"name", name}, {"shape", shape}, {"offset", payload.size()}, {"count", values.size()}});
    put_floats(payload, values);
  };
  for (const auto& [name, t] : net.named_parameters()) add(name, t->shape, t->data);
  const auto& bn = net.bn_stats();
  add("bn.running_mean", {bn.mean.size()}, bn.mean);
  add("bn.running_var", {bn.var.size()}, bn.var);

  const json manifest = {{"arch", to_json(net.arch())},
                         {"config_hash", meta.config_hash},
                         {"metadata", {{"stage", meta.stage}, {"seed", meta.seed}, {"epochs", meta.epochs}, {"extra", meta.extra}}},
                         {"tensors", tensors},
                         {"payload_bytes", payload.size()}};
  const std::string text = manifest.dump();
  std::string out(kMagic, 4);
  put_u16(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  out += payload;
  return out;
}

void save_checkpoint(const CapsNet<float>& net, const CheckpointMeta& meta, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  const auto bytes = checkpoint_bytes(net, meta);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
}

LoadedCheckpoint parse_checkpoint(const std::string& bytes, const std::optional<std::string>& expected_config_hash) {
  if (bytes.size() < kHeaderSize || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw FormatError("checkpoint: bad magic at byte 0");
  }
  const auto version = static_cast<std::uint16_t>(static_cast<unsigned char>(bytes[4]) |
                                                  (static_cast<unsigned char>(bytes[5]) << 8));
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint: version " + std::to_string(version) + " at byte 4, expected " +
                      std::to_string(kCheckpointVersion));
  }
  const std::size_t manifest_len = get_u32(bytes, 6);
  if (bytes.size() < kHeaderSize + manifest_len) throw FormatError("checkpoint: truncated manifest");
  json manifest;
  try {
    manifest = json::parse(bytes.begin() + kHeaderSize, bytes.begin() + static_cast<std::ptrdiff_t>(kHeaderSize + manifest_len));
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("checkpoint manifest: ") + e.what());
  }
  const std::size_t base = kHeaderSize + manifest_len;

  try {
    const std::size_t payload_bytes = manifest.at("payload_bytes").get<std::size_t>();
    if (bytes.size() != base + payload_bytes) {
      throw FormatError("checkpoint: payload is " + std::to_string(bytes.size() - base) + " bytes, manifest says " +
                        std::to_string(payload_bytes));
    }
    const auto& md = manifest.at("metadata");
    LoadedCheckpoint out{CapsNet<float>(arch_from_json(manifest.at("arch")), 0),
                         {md.at("stage").get<std::string>(), md.at("seed").get<std::uint64_t>(),
                          md.at("epochs").get<int>(), manifest.at("config_hash").get<std::string>(), md.at("extra")},
                         {}};
    const auto& params = out.net.named_parameters();
    const auto& tensors = manifest.at("tensors");
    if (tensors.size() != params.size() + 2) {
      throw FormatError("checkpoint: " + std::to_string(tensors.size()) + " tensors for an architecture with " +
                        std::to_string(params.size()) + " parameters");
    }
    auto read = [&](const json& t, const std::string& name, std::size_t count) {
      if (t.at("name").get<std::string>() != name) {
        throw FormatError("checkpoint: expected tensor '" + name + "', found '" + t.at("name").get<std::string>() + "'");
      }
      const std::size_t offset = t.at("offset").get<std::size_t>();
      if (t.at("count").get<std::size_t>() != count || offset + 4 * count > payload_bytes) {
        throw FormatError("checkpoint: tensor '" + name + "' has the wrong size");
      }
      return get_floats(bytes, base + offset, count);
    };
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& [name, tensor] = params[i];
      if (tensors[i].at("shape").get<ad::Shape>() != tensor->shape) {
        throw FormatError("checkpoint: shape mismatch for '" + name + "'");
      }
      tensor->data = read(tensors[i], name, tensor->size());
    }
    auto& bn = out.net.bn_stats();
    const std::size_t channels = bn.mean.size();
    bn.mean = read(tensors[params.size()], "bn.running_mean", channels);
    bn.var = read(tensors[params.size() + 1], "bn.running_var", channels);
    bn.initialized = true;

    if (expected_config_hash && *expected_config_hash != out.meta.config_hash) {
      out.warnings.push_back("checkpoint config hash " + out.meta.config_hash + " differs from current config " +
                             *expected_config_hash + "; loaded for inference only");
    }
    return out;
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint manifest: ") + e.what());
  }
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, const std::optional<std::string>& expected_config_hash) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes, expected_config_hash);
}

}  // namespace capsct::eval
