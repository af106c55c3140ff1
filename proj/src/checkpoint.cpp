#include "tma/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <fstream>
#include <set>
#include <unordered_map>

#include <json.hpp>

namespace tma {

namespace {

using json = nlohmann::json;

constexpr char kMagic[4] = {'T', 'M', 'A', 'B'};
constexpr std::uint32_t kVersion = 1;

void reject_unknown_keys(const json& obj, const std::set<std::string>& allowed,
                         const std::string& where) {
  for (const auto& [key, value] : obj.items()) {
    if (!allowed.count(key)) {
      throw ConfigError("unknown key '" + key + "' in " + where);
    }
  }
}

// ---- little-endian primitives ----

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }

class Reader {
 public:
  Reader(std::string data, std::string origin)
      : data_(std::move(data)), origin_(std::move(origin)) {}

  std::uint32_t u32() { return static_cast<std::uint32_t>(uint_n(4)); }
  std::uint64_t u64() { return uint_n(8); }
  float f32() { return std::bit_cast<float>(u32()); }

  std::string bytes(std::size_t n) {
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t remaining() const { return data_.size() - pos_; }
  std::size_t pos() const { return pos_; }

  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) {
      throw IoError(origin_ + ": truncated (wanted " + std::to_string(n) + " bytes at offset " +
                    std::to_string(pos_) + ", " + std::to_string(data_.size() - pos_) +
                    " left)");
    }
  }

 private:
  std::uint64_t uint_n(int width) {
    need(static_cast<std::size_t>(width));
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    }
    pos_ += static_cast<std::size_t>(width);
    return v;
  }

  std::string data_;
  std::string origin_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string config_to_json(const ModelConfig& config, int indent) {
  json j;
  j["in_channels"] = config.in_channels;
  j["stage_channels"] = config.stage_channels;
  j["heads"] = config.heads;
  j["num_targets"] = config.num_targets;
  j["extents"] = config.extents;
  j["value_enhance"] =
      config.value_enhance == ValueEnhance::kDepthwise3 ? "depthwise3" : "identity";
  j["ablation"] = {{"tmsm_encoder", config.ablation.tmsm_encoder},
                   {"tmsm_decoder", config.ablation.tmsm_decoder},
                   {"tmcm", config.ablation.tmcm},
                   {"deep_supervision", config.ablation.deep_supervision}};
  return j.dump(indent);
}

ModelConfig config_from_json(const std::string& text, const ModelConfig& base) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  reject_unknown_keys(j,
                      {"in_channels", "stage_channels", "heads", "num_targets", "extents",
                       "value_enhance", "ablation"},
                      "model config");
  ModelConfig config = base;
  try {
    if (j.contains("in_channels")) config.in_channels = j["in_channels"].get<std::size_t>();
    if (j.contains("stage_channels")) {
      config.stage_channels = j["stage_channels"].get<std::array<std::size_t, 4>>();
    }
    if (j.contains("heads")) config.heads = j["heads"].get<std::size_t>();
    if (j.contains("num_targets")) config.num_targets = j["num_targets"].get<std::size_t>();
    if (j.contains("extents")) config.extents = j["extents"].get<std::array<std::size_t, 3>>();
    if (j.contains("value_enhance")) {
      const std::string v = j["value_enhance"].get<std::string>();
      if (v == "depthwise3") {
        config.value_enhance = ValueEnhance::kDepthwise3;
      } else if (v == "identity") {
        config.value_enhance = ValueEnhance::kIdentity;
      } else {
        throw ConfigError("value_enhance must be 'depthwise3' or 'identity', got '" + v + "'");
      }
    }
    if (j.contains("ablation")) {
      const json& a = j["ablation"];
      if (!a.is_object()) throw ConfigError("ablation must be a JSON object");
      reject_unknown_keys(a, {"tmsm_encoder", "tmsm_decoder", "tmcm", "deep_supervision"},
                          "ablation");
      if (a.contains("tmsm_encoder")) config.ablation.tmsm_encoder = a["tmsm_encoder"].get<bool>();
      if (a.contains("tmsm_decoder")) config.ablation.tmsm_decoder = a["tmsm_decoder"].get<bool>();
      if (a.contains("tmcm")) config.ablation.tmcm = a["tmcm"].get<bool>();
      if (a.contains("deep_supervision")) {
        config.ablation.deep_supervision = a["deep_supervision"].get<bool>();
      }
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model config field has the wrong type: ") + e.what());
  }
  return config;
}

void save_checkpoint(const std::string& path, const Model<float>& model) {
  NamedTensors<float> named;
  model.params(named);
  model.buffers(named);

  std::string manifest;
  std::string payload;
  put_u32(manifest, static_cast<std::uint32_t>(named.size()));
  for (const auto& [name, tensor] : named) {
    put_u32(manifest, static_cast<std::uint32_t>(name.size()));
    manifest += name;
    put_u32(manifest, static_cast<std::uint32_t>(tensor.rank()));
    for (std::size_t axis = 0; axis < tensor.rank(); ++axis) {
      put_u64(manifest, tensor.extent(axis));
    }
    put_u64(manifest, payload.size());
    for (float v : tensor.data()) put_f32(payload, v);
  }

  std::string out(kMagic, 4);
  put_u32(out, kVersion);
  const std::string config_json = config_to_json(model.config);
  put_u32(out, static_cast<std::uint32_t>(config_json.size()));
  out += config_json;
  out += manifest;
  put_u64(out, payload.size());
  out += payload;

  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  if (!file) throw IoError("cannot open '" + path + "' for writing");
  file.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!file) throw IoError("short write to '" + path + "'");
}

Model<float> load_checkpoint(const std::string& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw IoError("cannot open checkpoint '" + path + "'");
  std::string data((std::istreambuf_iterator<char>(file)), std::istreambuf_iterator<char>());
  Reader r(std::move(data), "checkpoint '" + path + "'");

  if (r.bytes(4) != std::string(kMagic, 4)) {
    throw IoError("checkpoint '" + path + "': bad magic, not a TMAB file");
  }
  const std::uint32_t version = r.u32();
  if (version != kVersion) {
    throw IoError("checkpoint '" + path + "': unsupported version " + std::to_string(version));
  }
  const std::uint32_t config_len = r.u32();
  ModelConfig config = config_from_json(r.bytes(config_len));
  Model<float> model = Model<float>::build(config, 0);

  NamedTensors<float> named;
  model.params(named);
  model.buffers(named);
  std::unordered_map<std::string, Tensor<float>*> lookup;
  for (auto& [name, tensor] : named) lookup[name] = &tensor;

  struct Entry {
    std::string name;
    Shape shape;
    std::uint64_t offset;
  };
  const std::uint32_t count = r.u32();
  std::vector<Entry> entries;
  entries.reserve(count);
  std::set<std::string> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    Entry e;
    e.name = r.bytes(r.u32());
    const std::uint32_t rank = r.u32();
    for (std::uint32_t axis = 0; axis < rank; ++axis) e.shape.push_back(r.u64());
    e.offset = r.u64();
    if (!lookup.count(e.name)) {
      throw IoError("checkpoint '" + path + "': manifest entry '" + e.name +
                    "' is not a parameter of the embedded config");
    }
    if (!seen.insert(e.name).second) {
      throw IoError("checkpoint '" + path + "': duplicate manifest entry '" + e.name + "'");
    }
    if (lookup[e.name]->shape() != e.shape) {
      throw IoError("checkpoint '" + path + "': parameter '" + e.name + "' has shape " +
                    shape_str(e.shape) + ", embedded config requires " +
                    shape_str(lookup[e.name]->shape()));
    }
    entries.push_back(std::move(e));
  }
  for (const auto& [name, tensor] : named) {
    if (!seen.count(name)) {
      throw IoError("checkpoint '" + path + "': manifest is missing parameter '" + name + "'");
    }
  }

  const std::uint64_t payload_size = r.u64();
  const std::string payload = r.bytes(payload_size);
  // validate every range before touching the model so a bad manifest never
  // yields a partially overwritten model
  for (const Entry& e : entries) {
    const std::uint64_t bytes = static_cast<std::uint64_t>(lookup[e.name]->size()) * 4;
    if (e.offset > payload_size || payload_size - e.offset < bytes) {
      throw IoError("checkpoint '" + path + "': payload truncated for parameter '" + e.name +
                    "'");
    }
  }
  for (const Entry& e : entries) {
    Tensor<float>& dst = *lookup[e.name];
    const char* src = payload.data() + e.offset;
    for (std::size_t i = 0; i < dst.size(); ++i) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) {
        bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(src[i * 4 + b])) << (8 * b);
      }
      dst.data()[i] = std::bit_cast<float>(bits);
    }
  }
  return model;
}

}  // namespace tma
