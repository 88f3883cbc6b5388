#include "tbloc/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>

#include "json.hpp"

#include "tbloc/error.hpp"

namespace tbloc {

namespace {

using json = nlohmann::ordered_json;

constexpr const char* kFormat = "tbloc-checkpoint-1";

std::uint32_t to_little(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::little) return v;
  return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
}

std::filesystem::path buffer_path(const std::filesystem::path& path) {
  auto p = path;
  p.replace_extension(".bin");
  return p;
}

}  // namespace

Checkpoint make_checkpoint(const DetectorModel& model, std::size_t epoch, std::optional<double> val_ap,
                           std::string train_config_json) {
  Checkpoint c;
  c.model_config = model.config();
  c.train_config_json = std::move(train_config_json);
  c.epoch = epoch;
  c.val_ap = val_ap;
  for (const auto& p : model.parameters()) {
    CheckpointTensor t{p.name, p.value.shape(), {}};
    t.values.reserve(p.value.numel());
    for (double v : p.value.data()) t.values.push_back(static_cast<float>(v));
    c.tensors.push_back(std::move(t));
  }
  return c;
}

void load_into_model(const Checkpoint& ckpt, DetectorModel& model) {
  auto& params = model.parameters();
  if (params.size() != ckpt.tensors.size()) {
    throw IntegrityError("checkpoint has " + std::to_string(ckpt.tensors.size()) + " tensors, model has " +
                         std::to_string(params.size()) + " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& t = ckpt.tensors[i];
    if (t.name != params[i].name) {
      throw IntegrityError("checkpoint tensor " + std::to_string(i) + " is '" + t.name + "', model expects '" +
                           params[i].name + "'");
    }
    if (t.shape != params[i].value.shape()) {
      throw IntegrityError("checkpoint tensor '" + t.name + "' has shape " + shape_to_string(t.shape) +
                           ", model expects " + shape_to_string(params[i].value.shape()));
    }
    if (t.values.size() != shape_numel(t.shape)) {
      throw IntegrityError("checkpoint tensor '" + t.name + "' holds the wrong number of values");
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto dst = params[i].value.mutable_data();
    const auto& src = ckpt.tensors[i].values;
    for (std::size_t k = 0; k < src.size(); ++k) dst[k] = static_cast<double>(src[k]);
  }
}

DetectorModel model_from_checkpoint(const Checkpoint& ckpt) {
  DetectorModel model = build_model(ckpt.model_config, 0);
  load_into_model(ckpt, model);
  return model;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const auto bin = buffer_path(path);
  json j;
  j["format"] = kFormat;
  j["epoch"] = ckpt.epoch;
  if (ckpt.val_ap) {
    j["val_ap"] = *ckpt.val_ap;
  } else {
    j["val_ap"] = nullptr;
  }
  j["model_config"] = json::parse(model_config_to_json(ckpt.model_config));
  j["train_config"] = json::parse(ckpt.train_config_json);
  j["buffer"] = bin.filename().string();

  std::vector<char> bytes;
  json tensors = json::array();
  for (const auto& t : ckpt.tensors) {
    tensors.push_back({{"name", t.name}, {"shape", t.shape}, {"offset", bytes.size()}});
    for (float v : t.values) {
      const std::uint32_t w = to_little(std::bit_cast<std::uint32_t>(v));
      char raw[4];
      std::memcpy(raw, &w, 4);
      bytes.insert(bytes.end(), raw, raw + 4);
    }
  }
  j["buffer_bytes"] = bytes.size();
  j["tensors"] = std::move(tensors);

  if (!path.parent_path().empty()) std::filesystem::create_directories(path.parent_path());
  std::ofstream bout(bin, std::ios::binary);
  if (!bout) throw IoError("cannot write " + bin.string());
  bout.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!bout) throw IoError("write failed: " + bin.string());
  std::ofstream jout(path);
  if (!jout) throw IoError("cannot write " + path.string());
  jout << j.dump(2) << '\n';
  if (!jout) throw IoError("write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  Checkpoint c;
  std::vector<std::pair<std::size_t, std::size_t>> spans;  // offset, count
  std::size_t expected_bytes = 0;
  std::filesystem::path bin;
  try {
    if (j.at("format").get<std::string>() != kFormat) throw ParseError(path.string() + ": unknown checkpoint format");
    c.epoch = j.at("epoch").get<std::size_t>();
    if (!j.at("val_ap").is_null()) c.val_ap = j.at("val_ap").get<double>();
    c.model_config = model_config_from_json(j.at("model_config").dump());
    c.train_config_json = j.at("train_config").dump();
    bin = path.parent_path() / j.at("buffer").get<std::string>();
    expected_bytes = j.at("buffer_bytes").get<std::size_t>();
    for (const auto& t : j.at("tensors")) {
      CheckpointTensor ct{t.at("name").get<std::string>(), t.at("shape").get<Shape>(), {}};
      spans.emplace_back(t.at("offset").get<std::size_t>(), shape_numel(ct.shape));
      c.tensors.push_back(std::move(ct));
    }
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }

  std::ifstream bin_in(bin, std::ios::binary);
  if (!bin_in) throw IoError("cannot open checkpoint buffer " + bin.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(bin_in)), std::istreambuf_iterator<char>());
  if (bytes.size() != expected_bytes) {
    throw IntegrityError(bin.string() + ": expected " + std::to_string(expected_bytes) + " bytes, found " +
                         std::to_string(bytes.size()));
  }
  for (std::size_t i = 0; i < c.tensors.size(); ++i) {
    const auto [offset, count] = spans[i];
    if (offset + 4 * count > bytes.size()) {
      throw IntegrityError(bin.string() + ": tensor '" + c.tensors[i].name + "' needs bytes up to " +
                           std::to_string(offset + 4 * count) + ", buffer has " + std::to_string(bytes.size()));
    }
    auto& values = c.tensors[i].values;
    values.resize(count);
    for (std::size_t k = 0; k < count; ++k) {
      std::uint32_t w;
      std::memcpy(&w, bytes.data() + offset + 4 * k, 4);
      values[k] = std::bit_cast<float>(to_little(w));
    }
  }
  return c;
}

}  // namespace tbloc
