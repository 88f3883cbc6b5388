#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "tbloc/network.hpp"

namespace tbloc {

struct CheckpointTensor {
  std::string name;
  Shape shape;
  std::vector<float> values;

  bool operator==(const CheckpointTensor&) const = default;
};

// Model parameters stored at 32-bit precision plus the metadata needed to
// rebuild and rank the model.
struct Checkpoint {
  ModelConfig model_config;
  std::string train_config_json = "{}";
  std::size_t epoch = 0;
  std::optional<double> val_ap;
  std::vector<CheckpointTensor> tensors;
};

Checkpoint make_checkpoint(const DetectorModel& model, std::size_t epoch,
                           std::optional<double> val_ap = std::nullopt,
                           std::string train_config_json = "{}");

// Copies the stored values into `model`. Throws IntegrityError when names or
// shapes differ from the model's parameters.
void load_into_model(const Checkpoint& ckpt, DetectorModel& model);
DetectorModel model_from_checkpoint(const Checkpoint& ckpt);

// Writes `path` (JSON manifest: names, shapes, byte offsets, epoch, AP,
// configs) and a sibling raw buffer of little-endian float32 values named
// after `path` with the extension replaced by ".bin".
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace tbloc
