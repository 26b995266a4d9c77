#pragma once

#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "tmmnn/model.hpp"

namespace tmmnn {

// Binary container used for all persisted artifacts:
//   magic "TMMN" | version u16 LE | header length u64 LE | JSON header |
//   raw little-endian f32 payload, row-major.
// The header carries a kind tag, kind-specific metadata, and ordered layer
// records {name, shape, byte_offset, byte_len} that tile the payload exactly.
struct Blob {
  std::string kind;
  nlohmann::ordered_json meta;  // merged into the header
  std::vector<std::pair<std::string, Mat>> records;
};

void write_blob(const std::string& path, const Blob& blob);
Blob read_blob(const std::string& path);

void save_checkpoint(const Classifier& model, const std::string& path);
Classifier load_checkpoint(const std::string& path);

nlohmann::ordered_json model_config_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::ordered_json& j);

}  // namespace tmmnn
