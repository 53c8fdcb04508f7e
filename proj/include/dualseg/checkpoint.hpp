#pragma once

#include <string>

#include "dualseg/network.hpp"

// Checkpoint layout: a UTF-8 header terminated by the line "end", followed by
// a flat little-endian float32 payload.
//
//   dualseg-checkpoint
//   version 1
//   config in_channels 1 base_channels 16 levels 4 dropout 0.2 reduction 8 input_size 64 attention 1
//   init_seed 42
//   param encoder.0.conv1.weight f32 16,1,3,3 0
//   ...
//   buffer encoder.0.bn1.running_mean f32 16 123456
//   ...
//   payload <bytes> crc32 <8 lowercase hex digits>
//   end
//
// Offsets are byte offsets into the payload. Entries follow the model's
// parameter order, then its buffer order.
namespace dualseg::checkpoint {

inline constexpr int format_version = 1;
inline constexpr const char* magic = "dualseg-checkpoint";

std::string serialize(network::Model<float>& model);
// `origin` names the source in error messages.
network::Model<float> deserialize(const std::string& bytes, const std::string& origin = "<memory>");

void save(network::Model<float>& model, const std::string& path);
// CorruptCheckpointError for malformed or truncated files,
// UnsupportedVersionError for an unknown version, CheckpointShapeError when
// the tensor table disagrees with the architecture its config describes.
network::Model<float> load(const std::string& path);

}  // namespace dualseg::checkpoint
