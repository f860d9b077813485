#pragma once
// Checkpoint container: "FLAB1" magic, a JSON config record, a named group
// directory with byte offsets, then flat little-endian float32 arrays in
// directory order. Round-trips bit-exactly.

#include <string>

#include "factlab/model.hpp"

namespace factlab {

void save_checkpoint(const std::string& path, const TransformerModel& model);
TransformerModel load_checkpoint(const std::string& path);

} // namespace factlab
