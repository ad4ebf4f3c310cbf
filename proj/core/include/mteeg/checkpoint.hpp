#pragma once

#include <string>

#include "mteeg/model.hpp"

namespace mteeg {

// Checkpoint format, little-endian throughout:
//   magic "MTEE", version u32, variant u8,
//   task table (count u32, then per task: id u32, name, num_classes u32,
//     loss u8, channels u32, duration f64, subsample f64),
//   model config + channel registry,
//   tensor directory (count u32, then per entry: length-prefixed UTF-8 name,
//     dtype u8, rank u8, dims u64[], byte offset u64),
//   raw f64 payloads.
// Strings are u32 length + bytes.
void save_checkpoint(const ModelState& model, const std::string& path);
ModelState load_checkpoint(const std::string& path);

}  // namespace mteeg
