#pragma once

#include <cstdint>
#include <string>

#include "qaa/attacks.hpp"
#include "qaa/dataset.hpp"
#include "qaa/model.hpp"

namespace qaa {

// Container layout shared by models ("QAAM") and datasets ("QAAD"):
//   magic[4] | u32 version | little-endian payload | u32 CRC-32 of all prior bytes
// Tensors are stored as u32 rank, i64 dims, raw f32 values.
inline constexpr std::uint32_t kModelFormatVersion = 1;
inline constexpr std::uint32_t kDataFormatVersion = 1;

/// Throws ValidationError if the file cannot be written.
void save_model(const LayerGraph& model, const std::string& path);

/// Throws FormatError (wrong magic), ChecksumError (truncated or corrupted)
/// or VersionError, and validates the loaded graph.
LayerGraph load_model(const std::string& path);

std::string encode_model(const LayerGraph& model);
LayerGraph decode_model(const std::string& bytes);

void save_dataset(const Dataset& data, const std::string& path);
Dataset load_dataset(const std::string& path);

/// Stores every AdversarialSet field; AttackSpec is written as JSON text.
void save_adversarial(const AdversarialSet& adv, const std::string& path);
AdversarialSet load_adversarial(const std::string& path);

void write_text(const std::string& path, const std::string& text);
std::string read_text(const std::string& path);

}  // namespace qaa
