#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dsm/tensor.hpp"
#include "json.hpp"

namespace dsm::ckpt {

enum class ErrorKind {
  bad_magic,
  truncated,
  manifest_error,
  checksum_mismatch,
  shape_mismatch,
};

struct CheckpointError : std::runtime_error {
  ErrorKind kind;
  CheckpointError(ErrorKind k, const std::string& msg) : std::runtime_error(msg), kind(k) {}
};

const char* error_kind_name(ErrorKind kind);

inline constexpr const char* kDsmMagic = "DSM1";
inline constexpr const char* kLmMagic = "LMB1";

// Layout: 4-byte magic; u32 little-endian manifest length; manifest JSON
// (array of {name, dtype:"f64", shape, offset, checksum} sorted by name,
// offsets relative to the data blob, checksum = CRC-32 of the tensor's
// little-endian bytes); u32 meta length; meta JSON; raw data blob.
void save(const std::string& path,
          const std::vector<std::pair<std::string, const ad::Tensor*>>& tensors,
          const nlohmann::json& meta, const std::string& magic = kDsmMagic);

struct Loaded {
  std::map<std::string, ad::Tensor> tensors;
  nlohmann::json meta;
};

Loaded load(const std::string& path, const std::string& expected_magic = kDsmMagic);

// Restores into existing tensors; a missing name or differing shape raises
// shape_mismatch naming the tensor.
void load_into(const Loaded& loaded,
               const std::vector<std::pair<std::string, ad::Tensor*>>& tensors);

}  // namespace dsm::ckpt
