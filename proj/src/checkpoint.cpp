#include "dsm/checkpoint.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

namespace dsm::ckpt {

namespace {

// Parameter blobs are written little-endian; this code targets little-endian
// hosts and asserts so rather than byte-swapping.
static_assert(std::endian::native == std::endian::little,
              "checkpoint serialization assumes a little-endian host");

void append_u32(std::string& out, std::uint32_t v) {
  char buf[4];
  std::memcpy(buf, &v, 4);
  out.append(buf, 4);
}

std::uint32_t read_u32(const std::string& bytes, std::size_t offset) {
  std::uint32_t v;
  std::memcpy(&v, bytes.data() + offset, 4);
  return v;
}

std::uint32_t crc32_of(const double* data, std::size_t count) {
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, reinterpret_cast<const Bytef*>(data),
              static_cast<uInt>(count * sizeof(double)));
  return static_cast<std::uint32_t>(crc);
}

}  // namespace

const char* error_kind_name(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::bad_magic: return "bad_magic";
    case ErrorKind::truncated: return "truncated";
    case ErrorKind::manifest_error: return "manifest_error";
    case ErrorKind::checksum_mismatch: return "checksum_mismatch";
    case ErrorKind::shape_mismatch: return "shape_mismatch";
  }
  return "unknown";
}

void save(const std::string& path,
          const std::vector<std::pair<std::string, const ad::Tensor*>>& tensors,
          const nlohmann::json& meta, const std::string& magic) {
  std::vector<std::pair<std::string, const ad::Tensor*>> sorted(tensors);
  std::sort(sorted.begin(), sorted.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });

  nlohmann::json manifest = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& [name, t] : sorted) {
    nlohmann::json entry;
    entry["name"] = name;
    entry["dtype"] = "f64";
    entry["shape"] = t->shape;
    entry["offset"] = offset;
    entry["checksum"] = crc32_of(t->values.data(), t->values.size());
    manifest.push_back(entry);
    offset += t->values.size() * sizeof(double);
  }

  std::string manifest_str = manifest.dump();
  std::string meta_str = meta.dump();
  std::string out;
  out.reserve(4 + 8 + manifest_str.size() + meta_str.size() + offset);
  out.append(magic);
  append_u32(out, static_cast<std::uint32_t>(manifest_str.size()));
  out.append(manifest_str);
  append_u32(out, static_cast<std::uint32_t>(meta_str.size()));
  out.append(meta_str);
  for (const auto& [name, t] : sorted) {
    out.append(reinterpret_cast<const char*>(t->values.data()),
               t->values.size() * sizeof(double));
  }

  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  if (!file) throw CheckpointError(ErrorKind::truncated, "cannot open for writing: " + path);
  file.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!file) throw CheckpointError(ErrorKind::truncated, "short write to " + path);
}

Loaded load(const std::string& path, const std::string& expected_magic) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw CheckpointError(ErrorKind::truncated, "cannot open checkpoint: " + path);
  std::string bytes((std::istreambuf_iterator<char>(file)), std::istreambuf_iterator<char>());

  if (bytes.size() < 4 || bytes.compare(0, 4, expected_magic) != 0) {
    throw CheckpointError(ErrorKind::bad_magic,
                          "not a " + expected_magic + " checkpoint: " + path);
  }
  if (bytes.size() < 8) throw CheckpointError(ErrorKind::truncated, "file ends inside header");
  std::size_t cursor = 4;
  std::uint32_t manifest_len = read_u32(bytes, cursor);
  cursor += 4;
  if (bytes.size() < cursor + manifest_len + 4) {
    throw CheckpointError(ErrorKind::truncated, "file ends inside manifest");
  }
  nlohmann::json manifest =
      nlohmann::json::parse(bytes.substr(cursor, manifest_len), nullptr, false);
  cursor += manifest_len;
  if (manifest.is_discarded() || !manifest.is_array()) {
    throw CheckpointError(ErrorKind::manifest_error, "manifest is not a JSON array");
  }
  std::uint32_t meta_len = read_u32(bytes, cursor);
  cursor += 4;
  if (bytes.size() < cursor + meta_len) {
    throw CheckpointError(ErrorKind::truncated, "file ends inside metadata");
  }
  nlohmann::json meta = nlohmann::json::parse(bytes.substr(cursor, meta_len), nullptr, false);
  cursor += meta_len;
  if (meta.is_discarded()) {
    throw CheckpointError(ErrorKind::manifest_error, "metadata is not valid JSON");
  }
  const std::size_t blob_size = bytes.size() - cursor;

  Loaded out;
  out.meta = std::move(meta);
  for (const auto& entry : manifest) {
    if (!entry.is_object() || !entry.contains("name") || !entry["name"].is_string() ||
        !entry.contains("dtype") || !entry.contains("shape") || !entry["shape"].is_array() ||
        !entry.contains("offset") || !entry.contains("checksum")) {
      throw CheckpointError(ErrorKind::manifest_error, "manifest entry missing fields");
    }
    std::string name = entry["name"].get<std::string>();
    if (entry["dtype"] != "f64") {
      throw CheckpointError(ErrorKind::manifest_error, "unsupported dtype for " + name);
    }
    ad::Shape shape;
    for (const auto& d : entry["shape"]) {
      if (!d.is_number_unsigned()) {
        throw CheckpointError(ErrorKind::manifest_error, "bad shape for " + name);
      }
      shape.push_back(d.get<std::size_t>());
    }
    std::size_t count = ad::numel(shape);
    std::size_t offset = entry["offset"].get<std::size_t>();
    if (offset + count * sizeof(double) > blob_size) {
      throw CheckpointError(ErrorKind::truncated, "data blob too short for " + name);
    }
    ad::Tensor t = ad::Tensor::zeros(shape);
    std::memcpy(t.values.data(), bytes.data() + cursor + offset, count * sizeof(double));
    std::uint32_t want = entry["checksum"].get<std::uint32_t>();
    std::uint32_t got = crc32_of(t.values.data(), t.values.size());
    if (want != got) {
      throw CheckpointError(ErrorKind::checksum_mismatch, "checksum mismatch for " + name);
    }
    out.tensors.emplace(std::move(name), std::move(t));
  }
  return out;
}

void load_into(const Loaded& loaded,
               const std::vector<std::pair<std::string, ad::Tensor*>>& tensors) {
  for (const auto& [name, target] : tensors) {
    auto it = loaded.tensors.find(name);
    if (it == loaded.tensors.end()) {
      throw CheckpointError(ErrorKind::shape_mismatch, "checkpoint lacks tensor " + name);
    }
    if (it->second.shape != target->shape) {
      throw CheckpointError(ErrorKind::shape_mismatch,
                            "shape mismatch for " + name + ": checkpoint " +
                                ad::shape_str(it->second.shape) + " vs model " +
                                ad::shape_str(target->shape));
    }
    target->values = it->second.values;
  }
}

}  // namespace dsm::ckpt
