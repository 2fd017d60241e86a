#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "json.hpp"

#include "moedis/tensor.hpp"

namespace moedis {

/// Named tensors plus free-form JSON metadata.
///
/// On disk: the 8-byte magic "MOEDCKPT", a little-endian u64 header length,
/// the UTF-8 JSON header, then each tensor as raw little-endian float64 in
/// header order. The header lists {"name", "shape"} per tensor under
/// "tensors", with "format_version", "dtype" ("float64") and "meta".
/// Tensors are kept in name order so equal contents serialize to equal bytes.
struct Checkpoint {
  static constexpr int kFormatVersion = 1;

  nlohmann::json meta = nlohmann::json::object();
  std::map<std::string, Tensor> tensors;

  void put(const std::string& name, Tensor t) { tensors.insert_or_assign(name, std::move(t)); }
  const Tensor& get(const std::string& name) const;
  bool has(const std::string& name) const { return tensors.count(name) != 0; }

  // Copies every tensor and meta key of `other`, overwriting duplicates.
  void merge(const Checkpoint& other);
};

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::string& bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& bytes);

}  // namespace moedis
