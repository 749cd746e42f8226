#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "fuselm/tensor.hpp"

namespace fuselm {

// Binary container for model state: a JSON metadata blob plus named tensors.
//
// Layout (all integers little-endian):
//   magic "FLMC" | u32 version | u64 meta_len | meta bytes (UTF-8 JSON)
//   u64 tensor_count
//   per tensor: u64 name_len | name | u32 ndim | i64 dims[ndim] | f64 data[]
//   u64 fnv1a checksum of everything before it
//
// Files are written to a temporary sibling and renamed into place, so a crash
// mid-write never leaves a truncated file under the final name. Loads verify
// magic, version and checksum and throw IoError on any mismatch.
struct Container {
  std::string meta_json;  // canonical JSON text (callers keep keys sorted)
  std::vector<std::pair<std::string, Tensor>> tensors;
};

inline constexpr uint32_t kContainerVersion = 1;

void save_container(const std::filesystem::path& path, const Container& container);
Container load_container(const std::filesystem::path& path);

}  // namespace fuselm
