#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "multiref/tensor.hpp"

namespace multiref {

/// Named-tensor archive with a JSON manifest. Tensor payloads are raw
/// little-endian doubles, so save -> load round-trips bit-exactly.
struct Blob {
    nlohmann::json manifest;
    std::vector<std::pair<std::string, Tensor>> tensors;

    const Tensor& find(const std::string& name) const;
    bool contains(const std::string& name) const;
};

void write_blob(const std::filesystem::path& path, const Blob& blob);
Blob read_blob(const std::filesystem::path& path);

/// NumPy .npy writer (v1.0, dtype '<f8', C order) for tensor inspection.
void write_npy(const std::filesystem::path& path, const Tensor& t);

}  // namespace multiref
