#pragma once

// Manifest (JSON text) + flat little-endian float64 blob, shared by datasets
// and model checkpoints.

#include <filesystem>
#include <span>
#include <utility>
#include <vector>

#include <json.hpp>

namespace partal::container {

void write(const std::filesystem::path& manifest, const std::filesystem::path& blob,
           const nlohmann::json& header, std::span<const double> values);

nlohmann::json read_manifest(const std::filesystem::path& manifest);

/// Throws DatasetError(Truncated) when the byte count is not a whole number
/// of doubles or differs from `expected_count`.
std::vector<double> read_blob(const std::filesystem::path& blob, std::size_t expected_count);

}  // namespace partal::container
