#include "container.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "partal/data.hpp"

namespace partal::container {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

namespace {

void to_little_endian(double value, unsigned char* out) {
  std::uint64_t bits;
  std::memcpy(&bits, &value, sizeof bits);
  for (int i = 0; i < 8; ++i) out[i] = static_cast<unsigned char>(bits >> (8 * i));
}

double from_little_endian(const unsigned char* in) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(in[i]) << (8 * i);
  double value;
  std::memcpy(&value, &bits, sizeof value);
  return value;
}

}  // namespace

void write(const std::filesystem::path& manifest, const std::filesystem::path& blob,
           const nlohmann::json& header, std::span<const double> values) {
  if (manifest.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(manifest.parent_path(), ec);
  }
  {
    std::ofstream out(manifest, std::ios::binary | std::ios::trunc);
    if (!out) throw DatasetError(DatasetErrorKind::Io, "cannot write " + manifest.string());
    out << header.dump(2) << '\n';
    if (!out) throw DatasetError(DatasetErrorKind::Io, "write failed: " + manifest.string());
  }
  std::ofstream out(blob, std::ios::binary | std::ios::trunc);
  if (!out) throw DatasetError(DatasetErrorKind::Io, "cannot write " + blob.string());
  std::vector<unsigned char> bytes(values.size() * 8);
  for (std::size_t i = 0; i < values.size(); ++i) to_little_endian(values[i], &bytes[i * 8]);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DatasetError(DatasetErrorKind::Io, "write failed: " + blob.string());
}

nlohmann::json read_manifest(const std::filesystem::path& manifest) {
  std::ifstream in(manifest, std::ios::binary);
  if (!in) throw DatasetError(DatasetErrorKind::Io, "cannot open " + manifest.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  try {
    return nlohmann::json::parse(buffer.str());
  } catch (const nlohmann::json::exception& e) {
    throw DatasetError(DatasetErrorKind::Format,
                       "malformed manifest " + manifest.string() + ": " + e.what());
  }
}

std::vector<double> read_blob(const std::filesystem::path& blob, std::size_t expected_count) {
  std::ifstream in(blob, std::ios::binary);
  if (!in) throw DatasetError(DatasetErrorKind::Io, "cannot open " + blob.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (bytes.size() % 8 != 0 || bytes.size() / 8 != expected_count) {
    throw DatasetError(DatasetErrorKind::Truncated,
                       blob.string() + ": expected " + std::to_string(expected_count * 8) +
                           " bytes, found " + std::to_string(bytes.size()));
  }
  std::vector<double> values(expected_count);
  for (std::size_t i = 0; i < expected_count; ++i) values[i] = from_little_endian(&bytes[i * 8]);
  return values;
}

}  // namespace partal::container
