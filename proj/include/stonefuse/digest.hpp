#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace stonefuse {

std::string sha256_hex(const void* data, std::size_t len);
std::string sha256_hex(const std::vector<std::uint8_t>& bytes);
std::string sha256_hex(const std::string& s);
std::string sha256_file_hex(const std::filesystem::path& p);

}  // namespace stonefuse
