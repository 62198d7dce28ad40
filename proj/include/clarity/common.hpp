#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace clarity {

enum class Stance : std::uint8_t { support, oppose };

std::string_view to_string(Stance stance) noexcept;
std::optional<Stance> parse_stance(std::string_view text) noexcept;
constexpr Stance opposite(Stance s) noexcept {
    return s == Stance::support ? Stance::oppose : Stance::support;
}

// Error taxonomy. The CLI maps these onto exit codes.
struct ContractError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ModelError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Lowercase hex SHA-256 of `data`.
std::string sha256_hex(std::string_view data);

// Text helpers.
std::string trim(std::string_view s);
/// Collapses runs of ASCII whitespace into one space and trims both ends.
std::string normalize_whitespace(std::string_view s);
std::string to_lower_ascii(std::string_view s);
bool istarts_with(std::string_view s, std::string_view prefix) noexcept;
std::vector<std::string> split_lines(std::string_view text);
/// Replaces every ill-formed UTF-8 sequence with U+FFFD.
std::string sanitize_utf8(std::string_view s);

std::string read_file(const std::string& path);
/// Writes via a temporary sibling and renames it into place.
void write_file_atomic(const std::string& path, std::string_view content);

}  // namespace clarity
