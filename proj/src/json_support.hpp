#pragma once

// JSON plumbing shared by the dataset, checkpoint and service readers.

#include "stableflow/error.hpp"
#include "stableflow/state.hpp"

#include <nlohmann/json.hpp>

#include <cstddef>
#include <filesystem>
#include <string>
#include <string_view>

namespace stableflow::detail {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

std::size_t line_of(std::string_view text, std::size_t byte);

/// json::parse with syntax errors turned into ParseError("line N") and
/// overflowing numbers into ValidationError.
json parse_json(std::string_view text);

const json& field(const json& obj, const char* key, const std::string& path);
std::string child(const std::string& path, const char* key);
std::string item(const std::string& path, std::size_t i);

double real(const json& v, const std::string& path);
std::size_t count(const json& v, const std::string& path);
bool boolean(const json& v, const std::string& path);
std::string text(const json& v, const std::string& path);
Vector real_vector(const json& v, const std::string& path);

/// Throws ValidationError when the file cannot be opened.
std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view contents);

}  // namespace stableflow::detail
