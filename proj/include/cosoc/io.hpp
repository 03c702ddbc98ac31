#pragma once

#include <filesystem>
#include <string>

#include <json.hpp>

namespace cosoc {

// File helpers that report failures as Error{Io} / Error{SchemaError}.

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& contents);
nlohmann::json read_json_file(const std::filesystem::path& path);
/// Pretty-printed with a trailing newline; output is byte-stable.
void write_json_file(const std::filesystem::path& path, const nlohmann::json& value);

}  // namespace cosoc
