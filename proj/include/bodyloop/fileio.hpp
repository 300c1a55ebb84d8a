#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace bodyloop {

// Whole-file read; Error{not_found} or Error{io} with the path on failure.
std::string read_text(const std::filesystem::path& path);

// Writes to a sibling temporary and renames it over the target.
void write_text_atomic(const std::filesystem::path& path, std::string_view text);

}  // namespace bodyloop
