#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>

namespace bodyloop {

enum class ErrorCode {
  invalid_argument,
  io,
  format,
  calibration,
  degenerate,
  conflict,
  not_found,
  protocol,
};

std::string_view to_string(ErrorCode code);

// Every library failure surfaces as this exception. The code is stable and
// machine-readable; the path is filled in when a file was involved.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message, std::filesystem::path path = {});

  ErrorCode code() const noexcept { return code_; }
  const std::filesystem::path& path() const noexcept { return path_; }

  // Single-line JSON object: {"error":"<code>","message":"...","path":"..."}.
  std::string to_json_line() const;

 private:
  ErrorCode code_;
  std::filesystem::path path_;
};

[[noreturn]] void fail(ErrorCode code, const std::string& message, const std::filesystem::path& path = {});

inline void require(bool condition, const std::string& message) {
  if (!condition) fail(ErrorCode::invalid_argument, message);
}

}  // namespace bodyloop
