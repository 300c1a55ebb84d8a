#include "bodyloop/error.hpp"

#include <json.hpp>

namespace bodyloop {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::invalid_argument: return "invalid_argument";
    case ErrorCode::io: return "io";
    case ErrorCode::format: return "format";
    case ErrorCode::calibration: return "calibration";
    case ErrorCode::degenerate: return "degenerate";
    case ErrorCode::conflict: return "conflict";
    case ErrorCode::not_found: return "not_found";
    case ErrorCode::protocol: return "protocol";
  }
  return "unknown";
}

Error::Error(ErrorCode code, const std::string& message, std::filesystem::path path)
    : std::runtime_error(message), code_(code), path_(std::move(path)) {}

std::string Error::to_json_line() const {
  nlohmann::json j;
  j["error"] = std::string(to_string(code_));
  j["message"] = what();
  if (!path_.empty()) j["path"] = path_.string();
  return j.dump();
}

void fail(ErrorCode code, const std::string& message, const std::filesystem::path& path) {
  throw Error(code, message, path);
}

}  // namespace bodyloop
