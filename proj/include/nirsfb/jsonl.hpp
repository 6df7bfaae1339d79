#pragma once

#include <fstream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "nirsfb/error.hpp"

namespace nirsfb {

/// Append-only JSON Lines log. Records are kept in memory and, when a path
/// is given, also appended to that file as they arrive.
class JsonlLog {
 public:
  JsonlLog() = default;
  explicit JsonlLog(const std::string& path, bool keep_in_memory = true) : keep_(keep_in_memory) {
    file_.emplace(path, std::ios::out | std::ios::app);
    if (!*file_) throw Error(ErrorCode::Io, "cannot open " + path + " for appending");
  }

  void append(const nlohmann::json& record) {
    std::lock_guard lock(mutex_);
    if (file_) *file_ << record.dump() << '\n';
    if (keep_) records_.push_back(record);
  }

  void flush() {
    std::lock_guard lock(mutex_);
    if (file_) file_->flush();
  }

  [[nodiscard]] const std::vector<nlohmann::json>& records() const noexcept { return records_; }

 private:
  std::mutex mutex_;
  bool keep_ = true;
  std::optional<std::ofstream> file_;
  std::vector<nlohmann::json> records_;
};

inline std::vector<nlohmann::json> read_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path);
  std::vector<nlohmann::json> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::InvalidField, path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace nirsfb
