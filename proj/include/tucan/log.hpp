#pragma once

#include <functional>
#include <iostream>
#include <string>

namespace tucan {

enum class LogLevel { info, warning };

using LogSink = std::function<void(LogLevel, const std::string&)>;

inline LogSink& log_sink() {
  static LogSink sink = [](LogLevel level, const std::string& msg) {
    std::clog << (level == LogLevel::warning ? "warning: " : "") << msg << "\n";
  };
  return sink;
}

/// Replaces the process-wide sink, returning the previous one.
inline LogSink set_log_sink(LogSink sink) {
  auto old = std::move(log_sink());
  log_sink() = std::move(sink);
  return old;
}

inline void log_info(const std::string& msg) { log_sink()(LogLevel::info, msg); }
inline void log_warning(const std::string& msg) { log_sink()(LogLevel::warning, msg); }

}  // namespace tucan
