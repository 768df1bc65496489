#pragma once

#include <stdexcept>
#include <string>

namespace frametrace {

// Stable category names; the CLI prints them as "ERROR:<category>: ..."
// and maps them onto exit codes.
enum class ErrorCategory {
  shape,
  range,
  config,
  format,
  parse,
  validation,
  io,
  transport,
  protocol,
  request,
  alignment,
  capacity,
  not_found,
  ambiguous,
  insufficient_data,
  degenerate,
  tokenizer,
  completeness,
  unsupported,
};

inline const char* category_name(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::shape: return "shape";
    case ErrorCategory::range: return "range";
    case ErrorCategory::config: return "config";
    case ErrorCategory::format: return "format";
    case ErrorCategory::parse: return "parse";
    case ErrorCategory::validation: return "validation";
    case ErrorCategory::io: return "io";
    case ErrorCategory::transport: return "transport";
    case ErrorCategory::protocol: return "protocol";
    case ErrorCategory::request: return "request";
    case ErrorCategory::alignment: return "alignment";
    case ErrorCategory::capacity: return "capacity";
    case ErrorCategory::not_found: return "not_found";
    case ErrorCategory::ambiguous: return "ambiguous";
    case ErrorCategory::insufficient_data: return "insufficient_data";
    case ErrorCategory::degenerate: return "degenerate";
    case ErrorCategory::tokenizer: return "tokenizer";
    case ErrorCategory::completeness: return "completeness";
    case ErrorCategory::unsupported: return "unsupported";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory cat, const std::string& msg)
      : std::runtime_error(msg), cat_(cat) {}

  ErrorCategory category() const { return cat_; }
  const char* category_str() const { return category_name(cat_); }

 private:
  ErrorCategory cat_;
};

}  // namespace frametrace
