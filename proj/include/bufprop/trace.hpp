// JSON Lines trace format, one operation per line:
//   {"op":"q"|"i"|"u","key":<int>,"val":<int>?}
#pragma once

#include <iosfwd>
#include <string>

#include "bufprop/types.hpp"

namespace bufprop {

std::string op_to_jsonl(const Op& op);
Op op_from_jsonl(const std::string& line);

void write_trace(std::ostream& out, const Trace& trace);
Trace read_trace(std::istream& in);

void write_trace_file(const std::string& path, const Trace& trace);
Trace read_trace_file(const std::string& path);

}  // namespace bufprop
