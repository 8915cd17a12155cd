#include "bufprop/trace.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace bufprop {

using nlohmann::json;

std::string op_to_jsonl(const Op& op) {
  json j;
  switch (op.kind) {
    case OpKind::Query: j["op"] = "q"; break;
    case OpKind::Insert: j["op"] = "i"; break;
    case OpKind::Update: j["op"] = "u"; break;
  }
  j["key"] = op.key;
  if (op.kind != OpKind::Query) j["val"] = op.val;
  return j.dump();
}

Op op_from_jsonl(const std::string& line) {
  json j = json::parse(line);
  Op op;
  std::string k = j.at("op").get<std::string>();
  if (k == "q") {
    op.kind = OpKind::Query;
  } else if (k == "i") {
    op.kind = OpKind::Insert;
  } else if (k == "u") {
    op.kind = OpKind::Update;
  } else {
    throw std::runtime_error("bad op kind in trace: " + k);
  }
  op.key = j.at("key").get<Key>();
  if (op.kind != OpKind::Query) op.val = j.value("val", Word{0});
  return op;
}

void write_trace(std::ostream& out, const Trace& trace) {
  for (const Op& op : trace) out << op_to_jsonl(op) << '\n';
}

Trace read_trace(std::istream& in) {
  Trace t;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    t.push_back(op_from_jsonl(line));
  }
  return t;
}

void write_trace_file(const std::string& path, const Trace& trace) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open trace file for writing: " + path);
  write_trace(out, trace);
}

Trace read_trace_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open trace file: " + path);
  return read_trace(in);
}

}  // namespace bufprop
