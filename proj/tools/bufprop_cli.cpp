// bufprop command line: generate traces, run trees with oracle-checked
// answers, compare configurations, and compute offline oracles.
//
//   bufprop generate --kind pivot_split --n 65536 --ops 100000 --out t.jsonl
//   bufprop run --tree jello --B 4096 --delta 0.5 --n 65536 --trace t.jsonl \
//               --report out.json --assert rebuild_fraction=0.01
//   bufprop compare --tree jello --tree beps:64 --tree beps:2 --trace t.jsonl
//   bufprop oracle --trace t.jsonl --B 256 --n 4096
//
// Exit codes: 0 ok, 1 semantic divergence from the flat-map oracle,
// 2 violated --assert threshold, 3 usage/config errors.
// BUFPROP_REPORT_DIR overrides the directory reports are written into.
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "bufprop/harness.hpp"
#include "bufprop/trace.hpp"
#include "bufprop/workloads.hpp"

using namespace bufprop;

namespace {

std::string report_path(const std::string& path) {
  const char* dir = std::getenv("BUFPROP_REPORT_DIR");
  if (!dir || !*dir || path.empty()) return path;
  return (std::filesystem::path(dir) / std::filesystem::path(path).filename()).string();
}

void write_text(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << text;
}

harness::RunConfig parse_tree_spec(const std::string& spec) {
  harness::RunConfig cfg;
  auto colon = spec.find(':');
  std::string kind = spec.substr(0, colon);
  cfg.tree = harness::tree_kind_from_string(kind);
  if (colon != std::string::npos) cfg.fanout = std::stoull(spec.substr(colon + 1));
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"buffered-propagation tree simulator and benchmark harness"};
  app.require_subcommand(1);

  // ---- generate
  auto* gen = app.add_subcommand("generate", "emit a JSONL operation trace");
  std::string g_kind = "uniform_random", g_out = "-";
  std::uint64_t g_n = 1 << 16, g_ops = 1 << 14, g_seed = 1;
  double g_mix = 0.5, g_drift = 0.0;
  gen->add_option("--kind", g_kind,
                  "uniform_random|sequential|pivot_split|drifting_hotspot|insert_storm|"
                  "query_storm|phase_shift");
  gen->add_option("--n", g_n, "key universe size");
  gen->add_option("--ops", g_ops, "operation count");
  gen->add_option("--seed", g_seed, "generator seed");
  gen->add_option("--mix", g_mix, "query fraction");
  gen->add_option("--drift-rate", g_drift, "keys per op (hotspot kinds)");
  gen->add_option("--out", g_out, "output path, - for stdout");

  // ---- shared run/compare/oracle machine flags
  auto add_machine_flags = [](CLI::App* cmd, harness::RunConfig& cfg) {
    cmd->add_option("--B", cfg.b, "block size in words (power of two)");
    cmd->add_option("--delta", cfg.delta, "supernode exponent");
    cmd->add_option("--n", cfg.n, "preloaded key universe 1..n");
    cmd->add_option("--C", cfg.cache_c, "cache parameter (0 disables)");
    cmd->add_option("--K", cfg.speed_limit_k, "speed-limit charging factor");
    cmd->add_option("--seed", cfg.seed, "echoed into the report");
    cmd->add_option("--c-phase", cfg.c_phase, "phase length constant c");
    cmd->add_option("--rho", cfg.rho, "phase growth fraction (upper layers)");
    cmd->add_flag("!--no-preload", cfg.preload, "start from an empty tree");
    std::map<std::string, bool> presets{{"augmented", true}, {"equal", false}};
    cmd->add_option("--cache-preset", cfg.cache_augmented, "augmented|equal")
        ->transform(CLI::CheckedTransformer(presets, CLI::ignore_case));
  };

  // ---- run
  auto* runc = app.add_subcommand("run", "run one tree over a trace");
  harness::RunConfig r_cfg;
  std::string r_tree = "beps", r_trace, r_report;
  std::vector<std::string> r_asserts;
  bool r_reshortcut = false;
  runc->add_option("--tree", r_tree, "beps[:fanout]|fct|fixed_pivot|jello")->required();
  runc->add_option("--trace", r_trace, "JSONL trace file")->required();
  runc->add_option("--report", r_report, "JSON report path (- for stdout)");
  runc->add_option("--assert", r_asserts, "metric=bound, exit 2 when exceeded");
  runc->add_flag("--reshortcut-audit", r_reshortcut, "include the re-shortcutted cost audit");
  add_machine_flags(runc, r_cfg);

  // ---- compare
  auto* cmp = app.add_subcommand("compare", "run several trees on one trace");
  harness::RunConfig c_base;
  std::vector<std::string> c_trees;
  std::string c_trace, c_out = "-";
  bool c_oracles = false;
  cmp->add_option("--tree", c_trees, "tree spec, repeatable (e.g. beps:64, jello)")
      ->required()
      ->expected(-2);
  cmp->add_option("--trace", c_trace, "JSONL trace file")->required();
  cmp->add_option("--out", c_out, "CSV output path, - for stdout");
  cmp->add_flag("--with-oracles", c_oracles, "add best-fixed and static-oracle ratio columns");
  add_machine_flags(cmp, c_base);

  // ---- oracle
  auto* orc = app.add_subcommand("oracle", "offline oracles for a trace");
  harness::RunConfig o_cfg;
  std::string o_trace, o_out = "-";
  std::size_t o_max_keys = 4096;
  orc->add_option("--trace", o_trace, "JSONL trace file")->required();
  orc->add_option("--out", o_out, "JSON output path, - for stdout");
  orc->add_option("--max-keys", o_max_keys, "static-tree DP universe cap");
  add_machine_flags(orc, o_cfg);

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      workloads::WorkloadSpec spec;
      spec.kind = workloads::kind_from_string(g_kind);
      spec.n = g_n;
      spec.op_count = g_ops;
      spec.seed = g_seed;
      spec.mix = g_mix;
      spec.drift_rate = g_drift;
      std::ostringstream buf;
      write_trace(buf, workloads::generate(spec));
      write_text(g_out, buf.str());
      return 0;
    }
    if (runc->parsed()) {
      harness::RunConfig cfg = r_cfg;
      harness::RunConfig spec = parse_tree_spec(r_tree);
      cfg.tree = spec.tree;
      cfg.fanout = spec.fanout;
      cfg.reshortcut_audit = r_reshortcut;
      for (const std::string& a : r_asserts) {
        auto eq = a.find('=');
        if (eq == std::string::npos) throw std::runtime_error("--assert wants metric=bound");
        cfg.assert_max[a.substr(0, eq)] = std::stod(a.substr(eq + 1));
      }
      Trace trace = read_trace_file(r_trace);
      harness::RunResult res = harness::run(cfg, trace);
      if (!r_report.empty()) write_text(report_path(r_report), res.report.dump(2) + "\n");
      if (!res.semantic_ok) {
        std::cerr << "semantic divergence from the flat-map oracle at op "
                  << res.first_divergence << "\n";
        return 1;
      }
      if (!res.violated_metrics.empty()) {
        for (const std::string& mv : res.violated_metrics)
          std::cerr << "assert violated: " << mv << "\n";
        return 2;
      }
      if (r_report.empty()) std::cout << res.report.dump(2) << "\n";
      return 0;
    }
    if (cmp->parsed()) {
      std::vector<harness::RunConfig> cfgs;
      for (const std::string& spec : c_trees) {
        harness::RunConfig cfg = c_base;
        harness::RunConfig t = parse_tree_spec(spec);
        cfg.tree = t.tree;
        cfg.fanout = t.fanout;
        cfgs.push_back(cfg);
      }
      Trace trace = read_trace_file(c_trace);
      harness::CompareResult res = harness::compare(cfgs, trace, c_oracles);
      write_text(report_path(c_out), res.csv);
      return 0;
    }
    if (orc->parsed()) {
      Trace trace = read_trace_file(o_trace);
      nlohmann::json j = harness::oracle_report(trace, o_cfg, o_max_keys);
      write_text(report_path(o_out), j.dump(2) + "\n");
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
