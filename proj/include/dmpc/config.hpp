#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "dmpc/cluster.hpp"
#include "dmpc/coordinator.hpp"
#include "dmpc/simulator.hpp"

namespace dmpc {

/// Everything one run needs, parsed from a single JSON document. The same
/// file drives the centralized solve, the in-process distributed solve and
/// the standalone agent/coordinator processes.
struct RunConfig {
  Problem problem;

  std::string controller = "distributed";  // "central" or "distributed"
  SolverConfig solver;                      // local minimizations (and the central solve)
  AdmmOptions admm;                         // admm.solver mirrors `solver`
  uint32_t q_max = 20;
  bool multi_threading = false;
  std::vector<uint32_t> active;  // initially attached agents; empty means all

  SimOptions sim;  // csv_dir is left empty here, the caller decides where to write

  // process mode
  std::string coordinator_address;              // host:port the coordinator binds
  std::map<uint32_t, std::string> agent_addresses;
  int step_timeout_ms = 10000;
  bool plug_and_play = false;

  uint64_t seed = 0;  // echoed into the summary; every run mode is deterministic
};

/// Builds a RunConfig from a parsed document. Unknown keys, wrong types,
/// missing required fields and inconsistent cross references all throw
/// std::runtime_error with the offending path in the message.
RunConfig parse_config(const nlohmann::json& doc);

/// Reads and parses a config file. File and syntax errors mention the path.
RunConfig load_config(const std::string& path);

/// Serializes a config back into a document that parses to an equivalent run:
/// the problem comes out in explicit agent/coupling form with every model
/// parameter resolved, so presets round-trip to their expanded description.
nlohmann::json to_json(const RunConfig& c);

}  // namespace dmpc
