#pragma once

#include "dmpc/model.hpp"

namespace dmpc {

/// Instantiate a built-in agent model. Unset parameters take the model's
/// defaults; the resolved parameter set is stored on the returned model so it
/// can be rebuilt bit-identically from a wire summary.
AgentModel make_agent(const std::string& key, uint32_t id, const nlohmann::json& params);

/// Instantiate a built-in coupling term f_ij (owner <- neighbor).
CouplingModel make_coupling(const std::string& key, uint32_t owner, uint32_t neighbor,
                            const nlohmann::json& params);

std::vector<std::string> agent_model_keys();
std::vector<std::string> coupling_model_keys();

/// Ready-made multi-agent scenarios used by tests, benchmarks and examples.
namespace presets {

/// Single isolated double integrator, quadratic cost.
Problem double_integrator(double T, int N);

/// rows x cols masses in the plane, neighboring masses joined by nonlinear
/// springs; setpoints are deterministically perturbed grid positions.
Problem spring_mass_grid(int rows, int cols, double T, int N);

/// One controllable generator bus (id 1) and n_sinks uncontrolled load buses
/// in a chain: 1 - 2 - ... - (n_sinks+1).
Problem smart_grid_chain(int n_sinks, double T, int N);

/// Chain of water tanks connected by pipes; tank 1 has the pump, the last
/// tank has the outflow and the level setpoint, all tanks share a height cap.
Problem water_tank_chain(int n, double T, int N);

/// Chain of diffusively coupled Van der Pol oscillators.
Problem van_der_pol_chain(int n, double T, int N, bool classical = false);

}  // namespace presets

}  // namespace dmpc
