// record.hpp — one row of experiment output, shared by the models and the harness
#pragma once

#include <string>
#include <vector>

namespace closedsys {

struct ExperimentRecord {
  std::string experiment;
  std::string sweep_param;
  double sweep_value = 0.0;
  double time = 0.0;
  std::string metric;
  double value = 0.0;
  double diag_norm_drift = 0.0;  // | |psi(t)| - |psi(0)| |
  double diag_residual = 0.0;    // method-specific residual (boundary amplitude, solver residual, ...)
};

using RecordList = std::vector<ExperimentRecord>;

}  // namespace closedsys
