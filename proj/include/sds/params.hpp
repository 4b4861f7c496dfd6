#pragma once

#include <map>
#include <string>

#include "ndg/tape.hpp"

namespace sds {

using ndg::Array;
using ndg::real;

// Named parameter collection. std::map keeps iteration deterministic, which
// every reduction and optimizer sweep relies on.
using ParamMap = std::map<std::string, Array>;

std::size_t param_count(const ParamMap& p);
bool params_all_finite(const ParamMap& p);

// Registers every entry as a tape leaf and returns the handles by name.
std::map<std::string, ndg::Var> register_leaves(ndg::Tape& tape, const ParamMap& params);

}  // namespace sds
