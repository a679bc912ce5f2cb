#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "cli/config.hpp"

namespace specdraft::cli {

/// Subcommand names in display order.
const std::vector<std::string>& subcommands();

/// Runs one subcommand. Returns 0 on success and 1 when the command ran but
/// its check failed (a gradient check or a losslessness comparison).
/// Configuration and I/O problems are thrown.
int run(const std::string& subcommand, const RunConfig& cfg, std::ostream& out);

}  // namespace specdraft::cli
