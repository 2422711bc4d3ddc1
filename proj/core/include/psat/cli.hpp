#pragma once

#include <string>
#include <vector>

namespace psat {

// Entry point behind the psat binary; args exclude the program name.
// Subcommands: train | attack | eval | params | report.
// Returns 0 on success, 2 for configuration/usage errors, 3 for runtime
// failures. Honors PSAT_LOG (debug | info | quiet) for stderr verbosity;
// timestamps only ever go to the run directory's sidecar log.
int run_cli(const std::vector<std::string>& args);

}  // namespace psat
