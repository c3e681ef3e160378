#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace mapedit::app {

/// The `mapedit` command line. args[0] is the program name. Returns the process exit code.
///
/// Every subcommand takes `--config file.json`; each key of that object is the name of
/// a flag without its leading dashes, and explicit flags win over the file. JSON-valued
/// flags (nested configs, arrays) take their value as JSON text.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

} // namespace mapedit::app
