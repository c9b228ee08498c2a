#pragma once

#include <spdlog/spdlog.h>

namespace fedtab {

// Configures the default spdlog logger (stderr) from the FEDTAB_LOG environment
// variable: trace, debug, info, warn, error, critical, off. Defaults to info.
void init_logging(const char* name);

}  // namespace fedtab
