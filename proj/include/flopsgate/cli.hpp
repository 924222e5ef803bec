#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace flopsgate {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitConfig = 2;

/// Entry point behind the `flopsgate` binary; `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace flopsgate
