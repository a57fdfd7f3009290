#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace kda {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitRuntime = 2;

// Entry point of the `kda` tool; `args` excludes the program name.
// Usage errors and invalid inputs (config, parse, validation) return 1;
// I/O, numerical and failed gradient checks return 2.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace kda
