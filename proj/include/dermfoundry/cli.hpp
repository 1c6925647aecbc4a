#pragma once

#include <string>
#include <vector>

namespace dermfoundry::cli {

// Exit codes: 0 success, 2 validation/config error, 3 runtime failure,
// 64 usage error (unknown subcommand / bad flags).
constexpr int kExitOk = 0;
constexpr int kExitValidation = 2;
constexpr int kExitRuntime = 3;
constexpr int kExitUsage = 64;

int run(int argc, char** argv);
// Same entry without argv[0]; used by in-process tests.
int run(const std::vector<std::string>& args);

}  // namespace dermfoundry::cli
