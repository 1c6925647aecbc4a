#include "dermfoundry/cli.hpp"

namespace dermfoundry::cli {
int run(int, char**) { return kExitUsage; }
int run(const std::vector<std::string>&) { return kExitUsage; }
}  // namespace dermfoundry::cli
