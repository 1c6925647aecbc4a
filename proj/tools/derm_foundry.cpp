#include "dermfoundry/cli.hpp"

int main(int argc, char** argv) {
  return dermfoundry::cli::run(argc, argv);
}
