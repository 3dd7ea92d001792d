// tracer - command-line entry point.

#include <iostream>
#include <string>
#include <vector>

#include "tracer/cli.hpp"

int main(int argc, char **argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return tracer::run_cli(args, std::cout, std::cerr);
}
