// cli.hpp - command-line front end (phantom, train, register, evaluate, ablate).
#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace tracer {

// args excludes the program name. Returns the process exit status; every
// failure prints one diagnostic line to `err` and returns nonzero.
int run_cli(const std::vector<std::string> &args, std::ostream &out, std::ostream &err);

} // namespace tracer
