#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace tbloc::cli {

// Runs one command line. Returns 0 on success, 2 on usage errors and 1 on
// runtime errors. Diagnostics go to `err`; machine output (predict without
// --out, help text) goes to `out`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, char** argv);

}  // namespace tbloc::cli
