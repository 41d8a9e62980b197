#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace capsct::eval {

/// Subcommands: gen-data, train, infer, enhance, evaluate, report.
/// Returns 0 on success, 1 on a runtime failure (one-line diagnostic on
/// `err`), 2 on a usage error (usage text on `err`).
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run_cli(int argc, char** argv);

}  // namespace capsct::eval
