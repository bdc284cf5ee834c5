#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace roomroam::cli {

// Exit codes: 0 success, 1 runtime error, 2 usage error.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, const char* const* argv);

}  // namespace roomroam::cli
