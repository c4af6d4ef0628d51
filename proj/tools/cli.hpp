#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace neuronscope::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitRuntime = 3;

// args[0] is the program name. Diagnostics go to err, reports to out.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Lowercase hex SHA-256 of a file's bytes.
std::string file_sha256(const std::string& path);

}  // namespace neuronscope::cli
