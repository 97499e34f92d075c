#pragma once

#include <filesystem>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "permanence/error.hpp"

namespace permanence::cli {

inline constexpr std::string_view kToolName = "permanence";
inline constexpr std::string_view kVersion = "1.0.0";

/// Process exit status for each error code; 0 is success, 1 an unexpected
/// internal failure.
int exit_code(ErrorCode code);

/// Runs one invocation; args[0] is the program name. Diagnostics go to err as
/// a single line "error: <code>: <message>".
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

std::string sha256_hex(const std::filesystem::path& file);

}  // namespace permanence::cli
