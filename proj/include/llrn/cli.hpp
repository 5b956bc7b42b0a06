#pragma once

// llrn train | gradcheck | eval
//
// Exit codes: 0 success, 1 failed checks or runtime error, 2 usage or
// configuration error, 3 data error.

#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>

namespace llrn::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitData = 3;

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

/// key=value lines; '#' starts a comment line.
std::map<std::string, std::string> read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path,
                    const std::map<std::string, std::string>& entries);

}  // namespace llrn::cli
