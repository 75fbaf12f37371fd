#pragma once

#include <filesystem>
#include <ostream>
#include <stdexcept>
#include <string>

namespace kbvqa {

class MissingArtifact : public std::runtime_error {
 public:
  explicit MissingArtifact(const std::filesystem::path& p)
      : std::runtime_error("missing artifact: " + p.string()), path_(p) {}
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum ExitCode { kExitOk = 0, kExitUsage = 2, kExitMissing = 3, kExitRuntime = 4 };

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace kbvqa
