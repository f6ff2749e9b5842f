#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <unistd.h>

namespace vfm::testing {

namespace fs = std::filesystem;

// Runs the CLI with `args` from inside `dir`; returns its exit code.
inline int run_cli(const fs::path& dir, const std::string& args) {
  fs::create_directories(dir);
  const std::string cmd = "cd '" + dir.string() + "' && '" VFM_CLI_PATH "' " + args + " >cli.log 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

inline std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Every regular file under `root`, keyed by its relative path.
inline std::map<std::string, std::string> tree_contents(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = read_file(e.path());
  }
  return out;
}

inline fs::path fresh_dir(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("vfm_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace vfm::testing
