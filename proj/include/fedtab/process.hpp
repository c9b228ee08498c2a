#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <sys/types.h>

namespace fedtab {

// A spawned child process, killed on destruction if still running.
class ChildProcess {
 public:
  ChildProcess() = default;
  // stdout and stderr are appended to `log_path` when given.
  ChildProcess(const std::vector<std::string>& argv, const std::filesystem::path& log_path = {});
  ~ChildProcess();

  ChildProcess(ChildProcess&& other) noexcept;
  ChildProcess& operator=(ChildProcess&& other) noexcept;
  ChildProcess(const ChildProcess&) = delete;
  ChildProcess& operator=(const ChildProcess&) = delete;

  pid_t pid() const { return pid_; }
  bool running();
  // Exit status once the process ends; -signal if it was killed.
  std::optional<int> poll();
  int wait();
  // Waits up to `timeout_ms`; returns nullopt on timeout.
  std::optional<int> wait_for(int timeout_ms);
  void kill(int signal = 9);

 private:
  pid_t pid_ = -1;
  std::optional<int> status_;
};

// Directory holding this executable (resolved through /proc/self/exe).
std::filesystem::path executable_dir();

}  // namespace fedtab
