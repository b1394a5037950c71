#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "fgn/data.hpp"

namespace fgn {

enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitConfigError = 2,
  kExitNumericFailure = 3,
  kExitToleranceFailure = 4,
};

/// Bad config text or value. `line()` is 1-based, 0 when no line applies.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& what, std::size_t line);
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

/// Flat key=value settings. '#' starts a comment; blank lines are ignored;
/// keys outside the allowed set and repeated keys are errors.
class Config {
 public:
  static Config parse(std::istream& in, const std::set<std::string>& allowed);
  static Config load(const std::filesystem::path& path, const std::set<std::string>& allowed);

  bool has(const std::string& key) const { return entries_.count(key) != 0; }
  /// Sets or replaces a value (line 0), e.g. from a command-line override.
  void set(const std::string& key, const std::string& value);

  std::string text(const std::string& key) const;
  std::string text(const std::string& key, const std::string& fallback) const;
  double real(const std::string& key, double fallback) const;
  std::size_t count(const std::string& key, std::size_t fallback) const;
  std::uint64_t u64(const std::string& key, std::uint64_t fallback) const;
  bool flag(const std::string& key, bool fallback) const;
  /// Comma-separated lists; an empty value is an empty list.
  std::vector<double> reals(const std::string& key, const std::vector<double>& fallback) const;
  std::vector<std::size_t> counts(const std::string& key, const std::vector<std::size_t>& fallback) const;
  std::vector<std::string> texts(const std::string& key) const;

  /// Line of `key`, 0 if absent or set programmatically.
  std::size_t line(const std::string& key) const;

 private:
  struct Entry {
    std::string value;
    std::size_t line = 0;
  };
  [[noreturn]] void bad_value(const std::string& key, const std::string& expected) const;
  std::map<std::string, Entry> entries_;
};

/// Keys shared by every command that reads a dataset:
///   data = mnist-train | mnist-test | random | shuffled | toy-linear |
///          toy-rings | white-noise | tones
///   data_dir, count, offset, dim, classes, lo, hi, scale, normalize,
///   augment (none | shifts), data_seed
const std::set<std::string>& dataset_keys();
Dataset load_dataset(const Config& cfg, std::uint64_t seed);

/// Allowed keys per subcommand ("train", "convert", "attack", "eval").
std::set<std::string> command_keys(const std::string& command);

/// Entry point of the fgn tool. Writes results to `out` and diagnostics to
/// `err`; returns an ExitCode.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace fgn
