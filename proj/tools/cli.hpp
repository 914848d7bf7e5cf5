#pragma once

// Command-line front end: generate, train, eval, export-plans.

#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace tsca::cli {

enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitUsage = 2,    // bad flags, config or input files
  kExitNumeric = 3,  // non-finite loss or similar
};

/// Resolved key=value settings. Layers are applied lowest precedence first:
/// built-in defaults, dataset preset, config file, command-line flags.
class Settings {
 public:
  Settings();

  /// Throws ConfigError naming `source` for keys outside the known set.
  void apply(const std::map<std::string, std::string>& layer, const std::string& source);
  void apply_preset(const std::string& name);

  const std::string& text(const std::string& key) const;
  double number(const std::string& key) const;
  std::size_t count(const std::string& key) const;
  bool flag(const std::string& key) const;
  bool has_value(const std::string& key) const { return !text(key).empty(); }

  /// key=value lines in key order; parseable by read_config_file.
  std::string dump() const;

  static const std::vector<std::string>& preset_names();

 private:
  std::map<std::string, std::string> values_;
};

/// Parses "key = value" lines; '#' starts a comment. Dashes in keys are read
/// as underscores.
std::map<std::string, std::string> read_config_file(const std::filesystem::path& path);

/// Entry point shared by the executable and the tests.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace tsca::cli
