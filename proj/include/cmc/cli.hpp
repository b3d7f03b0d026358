#ifndef CMC_CLI_HPP
#define CMC_CLI_HPP

#include <iosfwd>
#include <string>
#include <vector>

#include "json.hpp"

// Subcommands: synth | train-seg | train-clf | infer-masks | eval | cam | model-manifest.
// Exit codes: 0 ok, 1 validation error, 2 runtime error.

namespace cmc::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitRuntime = 2;

/// args excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Fields of run_manifest.json.
nlohmann::json run_manifest(const std::string& subcommand, const nlohmann::json& config, std::uint64_t seed,
                            const std::string& output);

std::string build_id();

}  // namespace cmc::cli

#endif
