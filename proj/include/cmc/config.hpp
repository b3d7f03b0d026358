#ifndef CMC_CONFIG_HPP
#define CMC_CONFIG_HPP

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

// Flat key = value configuration. Values are resolved with the precedence
// flags > environment (CMC_<KEY>) > config file > built-in defaults.

namespace cmc::config {

struct KeySpec {
    std::string key;
    std::optional<std::string> default_value;  // absent = required
    std::string help;
    std::string reference;  // recipe value the default mirrors, if any
};

enum class Source { defaults, file, env, flag };
std::string to_string(Source s);

class Config {
public:
    explicit Config(std::vector<KeySpec> schema);

    const std::vector<KeySpec>& schema() const { return schema_; }
    bool known(const std::string& key) const;

    /// Parses `key = value` lines; '#' starts a comment. Unknown keys are errors.
    void merge_file(const std::filesystem::path& path);
    void merge_text(const std::string& text, const std::string& origin);
    /// Reads CMC_<KEY> (upper-cased) for every schema key.
    void merge_env(const std::string& prefix = "CMC_");
    void set(const std::string& key, const std::string& value, Source source = Source::flag);

    bool has(const std::string& key) const;
    Source source(const std::string& key) const;
    /// Throws naming the first required key without a value.
    void require_complete() const;

    std::string str(const std::string& key) const;
    double real(const std::string& key) const;
    std::int64_t integer(const std::string& key) const;
    bool flag(const std::string& key) const;
    std::vector<double> reals(const std::string& key) const;
    std::vector<std::int64_t> integers(const std::string& key) const;

    /// Resolved values, sorted by key.
    nlohmann::json to_json() const;

private:
    const KeySpec& spec(const std::string& key) const;
    std::vector<KeySpec> schema_;
    std::map<std::string, std::string> values_;
    // Lower-precedence merges never overwrite higher ones, whatever the call order.
    std::map<std::string, Source> sources_;
};

/// "a,b,c" -> {"a","b","c"} with surrounding blanks removed.
std::vector<std::string> split_list(const std::string& s);

}  // namespace cmc::config

#endif
