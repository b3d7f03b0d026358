#include "cmc/config.hpp"

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <sstream>

#include "cmc/io.hpp"
#include "cmc/tensor.hpp"

namespace cmc::config {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

}  // namespace

std::string to_string(Source s) {
    switch (s) {
        case Source::defaults: return "default";
        case Source::file: return "file";
        case Source::env: return "env";
        case Source::flag: return "flag";
    }
    return "?";
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

Config::Config(std::vector<KeySpec> schema) : schema_(std::move(schema)) {
    for (const auto& k : schema_) {
        if (k.default_value) {
            values_[k.key] = *k.default_value;
            sources_[k.key] = Source::defaults;
        }
    }
}

bool Config::known(const std::string& key) const {
    return std::any_of(schema_.begin(), schema_.end(), [&](const KeySpec& k) { return k.key == key; });
}

const KeySpec& Config::spec(const std::string& key) const {
    for (const auto& k : schema_)
        if (k.key == key) return k;
    throw ValidationError("unknown config key '" + key + "'");
}

void Config::set(const std::string& key, const std::string& value, Source source) {
    spec(key);
    auto it = sources_.find(key);
    if (it != sources_.end() && it->second > source) return;
    values_[key] = value;
    sources_[key] = source;
}

void Config::merge_text(const std::string& text, const std::string& origin) {
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ValidationError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
        }
        const std::string key = trim(line.substr(0, eq));
        if (!known(key)) throw ValidationError(origin + ":" + std::to_string(lineno) + ": unknown config key '" + key + "'");
        set(key, trim(line.substr(eq + 1)), Source::file);
    }
}

void Config::merge_file(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw ValidationError("missing config file: " + path.string());
    merge_text(io::read_text(path), path.string());
}

void Config::merge_env(const std::string& prefix) {
    for (const auto& k : schema_) {
        std::string name = prefix + k.key;
        std::transform(name.begin(), name.end(), name.begin(), [](unsigned char c) { return std::toupper(c); });
        if (const char* v = std::getenv(name.c_str())) set(k.key, v, Source::env);
    }
}

bool Config::has(const std::string& key) const { return values_.count(key) > 0; }

Source Config::source(const std::string& key) const {
    auto it = sources_.find(key);
    if (it == sources_.end()) throw ValidationError("missing required config key '" + key + "'");
    return it->second;
}

void Config::require_complete() const {
    for (const auto& k : schema_)
        if (!has(k.key)) throw ValidationError("missing required config key '" + k.key + "'");
}

std::string Config::str(const std::string& key) const {
    spec(key);
    auto it = values_.find(key);
    if (it == values_.end()) throw ValidationError("missing required config key '" + key + "'");
    return it->second;
}

double Config::real(const std::string& key) const {
    const std::string v = str(key);
    try {
        std::size_t used = 0;
        const double d = std::stod(v, &used);
        if (used == v.size()) return d;
    } catch (const std::exception&) {
    }
    throw ValidationError("config key '" + key + "' expects a number, got '" + v + "'");
}

std::int64_t Config::integer(const std::string& key) const {
    const std::string v = str(key);
    try {
        std::size_t used = 0;
        const long long n = std::stoll(v, &used);
        if (used == v.size()) return n;
    } catch (const std::exception&) {
    }
    throw ValidationError("config key '" + key + "' expects an integer, got '" + v + "'");
}

bool Config::flag(const std::string& key) const {
    std::string v = str(key);
    std::transform(v.begin(), v.end(), v.begin(), [](unsigned char c) { return std::tolower(c); });
    if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
    if (v == "0" || v == "false" || v == "no" || v == "off") return false;
    throw ValidationError("config key '" + key + "' expects true/false, got '" + str(key) + "'");
}

std::vector<double> Config::reals(const std::string& key) const {
    std::vector<double> out;
    for (const auto& item : split_list(str(key))) {
        try {
            std::size_t used = 0;
            out.push_back(std::stod(item, &used));
            if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::exception&) {
            throw ValidationError("config key '" + key + "' expects a list of numbers, got '" + str(key) + "'");
        }
    }
    return out;
}

std::vector<std::int64_t> Config::integers(const std::string& key) const {
    std::vector<std::int64_t> out;
    for (const auto& item : split_list(str(key))) {
        try {
            std::size_t used = 0;
            out.push_back(std::stoll(item, &used));
            if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::exception&) {
            throw ValidationError("config key '" + key + "' expects a list of integers, got '" + str(key) + "'");
        }
    }
    return out;
}

nlohmann::json Config::to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [k, v] : values_) j[k] = v;
    return j;
}

}  // namespace cmc::config
