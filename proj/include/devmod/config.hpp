#pragma once

#include <set>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

namespace devmod {

/// Schema violation; the message starts with the offending key path.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Reads keys from one JSON object and rejects any key that was not read.
class StrictReader {
public:
    StrictReader(const nlohmann::json& obj, std::string path);

    template <class T>
    bool get(const std::string& key, T& out) {
        const nlohmann::json* v = find(key);
        if (!v) return false;
        try {
            out = v->get<T>();
        } catch (const nlohmann::json::exception&) {
            throw ConfigError(path_of(key) + ": expected " + type_name<T>() + ", got " + v->type_name());
        }
        return true;
    }

    template <class T>
    void require(const std::string& key, T& out) {
        if (!get(key, out)) throw ConfigError(path_of(key) + ": missing required key");
    }

    /// Marks `key` as read and returns it, or nullptr when absent.
    const nlohmann::json* find(const std::string& key);
    [[nodiscard]] std::string path_of(const std::string& key) const;
    [[nodiscard]] const std::string& path() const { return path_; }

    /// Throws ConfigError naming the first unknown key.
    void finish() const;

private:
    template <class T>
    static const char* type_name() {
        if constexpr (std::is_same_v<T, bool>) return "boolean";
        else if constexpr (std::is_integral_v<T>) return "integer";
        else if constexpr (std::is_floating_point_v<T>) return "number";
        else if constexpr (std::is_same_v<T, std::string>) return "string";
        else return "value";
    }

    const nlohmann::json& obj_;
    std::string path_;
    std::set<std::string> used_;
};

/// Throws ConfigError("<path>: <what>") unless `ok`.
void config_check(bool ok, const std::string& path, const std::string& what);

}  // namespace devmod
