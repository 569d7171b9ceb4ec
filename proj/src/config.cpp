#include "devmod/config.hpp"

namespace devmod {

StrictReader::StrictReader(const nlohmann::json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) {
        throw ConfigError((path_.empty() ? std::string("<root>") : path_) + ": expected object, got " +
                          obj_.type_name());
    }
}

const nlohmann::json* StrictReader::find(const std::string& key) {
    used_.insert(key);
    auto it = obj_.find(key);
    if (it == obj_.end() || it->is_null()) return nullptr;
    return &*it;
}

std::string StrictReader::path_of(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

void StrictReader::finish() const {
    for (auto it = obj_.begin(); it != obj_.end(); ++it) {
        if (!used_.count(it.key())) throw ConfigError(path_of(it.key()) + ": unknown key");
    }
}

void config_check(bool ok, const std::string& path, const std::string& what) {
    if (!ok) throw ConfigError(path + ": " + what);
}

}  // namespace devmod
