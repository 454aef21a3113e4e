#pragma once

// Strict JSON reading: every key must be consumed, otherwise ConfigError
// names the first unknown one.

#include <set>
#include <string>

#include <nlohmann/json.hpp>

#include "crackseg/error.hpp"
#include "crackseg/unet.hpp"

namespace crackseg {

using json = nlohmann::json;

template <typename E = ConfigError>
class StrictObject {
public:
    StrictObject(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw E(where() + "expected a JSON object");
    }

    bool has(const std::string& key) const { return j_.contains(key); }

    template <typename V>
    void read(const std::string& key, V& out) {
        seen_.insert(key);
        if (!j_.contains(key)) return;
        try {
            out = j_.at(key).template get<V>();
        } catch (const json::exception&) {
            throw E("invalid value for '" + field(key) + "'");
        }
    }

    template <typename V>
    V require(const std::string& key) {
        seen_.insert(key);
        if (!j_.contains(key)) throw E("missing required field '" + field(key) + "'");
        try {
            return j_.at(key).template get<V>();
        } catch (const json::exception&) {
            throw E("invalid value for '" + field(key) + "'");
        }
    }

    const json& child(const std::string& key) {
        seen_.insert(key);
        return j_.at(key);
    }

    std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

    void finish() const {
        for (const auto& [k, v] : j_.items())
            if (!seen_.count(k)) throw E("unknown key '" + field(k) + "'");
    }

private:
    std::string where() const { return path_.empty() ? "" : path_ + ": "; }

    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

inline json to_json(const UNetConfig& c) {
    json j{{"input_size", c.input_size},         {"input_channels", c.input_channels},
           {"num_classes", c.num_classes},       {"base_filters", c.base_filters},
           {"depth", c.depth},                   {"dropout_rate", c.dropout_rate}};
    if (c.dropout_stages) j["dropout_stages"] = *c.dropout_stages;
    return j;
}

template <typename E = ConfigError>
UNetConfig unet_config_from_json(const json& j, const std::string& path = "model") {
    UNetConfig c;
    StrictObject<E> o(j, path);
    o.read("input_size", c.input_size);
    o.read("input_channels", c.input_channels);
    o.read("num_classes", c.num_classes);
    o.read("base_filters", c.base_filters);
    o.read("depth", c.depth);
    o.read("dropout_rate", c.dropout_rate);
    if (o.has("dropout_stages")) {
        std::set<std::string> stages;
        o.read("dropout_stages", stages);
        c.dropout_stages = stages;
    }
    o.finish();
    return c;
}

}  // namespace crackseg
