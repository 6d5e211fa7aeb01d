#pragma once

#include <set>
#include <string>
#include <vector>

#include <json.hpp>

namespace clgeo::detail {

using nlohmann::json;

// Reads one JSON object, recording every problem instead of stopping at the
// first one.
class FieldReader {
public:
    FieldReader(const json& obj, std::string path, std::vector<std::string>& errors)
        : obj_(obj), path_(std::move(path)), errors_(errors) {
        if (!obj_.is_object()) fail("", "must be an object");
    }

    ~FieldReader() {
        if (!obj_.is_object()) return;
        for (const auto& [k, v] : obj_.items())
            if (!seen_.count(k)) fail(k, "unknown key");
    }

    bool has(const std::string& key) {
        seen_.insert(key);
        return obj_.is_object() && obj_.contains(key) && !obj_.at(key).is_null();
    }

    const json& raw(const std::string& key) { return obj_.at(key); }

    template <class T>
    void read(const std::string& key, T& out) {
        if (!has(key)) return;
        try {
            out = obj_.at(key).get<T>();
        } catch (const json::exception&) {
            fail(key, "has the wrong type");
        }
    }

    void read_number(const std::string& key, double& out) {
        if (!has(key)) return;
        if (!obj_.at(key).is_number()) return fail(key, "must be a number");
        out = obj_.at(key).get<double>();
    }

    void read_int(const std::string& key, long long& out) {
        if (!has(key)) return;
        if (!obj_.at(key).is_number_integer()) return fail(key, "must be an integer");
        out = obj_.at(key).get<long long>();
    }

    void fail(const std::string& key, const std::string& msg) {
        errors_.push_back((key.empty() ? path_ : path_ + "." + key) + ": " + msg);
    }

    const std::string& path() const { return path_; }

private:
    const json& obj_;
    std::string path_;
    std::vector<std::string>& errors_;
    std::set<std::string> seen_;
};

template <class T>
void read_positive(FieldReader& r, const std::string& key, T& out) {
    long long v = static_cast<long long>(out);
    r.read_int(key, v);
    if (v <= 0) r.fail(key, "must be positive");
    out = static_cast<T>(v);
}


}  // namespace clgeo::detail
