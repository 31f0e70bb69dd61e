// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "goat/errors.hpp"
#include "goat/rng.hpp"

namespace goat {

using Json = nlohmann::ordered_json;

// ---- raw frame matrix format ----
//
// 8-byte header: rows (u32 LE), cols (u32 LE); then rows*cols float32 LE.
// Used for frame sequences and for the codec codebook.

inline void write_frame_matrix(const std::string& path, int rows, int cols,
                               const std::vector<float>& data) {
    if (static_cast<size_t>(rows) * cols != data.size())
        throw ArgumentError("write_frame_matrix: size mismatch");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("write_frame_matrix: cannot open " + path);
    const uint32_t r = static_cast<uint32_t>(rows), c = static_cast<uint32_t>(cols);
    os.write(reinterpret_cast<const char*>(&r), 4);
    os.write(reinterpret_cast<const char*>(&c), 4);
    os.write(reinterpret_cast<const char*>(data.data()),
             static_cast<std::streamsize>(data.size() * sizeof(float)));
    if (!os) throw DataError("write_frame_matrix: write failed for " + path);
}

struct FrameMatrix {
    int rows = 0;
    int cols = 0;
    std::vector<float> data;
};

inline FrameMatrix read_frame_matrix(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DependencyError("read_frame_matrix: cannot open " + path);
    uint32_t r = 0, c = 0;
    is.read(reinterpret_cast<char*>(&r), 4);
    is.read(reinterpret_cast<char*>(&c), 4);
    if (!is) throw DataError("read_frame_matrix: truncated header in " + path);
    FrameMatrix m;
    m.rows = static_cast<int>(r);
    m.cols = static_cast<int>(c);
    m.data.resize(static_cast<size_t>(r) * c);
    is.read(reinterpret_cast<char*>(m.data.data()),
            static_cast<std::streamsize>(m.data.size() * sizeof(float)));
    if (!is) throw DataError("read_frame_matrix: truncated data in " + path);
    return m;
}

// ---- key = value config text ----

class KvConfig {
public:
    KvConfig() = default;

    static KvConfig parse(const std::string& text) {
        KvConfig cfg;
        std::istringstream is(text);
        std::string line;
        while (std::getline(is, line)) {
            const auto hash = line.find('#');
            if (hash != std::string::npos) line = line.substr(0, hash);
            const auto eq = line.find('=');
            if (eq == std::string::npos) continue;
            cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
        }
        return cfg;
    }

    static KvConfig load(const std::string& path) {
        std::ifstream is(path);
        if (!is) throw DependencyError("KvConfig: cannot open " + path);
        std::stringstream ss;
        ss << is.rdbuf();
        return parse(ss.str());
    }

    void save(const std::string& path) const {
        std::ofstream os(path);
        if (!os) throw DataError("KvConfig: cannot open " + path);
        os << serialize();
    }

    std::string serialize() const {
        std::string out;
        for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
        return out;
    }

    void set(const std::string& key, const std::string& value) { values_[key] = value; }
    void set_int(const std::string& key, int64_t v) { values_[key] = std::to_string(v); }
    void set_double(const std::string& key, double v) {
        std::ostringstream ss;
        ss.precision(17);
        ss << v;
        values_[key] = ss.str();
    }

    bool has(const std::string& key) const { return values_.count(key) != 0; }

    std::string get(const std::string& key, const std::string& fallback = {}) const {
        auto it = values_.find(key);
        return it == values_.end() ? fallback : it->second;
    }

    int64_t get_int(const std::string& key, int64_t fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        try {
            return std::stoll(it->second);
        } catch (const std::exception&) {
            throw ArgumentError("KvConfig: key '" + key + "' is not an integer");
        }
    }

    double get_double(const std::string& key, double fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        try {
            return std::stod(it->second);
        } catch (const std::exception&) {
            throw ArgumentError("KvConfig: key '" + key + "' is not a number");
        }
    }

    uint64_t hash() const { return fnv1a64(serialize()); }

    const std::map<std::string, std::string>& values() const { return values_; }

private:
    static std::string trim(const std::string& s) {
        size_t a = s.find_first_not_of(" \t\r\n");
        if (a == std::string::npos) return {};
        size_t b = s.find_last_not_of(" \t\r\n");
        return s.substr(a, b - a + 1);
    }

    std::map<std::string, std::string> values_;
};

// ---- line-delimited json records ----

inline void write_jsonl(const std::string& path, const std::vector<Json>& records) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("write_jsonl: cannot open " + path);
    for (const auto& r : records) os << r.dump() << "\n";
    if (!os) throw DataError("write_jsonl: write failed for " + path);
}

inline std::vector<Json> read_jsonl(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DependencyError("read_jsonl: cannot open " + path);
    std::vector<Json> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        try {
            out.push_back(Json::parse(line));
        } catch (const nlohmann::json::parse_error& e) {
            throw DataError("read_jsonl: bad record in " + path + ": " + e.what());
        }
    }
    return out;
}

// Every run writes a manifest next to its outputs: config hash, seeds and
// format versions. Deliberately no timestamps, so reruns are byte-identical.
inline void write_manifest(const std::string& path, const KvConfig& config,
                           const std::vector<std::string>& outputs) {
    Json m;
    m["config_hash"] = config.hash();
    m["seed"] = config.get_int("seed", 0);
    m["format_versions"] = Json{{"checkpoint", 1}, {"frames", 1}, {"codebook", 1}};
    m["config"] = Json::object();
    for (const auto& [k, v] : config.values()) m["config"][k] = v;
    m["outputs"] = outputs;
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("write_manifest: cannot open " + path);
    os << m.dump(2) << "\n";
}

inline bool file_exists(const std::string& path) { return std::filesystem::exists(path); }

inline void ensure_dir(const std::string& path) {
    std::filesystem::create_directories(path);
}

}  // namespace goat
