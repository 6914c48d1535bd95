#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "idal/core.hpp"

namespace idal {

// Dataset manifest: a JSON file listing cases and their image paths.
// Relative paths resolve against the manifest's own directory.

struct CaseEntry {
    std::string id;
    std::string t1, t2, dwi, flair;
    std::optional<std::string> gt;
    std::optional<std::string> sur;
    std::optional<std::string> csf;
};

struct Manifest {
    int schema_version = 1;
    std::vector<CaseEntry> cases;

    const CaseEntry& find(const std::string& id) const {
        for (const auto& c : cases)
            if (c.id == id) return c;
        throw ConfigError(msg("case id not in manifest: ", id));
    }
};

namespace manifest_detail {

inline std::string resolve(const std::filesystem::path& base, const std::string& p) {
    std::filesystem::path fp(p);
    if (fp.is_absolute()) return fp.string();
    return (base / fp).lexically_normal().string();
}

inline std::string required_path(const nlohmann::json& j, const char* key,
                                 const std::filesystem::path& base, const std::string& id) {
    if (!j.contains(key) || !j[key].is_string() || j[key].get<std::string>().empty())
        throw ConfigError(msg("case '", id, "': missing or invalid '", key, "' path"));
    return resolve(base, j[key].get<std::string>());
}

inline std::optional<std::string> optional_path(const nlohmann::json& j, const char* key,
                                                const std::filesystem::path& base, const std::string& id) {
    if (!j.contains(key) || j[key].is_null()) return std::nullopt;
    if (!j[key].is_string() || j[key].get<std::string>().empty())
        throw ConfigError(msg("case '", id, "': invalid '", key, "' path"));
    return resolve(base, j[key].get<std::string>());
}

}  // namespace manifest_detail

inline Manifest load_manifest(const std::string& path) {
    using namespace manifest_detail;
    std::ifstream in(path);
    if (!in) throw IoError(msg("cannot open manifest: ", path));
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(msg("manifest is not valid JSON: ", path, " (", e.what(), ")"));
    }
    if (!j.is_object() || !j.contains("cases") || !j["cases"].is_array())
        throw ConfigError(msg("manifest must be an object with a 'cases' array: ", path));

    Manifest m;
    m.schema_version = j.value("schema_version", 1);
    if (m.schema_version != 1)
        throw ConfigError(msg("unsupported manifest schema_version ", m.schema_version, ": ", path));

    const auto base = std::filesystem::absolute(std::filesystem::path(path)).parent_path();
    std::set<std::string> seen;
    for (const auto& jc : j["cases"]) {
        if (!jc.is_object() || !jc.contains("id") || !jc["id"].is_string())
            throw ConfigError(msg("every case needs a string 'id': ", path));
        CaseEntry c;
        c.id = jc["id"].get<std::string>();
        if (c.id.empty()) throw ConfigError(msg("empty case id: ", path));
        if (!seen.insert(c.id).second) throw ConfigError(msg("duplicate case id '", c.id, "': ", path));
        c.t1 = required_path(jc, "t1", base, c.id);
        c.t2 = required_path(jc, "t2", base, c.id);
        c.dwi = required_path(jc, "dwi", base, c.id);
        c.flair = required_path(jc, "flair", base, c.id);
        c.gt = optional_path(jc, "gt", base, c.id);
        c.sur = optional_path(jc, "sur", base, c.id);
        c.csf = optional_path(jc, "csf", base, c.id);
        m.cases.push_back(std::move(c));
    }
    if (m.cases.empty()) throw ConfigError(msg("manifest lists no cases: ", path));
    return m;
}

inline void save_manifest(const Manifest& m, const std::string& path,
                          const std::filesystem::path& relative_to = {}) {
    nlohmann::json j;
    j["schema_version"] = m.schema_version;
    auto rel = [&](const std::string& p) -> std::string {
        if (relative_to.empty()) return p;
        std::error_code ec;
        const auto r = std::filesystem::relative(p, relative_to, ec);
        return ec ? p : r.string();
    };
    j["cases"] = nlohmann::json::array();
    for (const auto& c : m.cases) {
        nlohmann::json jc;
        jc["id"] = c.id;
        jc["t1"] = rel(c.t1);
        jc["t2"] = rel(c.t2);
        jc["dwi"] = rel(c.dwi);
        jc["flair"] = rel(c.flair);
        if (c.gt) jc["gt"] = rel(*c.gt);
        if (c.sur) jc["sur"] = rel(*c.sur);
        if (c.csf) jc["csf"] = rel(*c.csf);
        j["cases"].push_back(jc);
    }
    const std::filesystem::path p(path);
    if (p.has_parent_path()) {
        std::error_code ec;
        std::filesystem::create_directories(p.parent_path(), ec);
    }
    std::ofstream out(path);
    if (!out) throw IoError(msg("cannot write manifest: ", path));
    out << j.dump(2) << "\n";
}

}  // namespace idal
