#pragma once

// Pairwise case-similarity matrix and its CSV round trip.
//
// The matrix is asymmetric: values.at(i, j) is the Dice overlap obtained by
// training a voxel classifier on case i and evaluating it on case j's ground
// truth. The diagonal is computed like any other entry but selection logic
// must ignore it; leave-one-out removes an entire row and column.

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <idal/core.hpp>

namespace idal {

struct SimilarityMatrix {
    std::vector<std::string> case_ids;
    Matrix<double> values;  // rows: trained-on case, cols: evaluated-on case

    std::size_t size() const { return case_ids.size(); }

    std::size_t index_of(const std::string& id) const {
        for (std::size_t i = 0; i < case_ids.size(); ++i)
            if (case_ids[i] == id) return i;
        throw ConfigError(msg("similarity matrix has no case '", id, "'"));
    }
};

// Drops one case's row and column, preserving the order of the rest.
inline SimilarityMatrix remove_case(const SimilarityMatrix& sim, const std::string& id) {
    const std::size_t drop = sim.index_of(id);
    SimilarityMatrix out;
    out.case_ids.reserve(sim.size() - 1);
    for (std::size_t i = 0; i < sim.size(); ++i)
        if (i != drop) out.case_ids.push_back(sim.case_ids[i]);
    out.values = Matrix<double>(out.case_ids.size(), out.case_ids.size());
    std::size_t r = 0;
    for (std::size_t i = 0; i < sim.size(); ++i) {
        if (i == drop) continue;
        std::size_t c = 0;
        for (std::size_t j = 0; j < sim.size(); ++j) {
            if (j == drop) continue;
            out.values.at(r, c) = sim.values.at(i, j);
            ++c;
        }
        ++r;
    }
    return out;
}

// Long-format CSV: one data row per (trained-on, evaluated-on) pair. The
// sc_selected flag marks pairs the similarity classifier actually picked when
// the export comes from an evaluation run; plain matrix dumps leave it 0.
inline void save_similarity_csv(const SimilarityMatrix& sim, const std::filesystem::path& path,
                                const Matrix<uint8_t>* sc_selected = nullptr) {
    if (sc_selected != nullptr &&
        (sc_selected->rows != sim.size() || sc_selected->cols != sim.size()))
        throw ConfigError("sc_selected shape does not match similarity matrix");
    if (!path.parent_path().empty()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError(msg("cannot open '", path.string(), "' for writing"));
    out << "# sim_matrix schema v1\n";
    out << "row,column,similarity,sc_selected\n";
    char buf[64];
    for (std::size_t i = 0; i < sim.size(); ++i) {
        for (std::size_t j = 0; j < sim.size(); ++j) {
            std::snprintf(buf, sizeof buf, "%.17g", sim.values.at(i, j));
            const int flag = sc_selected != nullptr && sc_selected->at(i, j) != 0 ? 1 : 0;
            out << sim.case_ids[i] << ',' << sim.case_ids[j] << ',' << buf << ',' << flag
                << '\n';
        }
    }
    if (!out) throw IoError(msg("short write to '", path.string(), "'"));
}

inline SimilarityMatrix load_similarity_csv(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(msg("cannot open '", path.string(), "'"));
    std::string line;
    if (!std::getline(in, line) || line.rfind("# sim_matrix schema v1", 0) != 0)
        throw IoError(msg("'", path.string(), "' is not a v1 similarity CSV"));
    if (!std::getline(in, line) || line.rfind("row,column,similarity", 0) != 0)
        throw IoError(msg("'", path.string(), "' is missing the similarity CSV header"));

    struct Entry {
        std::string row, col;
        double value;
    };
    std::vector<Entry> entries;
    std::vector<std::string> ids;
    auto intern = [&](const std::string& id) {
        for (const auto& known : ids)
            if (known == id) return;
        ids.push_back(id);
    };
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream row(line);
        Entry e;
        std::string value_text, flag_text;
        if (!std::getline(row, e.row, ',') || !std::getline(row, e.col, ',') ||
            !std::getline(row, value_text, ',') || !std::getline(row, flag_text))
            throw IoError(msg("malformed similarity CSV line: ", line));
        try {
            e.value = std::stod(value_text);
        } catch (const std::exception&) {
            throw IoError(msg("bad similarity value '", value_text, "' in '", path.string(), "'"));
        }
        intern(e.row);
        intern(e.col);
        entries.push_back(std::move(e));
    }
    SimilarityMatrix sim;
    sim.case_ids = ids;
    sim.values = Matrix<double>(ids.size(), ids.size());
    std::vector<uint8_t> seen(ids.size() * ids.size(), 0);
    for (const auto& e : entries) {
        const std::size_t i = sim.index_of(e.row);
        const std::size_t j = sim.index_of(e.col);
        sim.values.at(i, j) = e.value;
        seen[i * ids.size() + j] = 1;
    }
    for (uint8_t s : seen)
        if (!s) throw IoError(msg("similarity CSV '", path.string(), "' is missing entries"));
    return sim;
}

}  // namespace idal
