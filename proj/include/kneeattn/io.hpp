#pragma once

// cells-csv / cells-json readers and writers, plus the converter from the
// public dataset's per-cell CSV dump.
//
// cells-csv: one row per sample, header
//   cell_id,batch,policy,cycle,t_min,V,I,T,Qc,Qd
// Rows of a cell must be contiguous and cycles numbered 1, 2, ... with no gaps.
//
// cells-json:
//   {"cells": [{"cell_id": "b1c3", "batch": 1, "policy": "4C(80%)-4C",
//               "cycles": [{"cycle": 1, "t_min": [...], "V": [...], "I": [...],
//                           "T": [...], "Qc": [...], "Qd": [...]}, ...]}, ...]}

#include <algorithm>
#include <charconv>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <system_error>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "kneeattn/cell.hpp"
#include "kneeattn/error.hpp"

namespace kneeattn {

enum class CorpusFormat { cells_csv, cells_json };

inline CorpusFormat parse_corpus_format(const std::string& name) {
    if (name == "cells-csv") return CorpusFormat::cells_csv;
    if (name == "cells-json") return CorpusFormat::cells_json;
    throw ConfigError("unknown corpus format \"" + name + "\" (expected cells-csv or cells-json)");
}

inline CorpusFormat format_from_path(const std::filesystem::path& path) {
    return path.extension() == ".json" ? CorpusFormat::cells_json : CorpusFormat::cells_csv;
}

/// Shortest round-trip decimal form of a double.
inline std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

namespace csv {

inline std::vector<std::string> split_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        char ch = line[i];
        if (quoted) {
            if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                cur += '"';
                ++i;
            } else if (ch == '"') {
                quoted = false;
            } else {
                cur += ch;
            }
        } else if (ch == '"') {
            quoted = true;
        } else if (ch == ',') {
            fields.push_back(std::move(cur));
            cur.clear();
        } else if (ch != '\r') {
            cur += ch;
        }
    }
    fields.push_back(std::move(cur));
    return fields;
}

inline std::string trim(std::string s) {
    auto ws = [](unsigned char c) { return std::isspace(c) != 0; };
    s.erase(s.begin(), std::find_if_not(s.begin(), s.end(), ws));
    s.erase(std::find_if_not(s.rbegin(), s.rend(), ws).base(), s.end());
    return s;
}

/// Header plus a column-name → index map; fails on missing columns.
class Header {
public:
    explicit Header(const std::string& line) {
        names_ = split_line(line);
        for (std::size_t i = 0; i < names_.size(); ++i) {
            names_[i] = trim(names_[i]);
            if (i == 0 && names_[i].rfind("\xEF\xBB\xBF", 0) == 0) names_[i].erase(0, 3);
            index_[names_[i]] = i;
        }
    }

    std::optional<std::size_t> find(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) return std::nullopt;
        return it->second;
    }

    std::size_t require(const std::string& name) const {
        auto idx = find(name);
        if (!idx) throw IngestError("missing column " + name);
        return *idx;
    }

    std::size_t size() const noexcept { return names_.size(); }

private:
    std::vector<std::string> names_;
    std::unordered_map<std::string, std::size_t> index_;
};

inline double parse_number(const std::string& text, std::size_t line_no, const std::string& column) {
    std::string s = trim(text);
    double v = 0.0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size())
        throw IngestError("line " + std::to_string(line_no) + ": column " + column + ": not a number \"" + s + "\"");
    return v;
}

}  // namespace csv

inline std::vector<CellRecord> read_cells_csv(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) throw IngestError("empty cells-csv input (header required)");
    csv::Header header(line);
    const std::size_t c_cell = header.require("cell_id"), c_batch = header.require("batch"),
                      c_policy = header.require("policy"), c_cycle = header.require("cycle"),
                      c_t = header.require("t_min"), c_v = header.require("V"), c_i = header.require("I"),
                      c_temp = header.require("T"), c_qc = header.require("Qc"), c_qd = header.require("Qd");

    std::vector<CellRecord> cells;
    std::unordered_map<std::string, std::size_t> seen;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (csv::trim(line).empty()) continue;
        auto f = csv::split_line(line);
        if (f.size() < header.size())
            throw IngestError("line " + std::to_string(line_no) + ": expected " + std::to_string(header.size()) +
                              " fields, got " + std::to_string(f.size()));
        std::string id = csv::trim(f[c_cell]);
        if (cells.empty() || cells.back().cell_id != id) {
            if (seen.count(id)) throw IngestError("line " + std::to_string(line_no) + ": rows of cell " + id + " are not contiguous");
            seen[id] = cells.size();
            CellRecord rec;
            rec.cell_id = id;
            rec.batch = static_cast<int>(csv::parse_number(f[c_batch], line_no, "batch"));
            rec.policy = parse_policy(csv::trim(f[c_policy]));
            cells.push_back(std::move(rec));
        }
        CellRecord& rec = cells.back();
        double cyc = csv::parse_number(f[c_cycle], line_no, "cycle");
        auto k = static_cast<std::size_t>(cyc);
        if (cyc < 1 || static_cast<double>(k) != cyc)
            throw IngestError("line " + std::to_string(line_no) + ": cell " + id + ": invalid cycle index");
        if (k == rec.cycles.size() + 1) {
            rec.cycles.emplace_back();
        } else if (k != rec.cycles.size()) {
            throw IngestError("line " + std::to_string(line_no) + ": cell " + id + " cycle " + std::to_string(k) +
                              ": cycles must be contiguous and start at 1");
        }
        CycleTrace& c = rec.cycles.back();
        c.t.push_back(csv::parse_number(f[c_t], line_no, "t_min"));
        c.V.push_back(csv::parse_number(f[c_v], line_no, "V"));
        c.I.push_back(csv::parse_number(f[c_i], line_no, "I"));
        c.T.push_back(csv::parse_number(f[c_temp], line_no, "T"));
        c.Qc.push_back(csv::parse_number(f[c_qc], line_no, "Qc"));
        c.Qd.push_back(csv::parse_number(f[c_qd], line_no, "Qd"));
    }
    for (const CellRecord& rec : cells) validate_cell(rec);
    return cells;
}

inline void write_cells_csv(std::ostream& out, const std::vector<CellRecord>& cells) {
    out << "cell_id,batch,policy,cycle,t_min,V,I,T,Qc,Qd\n";
    for (const CellRecord& rec : cells) {
        std::string prefix = rec.cell_id + "," + std::to_string(rec.batch) + "," + format_policy(rec.policy) + ",";
        for (std::size_t k = 0; k < rec.cycles.size(); ++k) {
            const CycleTrace& c = rec.cycles[k];
            for (std::size_t i = 0; i < c.size(); ++i) {
                out << prefix << (k + 1) << ',' << format_double(c.t[i]) << ',' << format_double(c.V[i]) << ','
                    << format_double(c.I[i]) << ',' << format_double(c.T[i]) << ',' << format_double(c.Qc[i]) << ','
                    << format_double(c.Qd[i]) << '\n';
            }
        }
    }
}

inline std::vector<CellRecord> read_cells_json(std::istream& in) {
    nlohmann::json doc;
    try {
        in >> doc;
    } catch (const nlohmann::json::exception& e) {
        throw IngestError(std::string("cells-json parse error: ") + e.what());
    }
    if (!doc.contains("cells") || !doc["cells"].is_array()) throw IngestError("cells-json: missing \"cells\" array");
    std::vector<CellRecord> cells;
    for (const auto& jc : doc["cells"]) {
        CellRecord rec;
        for (const char* key : {"cell_id", "batch", "policy", "cycles"})
            if (!jc.contains(key)) throw IngestError(std::string("missing column ") + key);
        rec.cell_id = jc["cell_id"].get<std::string>();
        rec.batch = jc["batch"].get<int>();
        rec.policy = parse_policy(jc["policy"].get<std::string>());
        std::size_t expect = 1;
        for (const auto& jy : jc["cycles"]) {
            if (jy.contains("cycle") && jy["cycle"].get<std::size_t>() != expect)
                throw IngestError("cell " + rec.cell_id + " cycle " + std::to_string(jy["cycle"].get<std::size_t>()) +
                                  ": cycles must be contiguous and start at 1");
            CycleTrace c;
            auto series = [&](const char* key, std::vector<double>& dst) {
                if (!jy.contains(key)) throw IngestError(std::string("missing column ") + key);
                dst = jy[key].get<std::vector<double>>();
            };
            series("t_min", c.t);
            series("V", c.V);
            series("I", c.I);
            series("T", c.T);
            series("Qc", c.Qc);
            series("Qd", c.Qd);
            rec.cycles.push_back(std::move(c));
            ++expect;
        }
        validate_cell(rec);
        cells.push_back(std::move(rec));
    }
    return cells;
}

inline void write_cells_json(std::ostream& out, const std::vector<CellRecord>& cells) {
    nlohmann::json doc;
    doc["cells"] = nlohmann::json::array();
    for (const CellRecord& rec : cells) {
        nlohmann::json jc{{"cell_id", rec.cell_id}, {"batch", rec.batch}, {"policy", format_policy(rec.policy)}};
        jc["cycles"] = nlohmann::json::array();
        for (std::size_t k = 0; k < rec.cycles.size(); ++k) {
            const CycleTrace& c = rec.cycles[k];
            jc["cycles"].push_back({{"cycle", k + 1}, {"t_min", c.t}, {"V", c.V}, {"I", c.I},
                                    {"T", c.T}, {"Qc", c.Qc}, {"Qd", c.Qd}});
        }
        doc["cells"].push_back(std::move(jc));
    }
    out << doc.dump() << '\n';
}

inline std::vector<CellRecord> load_corpus(const std::filesystem::path& path, CorpusFormat format) {
    std::ifstream in(path);
    if (!in) throw IngestError("cannot read " + path.string());
    return format == CorpusFormat::cells_json ? read_cells_json(in) : read_cells_csv(in);
}

inline std::vector<CellRecord> load_corpus(const std::filesystem::path& path) {
    return load_corpus(path, format_from_path(path));
}

inline void save_corpus(const std::filesystem::path& path, const std::vector<CellRecord>& cells,
                        CorpusFormat format) {
    std::ofstream out(path);
    if (!out) throw IngestError("cannot write " + path.string());
    if (format == CorpusFormat::cells_json)
        write_cells_json(out, cells);
    else
        write_cells_csv(out, cells);
}

/// Maps the public dataset's per-cell CSV dump to cells-csv.
///
/// Dump columns (one row per sample, names as in the dataset's structures):
///   cell, policy_readable, cycle, t, V, I, T, Qc, Qd   [batch optional]
/// `batch` defaults to the digit after the leading "b" of the cell name
/// ("b2c14" → 2). Cycle numbers are shifted per cell so the first is 1.
/// Returns the number of sample rows written (always equal to rows read).
inline std::size_t convert_public_dump(std::istream& in, std::ostream& out) {
    std::string line;
    if (!std::getline(in, line)) throw IngestError("empty dump (header required)");
    csv::Header header(line);
    auto pick = [&](std::initializer_list<const char*> names, const char* canonical) {
        for (const char* n : names)
            if (auto idx = header.find(n)) return *idx;
        throw IngestError(std::string("missing column ") + canonical);
    };
    const std::size_t c_cell = pick({"cell", "cell_id"}, "cell"), c_pol = pick({"policy_readable", "policy"}, "policy_readable"),
                      c_cyc = pick({"cycle", "cycle_index"}, "cycle"), c_t = pick({"t", "t_min"}, "t"),
                      c_v = pick({"V"}, "V"), c_i = pick({"I"}, "I"), c_temp = pick({"T"}, "T"),
                      c_qc = pick({"Qc"}, "Qc"), c_qd = pick({"Qd"}, "Qd");
    const auto c_batch = header.find("batch");

    struct Row {
        std::vector<std::string> f;
        std::size_t line_no;
    };
    std::vector<std::string> order;
    std::map<std::string, std::vector<Row>> by_cell;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (csv::trim(line).empty()) continue;
        auto f = csv::split_line(line);
        if (f.size() < header.size())
            throw IngestError("line " + std::to_string(line_no) + ": expected " + std::to_string(header.size()) +
                              " fields, got " + std::to_string(f.size()));
        std::string id = csv::trim(f[c_cell]);
        if (!by_cell.count(id)) order.push_back(id);
        by_cell[id].push_back({std::move(f), line_no});
    }

    std::size_t written = 0;
    out << "cell_id,batch,policy,cycle,t_min,V,I,T,Qc,Qd\n";
    for (const std::string& id : order) {
        const auto& rows = by_cell[id];
        int batch = 0;
        if (c_batch) {
            batch = static_cast<int>(csv::parse_number(rows.front().f[*c_batch], rows.front().line_no, "batch"));
        } else {
            static const std::regex pat(R"(^b(\d+)c\d+.*$)");
            std::smatch m;
            if (!std::regex_match(id, m, pat))
                throw IngestError("line " + std::to_string(rows.front().line_no) + ": cannot derive batch from cell \"" +
                                  id + "\"");
            batch = std::stoi(m[1].str());
        }
        double first_cycle = csv::parse_number(rows.front().f[c_cyc], rows.front().line_no, "cycle");
        for (const Row& r : rows)
            first_cycle = std::min(first_cycle, csv::parse_number(r.f[c_cyc], r.line_no, "cycle"));
        std::string policy = format_policy(parse_policy(csv::trim(rows.front().f[c_pol])));
        for (const Row& r : rows) {
            auto num = [&](std::size_t col, const char* name) {
                return format_double(csv::parse_number(r.f[col], r.line_no, name));
            };
            double cyc = csv::parse_number(r.f[c_cyc], r.line_no, "cycle") - first_cycle + 1.0;
            out << id << ',' << batch << ',' << policy << ',' << format_double(cyc) << ',' << num(c_t, "t") << ','
                << num(c_v, "V") << ',' << num(c_i, "I") << ',' << num(c_temp, "T") << ',' << num(c_qc, "Qc") << ','
                << num(c_qd, "Qd") << '\n';
            ++written;
        }
    }
    return written;
}

}  // namespace kneeattn
