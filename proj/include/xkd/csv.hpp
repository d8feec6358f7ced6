#pragma once

// Minimal delimited-text support: comma separator, double-quote escaping,
// tolerant of CRLF. Used for the metadata CSV, manifests, and prediction
// tables.

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "xkd/common.hpp"

namespace xkd {

using CsvRow = std::vector<std::string>;

inline CsvRow parse_csv_line(const std::string& line) {
    CsvRow out;
    std::string field;
    bool quoted = false;
    for (size_t i = 0; i < line.size(); ++i) {
        char c = line[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    field += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                field += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            out.push_back(field);
            field.clear();
        } else if (c == '\r') {
            // swallow
        } else {
            field += c;
        }
    }
    out.push_back(field);
    return out;
}

inline std::vector<CsvRow> read_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail("cannot open delimited file: " + path);
    std::vector<CsvRow> rows;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || (line.size() == 1 && line[0] == '\r')) continue;
        rows.push_back(parse_csv_line(line));
    }
    return rows;
}

inline std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += "\"\"";
        else out += c;
    }
    out += "\"";
    return out;
}

inline std::string join_csv(const CsvRow& row) {
    std::string out;
    for (size_t i = 0; i < row.size(); ++i) {
        if (i) out += ',';
        out += csv_escape(row[i]);
    }
    return out;
}

}  // namespace xkd
