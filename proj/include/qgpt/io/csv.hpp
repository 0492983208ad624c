#pragma once

#include <cctype>
#include <cmath>
#include <cstdlib>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "qgpt/core/error.hpp"

namespace qgpt::io {

// Shortest text that reads back to the same double.
inline std::string fmt_real(double v) {
    char buf[32];
    for (int p = 15; p <= 17; ++p) {
        std::snprintf(buf, sizeof buf, "%.*g", p, v);
        if (std::strtod(buf, nullptr) == v) break;
    }
    return buf;
}

inline std::string fmt_fixed(double v, int decimals) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
    return buf;
}

// Comma-separated rows with a fixed column count. Fields never contain commas
// or quotes (names are identifiers), which the writer checks.
class CsvWriter {
public:
    explicit CsvWriter(std::vector<std::string> header) : cols_(header.size()) { row(header); }

    template <class... Args>
    void add(const Args&... fields) {
        row({field(fields)...});
    }

    void row(const std::vector<std::string>& fields) {
        if (fields.size() != cols_) {
            throw ContractError("csv row has " + std::to_string(fields.size()) + " fields, expected " + std::to_string(cols_));
        }
        for (std::size_t i = 0; i < fields.size(); ++i) {
            if (fields[i].find_first_of(",\"\n") != std::string::npos) throw ContractError("csv field needs quoting: " + fields[i]);
            text_ += (i ? "," : "") + fields[i];
        }
        text_ += "\n";
    }

    const std::string& text() const { return text_; }

private:
    static std::string field(const std::string& s) { return s; }
    static std::string field(const char* s) { return s; }
    static std::string field(double v) { return fmt_real(v); }
    static std::string field(float v) { return fmt_real(v); }
    template <class I>
        requires std::is_integral_v<I>
    static std::string field(I v) {
        return std::to_string(v);
    }

    std::size_t cols_;
    std::string text_;
};

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    std::size_t column(const std::string& name) const {
        for (std::size_t i = 0; i < header.size(); ++i)
            if (header[i] == name) return i;
        throw NameError("csv has no column '" + name + "'");
    }
};

// Strict reader: constant column count and no non-finite numbers.
inline CsvTable parse_csv_strict(const std::string& text) {
    CsvTable t;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::vector<std::string> f;
        std::size_t start = 0;
        while (true) {
            const auto c = line.find(',', start);
            f.push_back(line.substr(start, c == std::string::npos ? std::string::npos : c - start));
            if (c == std::string::npos) break;
            start = c + 1;
        }
        if (lineno == 1) {
            t.header = std::move(f);
            continue;
        }
        for (const auto& x : f) {
            std::string lower;
            for (char ch : x) lower += static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
            if (lower == "nan" || lower == "-nan" || lower == "inf" || lower == "-inf" || lower == "infinity") {
                throw IntegrityError("csv line " + std::to_string(lineno) + ": non-finite value '" + x + "'");
            }
        }
        if (f.size() != t.header.size()) {
            throw IntegrityError("csv line " + std::to_string(lineno) + " has " + std::to_string(f.size()) + " fields, header has " +
                                 std::to_string(t.header.size()));
        }
        t.rows.push_back(std::move(f));
    }
    if (lineno == 0) throw IntegrityError("csv is empty");
    return t;
}

}  // namespace qgpt::io
