#include "iaekf/csv.hpp"

#include <cstdio>
#include <cstdlib>
#include <istream>
#include <ostream>

#include "iaekf/errors.hpp"

namespace iaekf::csv {

std::string format(double value) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", value);
    return buf;
}

void write_row(std::ostream& os, std::string_view prefix, const std::vector<double>& values) {
    bool first = true;
    if (!prefix.empty()) {
        os << prefix;
        first = false;
    }
    for (double v : values) {
        if (!first) os << ',';
        os << format(v);
        first = false;
    }
    os << '\n';
}

void write_header(std::ostream& os, const std::vector<std::string>& columns) {
    for (std::size_t i = 0; i < columns.size(); ++i) {
        if (i) os << ',';
        os << columns[i];
    }
    os << '\n';
}

std::vector<std::string> split(std::string_view line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const auto pos = line.find(',', start);
        auto field = line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start);
        while (!field.empty() && (field.front() == ' ' || field.front() == '\t')) field.remove_prefix(1);
        while (!field.empty() && (field.back() == ' ' || field.back() == '\t' || field.back() == '\r'))
            field.remove_suffix(1);
        out.emplace_back(field);
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

std::vector<std::vector<double>> read_table(std::istream& is, const std::vector<std::string>& expected) {
    std::string line;
    if (!std::getline(is, line)) {
        throw ConfigError("csv: missing header row");
    }
    const auto header = split(line);
    if (header != expected) {
        throw ConfigError("csv: unexpected header '" + line + "'");
    }
    std::vector<std::vector<double>> rows;
    std::size_t lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty() || line == "\r") continue;
        const auto fields = split(line);
        if (fields.size() != expected.size()) {
            throw ConfigError("csv: line " + std::to_string(lineno) + ": expected " +
                              std::to_string(expected.size()) + " fields, got " + std::to_string(fields.size()));
        }
        std::vector<double> row;
        row.reserve(fields.size());
        for (std::size_t i = 0; i < fields.size(); ++i) {
            char* end = nullptr;
            const double v = std::strtod(fields[i].c_str(), &end);
            if (fields[i].empty() || end != fields[i].c_str() + fields[i].size()) {
                throw ConfigError("csv: line " + std::to_string(lineno) + ", column '" + expected[i] +
                                  "': not a number: '" + fields[i] + "'");
            }
            row.push_back(v);
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

}  // namespace iaekf::csv
