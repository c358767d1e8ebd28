#pragma once

#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

namespace iaekf::csv {

/// %.17g, so doubles round-trip exactly.
std::string format(double value);

/// Appends `values` to `os` as one comma-separated row, leading with `prefix` when non-empty.
void write_row(std::ostream& os, std::string_view prefix, const std::vector<double>& values);

void write_header(std::ostream& os, const std::vector<std::string>& columns);

std::vector<std::string> split(std::string_view line);

/// Parses every row after the header; checks the header matches `expected` exactly.
std::vector<std::vector<double>> read_table(std::istream& is, const std::vector<std::string>& expected);

}  // namespace iaekf::csv
