#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace dpn {

struct CsvError : std::runtime_error {
  CsvError(const std::string& what, int line)
      : std::runtime_error(what + " (line " + std::to_string(line) + ")"),
        line(line) {}
  int line;
};

// Minimal CSV: header row, comma separated, LF line endings. Cells are kept
// as text; numeric access converts on demand and reports the file line on
// failure.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  double number(size_t row, size_t col) const;
};

CsvTable read_csv(const std::string& path);

// Curve file in the report schema: step/pair-id, value, kind, seed.
void write_curve_csv(const std::string& path, const std::string& id_column,
                     const std::vector<double>& values, const std::string& kind,
                     uint64_t seed);

// Self-contained SVG 1.1 line chart: one polyline per table (first column x,
// second column y), axis labels from the first table's header. Deterministic
// output bytes for identical inputs.
std::string render_svg_chart(const std::vector<CsvTable>& tables,
                             const std::vector<std::string>& names);

}  // namespace dpn
