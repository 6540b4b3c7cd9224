#include "dpn/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace dpn {

double CsvTable::number(size_t row, size_t col) const {
  const std::string& cell = rows[row][col];
  try {
    size_t used = 0;
    double v = std::stod(cell, &used);
    if (used != cell.size()) throw std::invalid_argument(cell);
    return v;
  } catch (const std::exception&) {
    throw CsvError("cell \"" + cell + "\" is not numeric",
                   static_cast<int>(row) + 2);
  }
}

CsvTable read_csv(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CsvError("cannot open " + path, 0);
  CsvTable table;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (line.back() == ',') cells.push_back("");
    if (lineno == 1) {
      table.header = cells;
      continue;
    }
    if (cells.size() != table.header.size()) {
      throw CsvError("row has " + std::to_string(cells.size()) +
                         " cells, header has " + std::to_string(table.header.size()),
                     lineno);
    }
    table.rows.push_back(std::move(cells));
  }
  if (table.header.empty()) throw CsvError("empty file " + path, 0);
  return table;
}

void write_curve_csv(const std::string& path, const std::string& id_column,
                     const std::vector<double>& values, const std::string& kind,
                     uint64_t seed) {
  std::ofstream f(path, std::ios::trunc | std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  f << id_column << ",value,kind,seed\n";
  f.precision(17);
  for (size_t i = 0; i < values.size(); ++i) {
    f << i << "," << values[i] << "," << kind << "," << seed << "\n";
  }
}

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

}  // namespace

std::string render_svg_chart(const std::vector<CsvTable>& tables,
                             const std::vector<std::string>& names) {
  if (tables.empty()) throw std::invalid_argument("no series to plot");
  if (names.size() != tables.size()) {
    throw std::invalid_argument("series/name count mismatch");
  }
  double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
  for (const CsvTable& t : tables) {
    if (t.header.size() < 2) throw std::invalid_argument("series needs 2 columns");
    for (size_t r = 0; r < t.rows.size(); ++r) {
      double x = t.number(r, 0), y = t.number(r, 1);
      xmin = std::min(xmin, x);
      xmax = std::max(xmax, x);
      ymin = std::min(ymin, y);
      ymax = std::max(ymax, y);
    }
  }
  if (xmin > xmax) {
    xmin = 0;
    xmax = 1;
    ymin = 0;
    ymax = 1;
  }
  if (xmax == xmin) xmax = xmin + 1;
  if (ymax == ymin) ymax = ymin + 1;

  const double w = 720, h = 480, ml = 70, mr = 20, mt = 20, mb = 50;
  auto px = [&](double x) { return ml + (x - xmin) / (xmax - xmin) * (w - ml - mr); };
  auto py = [&](double y) { return h - mb - (y - ymin) / (ymax - ymin) * (h - mt - mb); };

  static const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c",
                                  "#9467bd", "#ff7f0e", "#8c564b"};
  std::ostringstream os;
  os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
     << "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" << w
     << "\" height=\"" << h << "\" viewBox=\"0 0 " << w << " " << h << "\">\n"
     << "<rect width=\"" << w << "\" height=\"" << h << "\" fill=\"white\"/>\n"
     << "<line x1=\"" << ml << "\" y1=\"" << h - mb << "\" x2=\"" << w - mr
     << "\" y2=\"" << h - mb << "\" stroke=\"black\"/>\n"
     << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\""
     << h - mb << "\" stroke=\"black\"/>\n";
  // Axis ticks at the extremes.
  os << "<text x=\"" << ml << "\" y=\"" << h - mb + 18
     << "\" font-size=\"12\" text-anchor=\"middle\">" << fmt(xmin) << "</text>\n"
     << "<text x=\"" << w - mr << "\" y=\"" << h - mb + 18
     << "\" font-size=\"12\" text-anchor=\"middle\">" << fmt(xmax) << "</text>\n"
     << "<text x=\"" << ml - 8 << "\" y=\"" << h - mb + 4
     << "\" font-size=\"12\" text-anchor=\"end\">" << fmt(ymin) << "</text>\n"
     << "<text x=\"" << ml - 8 << "\" y=\"" << mt + 4
     << "\" font-size=\"12\" text-anchor=\"end\">" << fmt(ymax) << "</text>\n";
  // Axis labels from the first table's header.
  os << "<text x=\"" << (ml + w - mr) / 2 << "\" y=\"" << h - 12
     << "\" font-size=\"14\" text-anchor=\"middle\">" << tables[0].header[0]
     << "</text>\n"
     << "<text x=\"16\" y=\"" << (mt + h - mb) / 2
     << "\" font-size=\"14\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
     << (mt + h - mb) / 2 << ")\">" << tables[0].header[1] << "</text>\n";

  for (size_t s = 0; s < tables.size(); ++s) {
    const char* color = kColors[s % 6];
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (size_t i = 0; i < tables[s].rows.size(); ++i) {
      if (i) os << " ";
      os << fmt(px(tables[s].number(i, 0))) << "," << fmt(py(tables[s].number(i, 1)));
    }
    os << "\"/>\n";
    os << "<text x=\"" << w - mr - 6 << "\" y=\"" << mt + 16 + 16 * s
       << "\" font-size=\"12\" text-anchor=\"end\" fill=\"" << color << "\">"
       << names[s] << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace dpn
