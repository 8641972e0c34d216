#include "moebal/plot.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include "moebal/errors.hpp"

namespace moebal {

std::size_t CsvTable::column(const std::string& name) const {
  const auto it = std::find(header.begin(), header.end(), name);
  if (it == header.end()) throw ContractError("csv has no column '" + name + "'");
  return static_cast<std::size_t>(it - header.begin());
}

std::vector<double> CsvTable::values(std::size_t col) const {
  std::vector<double> out;
  out.reserve(rows.size());
  for (const auto& r : rows) out.push_back(r.at(col));
  return out;
}

namespace {

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(4);
  os << v;
  return os.str();
}

}  // namespace

CsvTable parse_csv(const std::string& text, const std::string& origin) {
  CsvTable t;
  std::stringstream ss(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(ss, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.front() == '#') continue;
    auto cells = split(line);
    if (t.header.empty()) {
      t.header = std::move(cells);
      continue;
    }
    if (cells.size() != t.header.size())
      throw IoError(origin + ":" + std::to_string(line_no) + ": expected " +
                    std::to_string(t.header.size()) + " cells");
    std::vector<double> row;
    for (const auto& c : cells) {
      try {
        row.push_back(std::stod(c));
      } catch (const std::exception&) {
        throw IoError(origin + ":" + std::to_string(line_no) + ": non-numeric cell '" + c + "'");
      }
    }
    t.rows.push_back(std::move(row));
  }
  if (t.header.empty()) throw IoError(origin + ": missing header");
  return t;
}

CsvTable read_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError(path + ": cannot open csv");
  return parse_csv(std::string(std::istreambuf_iterator<char>(f), {}), path);
}

std::string render_line_chart(const std::vector<Series>& series, const ChartLabels& labels) {
  constexpr double W = 720, H = 440, left = 70, right = 160, top = 40, bottom = 60;
  const double pw = W - left - right, ph = H - top - bottom;
  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  auto px = [&](double x) { return left + (x - x0) / (x1 - x0) * pw; };
  auto py = [&](double y) { return top + ph - (y - y0) / (y1 - y0) * ph; };
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                  "#9467bd", "#8c564b", "#e377c2", "#17becf"};

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
     << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text class=\"title\" x=\"" << left + pw / 2 << "\" y=\"22\" text-anchor=\"middle\">"
     << escape(labels.title) << "</text>\n";
  os << "<line x1=\"" << left << "\" y1=\"" << top + ph << "\" x2=\"" << left + pw << "\" y2=\""
     << top + ph << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << top + ph
     << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double fx = x0 + (x1 - x0) * i / 4.0, fy = y0 + (y1 - y0) * i / 4.0;
    os << "<text x=\"" << px(fx) << "\" y=\"" << top + ph + 16 << "\" text-anchor=\"middle\">"
       << fmt(fx) << "</text>\n";
    os << "<text x=\"" << left - 6 << "\" y=\"" << py(fy) + 4 << "\" text-anchor=\"end\">" << fmt(fy)
       << "</text>\n";
  }
  os << "<text class=\"x-label\" x=\"" << left + pw / 2 << "\" y=\"" << H - 18
     << "\" text-anchor=\"middle\">" << escape(labels.x_label) << "</text>\n";
  os << "<text class=\"y-label\" x=\"18\" y=\"" << top + ph / 2
     << "\" text-anchor=\"middle\" transform=\"rotate(-90 18 " << top + ph / 2 << ")\">"
     << escape(labels.y_label) << "</text>\n";
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const char* color = palette[k % std::size(palette)];
    os << "<polyline data-series=\"" << escape(s.name) << "\" fill=\"none\" stroke=\"" << color
       << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < s.x.size(); ++i)
      os << (i ? " " : "") << px(s.x[i]) << ',' << py(s.y[i]);
    os << "\"/>\n";
    const double ly = top + 14 + 18 * static_cast<double>(k);
    os << "<line x1=\"" << left + pw + 12 << "\" y1=\"" << ly - 4 << "\" x2=\"" << left + pw + 32
       << "\" y2=\"" << ly - 4 << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    os << "<text x=\"" << left + pw + 38 << "\" y=\"" << ly << "\">" << escape(s.name) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

void plot_csv(const std::vector<std::string>& csv_paths, const std::string& x_column,
              const std::string& y_column, const std::string& svg_path) {
  if (csv_paths.empty()) throw ContractError("plot: no csv files given");
  std::vector<Series> series;
  ChartLabels labels;
  if (csv_paths.size() == 1 && y_column.empty()) {
    const auto t = read_csv(csv_paths.front());
    const std::size_t xc = x_column.empty() ? 0 : t.column(x_column);
    labels.x_label = t.header[xc];
    labels.y_label = "value";
    for (std::size_t c = 0; c < t.header.size(); ++c) {
      if (c == xc) continue;
      series.push_back({t.header[c], t.values(xc), t.values(c)});
    }
    labels.title = std::filesystem::path(csv_paths.front()).stem().string();
  } else {
    if (y_column.empty()) throw ContractError("plot: several csv files need a y column");
    for (const auto& p : csv_paths) {
      const auto t = read_csv(p);
      const std::size_t xc = x_column.empty() ? 0 : t.column(x_column);
      const std::size_t yc = t.column(y_column);
      labels.x_label = t.header[xc];
      series.push_back({std::filesystem::path(p).parent_path().filename().string() + "/" +
                            std::filesystem::path(p).stem().string(),
                        t.values(xc), t.values(yc)});
    }
    labels.y_label = y_column;
    labels.title = y_column;
  }
  std::ofstream f(svg_path, std::ios::trunc);
  if (!f) throw IoError(svg_path + ": cannot open for writing");
  f << render_line_chart(series, labels);
  if (!f) throw IoError(svg_path + ": write failed");
}

}  // namespace moebal
