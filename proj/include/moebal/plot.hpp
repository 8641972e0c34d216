#pragma once

#include <string>
#include <vector>

namespace moebal {

/// Numeric CSV: '#' lines are comments, the first other line is the header.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;

  std::size_t column(const std::string& name) const;  // throws when absent
  std::vector<double> values(std::size_t col) const;
};

CsvTable read_csv(const std::string& path);
CsvTable parse_csv(const std::string& text, const std::string& origin = "<csv>");

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

struct ChartLabels {
  std::string title;
  std::string x_label;
  std::string y_label;
};

std::string render_line_chart(const std::vector<Series>& series, const ChartLabels& labels);

/// With a single CSV and no y column, every column after x becomes a series.
/// Otherwise the y column of each file is one series named after the file.
/// Axis labels come from the CSV headers.
void plot_csv(const std::vector<std::string>& csv_paths, const std::string& x_column,
              const std::string& y_column, const std::string& svg_path);

}  // namespace moebal
