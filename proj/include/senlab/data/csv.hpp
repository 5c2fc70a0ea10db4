#pragma once

// Numeric CSV tables with a header row (housing-style regression data).

#include <cerrno>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "senlab/data/dataset.hpp"
#include "senlab/hash.hpp"
#include "senlab/log.hpp"

namespace senlab::data {

class CsvError : public DatasetError {
 public:
  using DatasetError::DatasetError;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(trim(cell));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline double parse_number(const std::string& cell, std::size_t row, const std::string& col) {
  if (cell.empty()) throw CsvError("empty cell at row " + std::to_string(row) + ", column " + col);
  errno = 0;
  char* end = nullptr;
  const double v = std::strtod(cell.c_str(), &end);
  if (end != cell.c_str() + cell.size() || errno == ERANGE || !std::isfinite(v)) {
    throw CsvError("non-numeric cell '" + cell + "' at row " + std::to_string(row) +
                   ", column " + col);
  }
  return v;
}

}  // namespace detail

/// Raw (unstandardized) features and an [N x 1] target taken from
/// `target_column`. Every other column is a feature.
inline Dataset load_csv_regression(const std::filesystem::path& path, const std::string& target_column) {
  std::ifstream in(path);
  if (!in) throw CsvError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw CsvError(path.string() + ": missing header row");
  const auto header = detail::split_line(line);
  std::size_t target = header.size();
  for (std::size_t j = 0; j < header.size(); ++j)
    if (header[j] == target_column) target = j;
  if (target == header.size()) throw CsvError("column '" + target_column + "' not in " + path.string());
  if (header.size() < 2) throw CsvError("need at least one feature column");

  std::vector<double> xs, ys;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    if (detail::trim(line).empty()) continue;
    const auto cells = detail::split_line(line);
    if (cells.size() != header.size()) {
      throw CsvError("row " + std::to_string(n + 1) + " has " + std::to_string(cells.size()) +
                     " cells, header has " + std::to_string(header.size()));
    }
    for (std::size_t j = 0; j < cells.size(); ++j) {
      const double v = detail::parse_number(cells[j], n + 1, header[j]);
      (j == target ? ys : xs).push_back(v);
    }
    ++n;
  }
  if (n == 0) throw CsvError(path.string() + " has no data rows");
  const std::size_t d = header.size() - 1;
  return Dataset{Tensor(Shape{n, d}, std::move(xs)), Tensor(Shape{n, 1}, std::move(ys)),
                 Task::Regression, SplitTag::Full};
}

/// Writes features then the target column, with full round-trip precision.
inline void write_csv_regression(const std::filesystem::path& path, const Dataset& data,
                                 const std::string& target_column = "target") {
  if (data.inputs.rank() != 2 || data.output_dim() != 1) {
    throw CsvError("write_csv_regression expects [N x D] features and one target");
  }
  std::ofstream out(path);
  for (std::size_t j = 0; j < data.input_dim(); ++j) out << 'x' << j << ',';
  out << target_column << '\n';
  out << std::setprecision(17);
  for (std::size_t i = 0; i < data.size(); ++i) {
    for (std::size_t j = 0; j < data.input_dim(); ++j) out << data.inputs(i, j) << ',';
    out << data.targets(i, 0) << '\n';
  }
  if (!out) throw CsvError("cannot write " + path.string());
}

/// Train/test split with features standardized on the training rows.
struct PreparedRegression {
  Dataset train;
  Dataset test;
  Standardizer standardizer;
};

inline PreparedRegression prepare_regression(const Dataset& data, const SplitSpec& spec) {
  auto [tr, te] = split(data, spec);
  PreparedRegression out{std::move(tr), std::move(te), {}};
  out.standardizer = Standardizer::fit(out.train.inputs);
  for (std::size_t j : out.standardizer.constant_columns) {
    log::warn("feature column " + std::to_string(j) + " is constant on the training split; standardized to zero");
  }
  out.train.inputs = out.standardizer.apply(out.train.inputs);
  out.test.inputs = out.standardizer.apply(out.test.inputs);
  return out;
}

inline std::uint64_t file_checksum(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetError("cannot open " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return fnv1a64(bytes.data(), bytes.size());
}

}  // namespace senlab::data
