#pragma once

// Result tables written as CSV. The first column of every row is the config
// hash; tables with different hashes refuse to merge.

#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "senlab/data/csv.hpp"
#include "senlab/tensor.hpp"

namespace senlab::harness {

class TableError : public Error {
 public:
  using Error::Error;
};

/// Shortest text that parses back to the same double.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

using Cell = std::variant<std::string, double, std::int64_t, bool>;

inline std::string format_cell(const Cell& c) {
  if (const auto* s = std::get_if<std::string>(&c)) return *s;
  if (const auto* d = std::get_if<double>(&c)) return format_double(*d);
  if (const auto* i = std::get_if<std::int64_t>(&c)) return std::to_string(*i);
  return std::get<bool>(c) ? "1" : "0";
}

/// Rows keep insertion order. Columns are fixed by the first row added or
/// by the constructor.
class Table {
 public:
  Table() = default;
  Table(std::string hash, std::vector<std::string> columns)
      : hash_(std::move(hash)), columns_(std::move(columns)) {}

  const std::string& hash() const { return hash_; }
  const std::vector<std::string>& columns() const { return columns_; }
  const std::vector<std::vector<std::string>>& rows() const { return rows_; }
  std::size_t size() const { return rows_.size(); }

  void add(const std::vector<std::pair<std::string, Cell>>& row) {
    if (columns_.empty()) {
      for (const auto& [k, v] : row) columns_.push_back(k);
    }
    if (row.size() != columns_.size()) throw TableError("row has the wrong number of columns");
    std::vector<std::string> cells;
    cells.reserve(row.size());
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (row[i].first != columns_[i]) {
        throw TableError("column '" + row[i].first + "' where '" + columns_[i] + "' was expected");
      }
      cells.push_back(format_cell(row[i].second));
    }
    rows_.push_back(std::move(cells));
  }

  const std::string& at(std::size_t row, const std::string& column) const {
    for (std::size_t j = 0; j < columns_.size(); ++j)
      if (columns_[j] == column) return rows_.at(row)[j];
    throw TableError("no column '" + column + "'");
  }

  double number(std::size_t row, const std::string& column) const {
    const std::string& s = at(row, column);
    return data::detail::parse_number(s, row + 1, column);
  }

  std::string to_csv() const {
    std::ostringstream out;
    out << "config_hash";
    for (const auto& c : columns_) out << ',' << c;
    out << '\n';
    for (const auto& r : rows_) {
      out << hash_;
      for (const auto& c : r) out << ',' << c;
      out << '\n';
    }
    return out.str();
  }

  void write(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    out << to_csv();
    if (!out) throw TableError("cannot write " + path.string());
  }

  static Table read(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw TableError("cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw TableError(path.string() + " is empty");
    auto header = data::detail::split_line(line);
    if (header.empty() || header.front() != "config_hash") {
      throw TableError(path.string() + ": first column must be config_hash");
    }
    Table t;
    t.columns_.assign(header.begin() + 1, header.end());
    bool first = true;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      auto cells = data::detail::split_line(line);
      if (cells.size() != header.size()) throw TableError(path.string() + ": ragged row");
      if (first) t.hash_ = cells.front();
      else if (cells.front() != t.hash_) throw TableError(path.string() + ": rows carry different config hashes");
      first = false;
      t.rows_.emplace_back(cells.begin() + 1, cells.end());
    }
    return t;
  }

  /// Appends `other`'s rows. Both tables must come from the same config.
  void merge(const Table& other) {
    if (rows_.empty() && hash_.empty()) {
      *this = other;
      return;
    }
    if (other.hash_ != hash_) {
      throw TableError("refusing to merge rows with config hash " + other.hash_ + " into " + hash_);
    }
    if (other.columns_ != columns_) throw TableError("refusing to merge tables with different columns");
    rows_.insert(rows_.end(), other.rows_.begin(), other.rows_.end());
  }

 private:
  std::string hash_;
  std::vector<std::string> columns_;
  std::vector<std::vector<std::string>> rows_;
};

}  // namespace senlab::harness
