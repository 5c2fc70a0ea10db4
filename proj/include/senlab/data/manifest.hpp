#pragma once

#include <nlohmann/json.hpp>

#include <string>

#include "senlab/data/csv.hpp"
#include "senlab/data/idx.hpp"

namespace senlab::data {

/// Where a dataset comes from and how it is split. kind: "synthetic",
/// "idx", "csv" or "synthetic-regression".
struct DatasetManifest {
  std::string kind = "synthetic";
  std::string path;         // images file (idx) or table (csv)
  std::string labels_path;  // idx only
  std::string target_column = "target";
  std::size_t n = 1000;        // synthetic sizes
  std::size_t d = 32;
  std::size_t k = 4;
  double margin = 3.0;
  double noise = 0.1;
  SplitSpec split;
  std::string checksum;  // filled for file-backed data

  nlohmann::json to_json() const {
    nlohmann::json j = {{"kind", kind}, {"path", path},   {"labels_path", labels_path},
                        {"target_column", target_column}, {"n", n},  {"d", d}, {"k", k},
                        {"margin", margin}, {"noise", noise}, {"checksum", checksum}};
    j["split"] = {{"train_fraction", split.train_fraction}, {"seed", split.seed}};
    j["split"]["subset_size"] = split.subset_size ? nlohmann::json(*split.subset_size) : nlohmann::json();
    return j;
  }

  static DatasetManifest from_json(const nlohmann::json& j) {
    DatasetManifest m;
    m.kind = j.value("kind", m.kind);
    m.path = j.value("path", m.path);
    m.labels_path = j.value("labels_path", m.labels_path);
    m.target_column = j.value("target_column", m.target_column);
    m.n = j.value("n", m.n);
    m.d = j.value("d", m.d);
    m.k = j.value("k", m.k);
    m.margin = j.value("margin", m.margin);
    m.noise = j.value("noise", m.noise);
    m.checksum = j.value("checksum", m.checksum);
    if (j.contains("split")) {
      const auto& s = j.at("split");
      m.split.train_fraction = s.value("train_fraction", m.split.train_fraction);
      m.split.seed = s.value("seed", m.split.seed);
      if (s.contains("subset_size") && !s.at("subset_size").is_null()) {
        m.split.subset_size = s.at("subset_size").get<std::size_t>();
      }
    }
    return m;
  }
};

/// Materializes the full dataset a manifest describes. For file-backed
/// kinds the checksum is verified when present and recorded when absent.
inline Dataset load_manifest(DatasetManifest& m, std::uint64_t seed) {
  auto check = [&](const std::filesystem::path& p) {
    const std::string got = hex64(file_checksum(p));
    if (!m.checksum.empty() && m.checksum != got) {
      throw DatasetError("checksum mismatch for " + p.string() + ": manifest " + m.checksum +
                         ", file " + got);
    }
    m.checksum = got;
  };
  if (m.kind == "synthetic") return synth_classification(m.d, m.k, m.n, m.margin, seed);
  if (m.kind == "synthetic-regression") return synth_regression(m.d, m.n, m.noise, seed);
  if (m.kind == "idx") {
    check(m.path);
    Dataset d = load_idx(m.path, m.labels_path);
    const std::size_t n = d.size(), dim = d.input_dim();
    d.inputs = d.inputs.reshaped(Shape{n, dim});
    return d;
  }
  if (m.kind == "csv") {
    check(m.path);
    return load_csv_regression(m.path, m.target_column);
  }
  throw DatasetError("unknown dataset kind '" + m.kind + "'");
}

}  // namespace senlab::data
