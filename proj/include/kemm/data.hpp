#pragma once

// Patient records, the gene-name embedding table, cohort manifests and fold
// assignment.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include "json.hpp"
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "kemm/container.hpp"
#include "kemm/random.hpp"
#include "kemm/survival.hpp"

namespace kemm::data {

namespace fs = std::filesystem;
using survival::BinScheme;
using survival::SurvivalLabel;

using FeatureMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct GeneValue {
  std::string name;
  float expression = 0.0f;
  friend bool operator==(const GeneValue&, const GeneValue&) = default;
};

struct PatientRecord {
  std::string patient_id;
  std::string cancer_type;
  FeatureMatrix patch_features;  // n_p x d_patch
  std::vector<GeneValue> genes;
  std::string report_text;
  std::string pbk_pathology;
  std::string pbk_genomic;
  SurvivalLabel label;  // attached from the manifest, not stored in the feature file

  int num_patches() const { return static_cast<int>(patch_features.rows()); }
  int patch_dim() const { return static_cast<int>(patch_features.cols()); }
};

// ---------------------------------------------------------------------------
// Patient feature files

inline std::vector<char> encode_patient(const PatientRecord& rec) {
  io::ByteWriter w;
  w.header(io::ContainerKind::patient);
  w.str(rec.patient_id);
  w.str(rec.cancer_type);
  w.u32(io::ByteWriter::checked_size(static_cast<std::size_t>(rec.patch_features.rows())));
  w.u32(io::ByteWriter::checked_size(static_cast<std::size_t>(rec.patch_features.cols())));
  for (Eigen::Index i = 0; i < rec.patch_features.size(); ++i) w.f32(rec.patch_features.data()[i]);
  w.u32(io::ByteWriter::checked_size(rec.genes.size()));
  for (const auto& g : rec.genes) {
    w.str(g.name);
    w.f32(g.expression);
  }
  w.str(rec.report_text);
  w.str(rec.pbk_pathology);
  w.str(rec.pbk_genomic);
  return w.bytes();
}

/// Parses a feature file without any gene filtering.
inline PatientRecord decode_patient(std::vector<char> bytes, const std::string& origin = "<memory>") {
  io::ByteReader r(std::move(bytes), origin);
  r.header(io::ContainerKind::patient);
  PatientRecord rec;
  rec.patient_id = r.str();
  rec.cancer_type = r.str();
  const std::uint32_t rows = r.u32();
  const std::uint32_t cols = r.u32();
  if (rows == 0 || cols == 0) r.fail("empty patch feature matrix");
  if (static_cast<std::uint64_t>(rows) * cols > (1ull << 28)) r.fail("implausible patch matrix size");
  rec.patch_features.resize(rows, cols);
  for (Eigen::Index i = 0; i < rec.patch_features.size(); ++i) {
    const float v = r.f32();
    if (!std::isfinite(v)) r.fail("non-finite value in patch features");
    rec.patch_features.data()[i] = v;
  }
  const std::uint32_t n_genes = r.u32();
  std::set<std::string> seen;
  for (std::uint32_t i = 0; i < n_genes; ++i) {
    GeneValue g;
    g.name = r.str();
    g.expression = r.f32();
    if (!std::isfinite(g.expression)) r.fail("non-finite expression for gene " + g.name);
    if (!seen.insert(g.name).second) r.fail("duplicate gene name " + g.name);
    rec.genes.push_back(std::move(g));
  }
  rec.report_text = r.str();
  rec.pbk_pathology = r.str();
  rec.pbk_genomic = r.str();
  r.expect_end();
  return rec;
}

inline void write_patient_file(const fs::path& path, const PatientRecord& rec) {
  io::write_file(path, encode_patient(rec));
}

inline PatientRecord read_patient_file(const fs::path& path) {
  return decode_patient(io::read_file(path), path.string());
}

// ---------------------------------------------------------------------------
// Gene embedding table

class GeneEmbeddingTable {
 public:
  GeneEmbeddingTable() = default;
  explicit GeneEmbeddingTable(int dim) : dim_(dim) {}

  int dim() const { return dim_; }
  std::size_t size() const { return rows_.size(); }
  bool contains(const std::string& name) const { return rows_.count(name) != 0; }

  const std::vector<float>& at(const std::string& name) const {
    auto it = rows_.find(name);
    if (it == rows_.end()) throw std::out_of_range("gene not in embedding table: " + name);
    return it->second;
  }

  void insert(const std::string& name, std::vector<float> vec) {
    if (dim_ == 0) dim_ = static_cast<int>(vec.size());
    if (static_cast<int>(vec.size()) != dim_)
      throw std::invalid_argument("gene table: embedding width mismatch for " + name);
    rows_[name] = std::move(vec);
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : rows_) out.push_back(k);
    return out;
  }

  /// Seeded unit-norm Gaussian vectors, one per name.
  static GeneEmbeddingTable random(const std::vector<std::string>& names, int dim, std::uint64_t seed) {
    if (dim <= 0) throw std::invalid_argument("gene table: dim must be positive");
    GeneEmbeddingTable table(dim);
    for (const auto& name : names) {
      Rng rng(mix_seed(seed, fnv1a64(name)));
      std::vector<double> v(dim);
      double norm = 0.0;
      for (auto& x : v) {
        x = rng.normal();
        norm += x * x;
      }
      norm = std::sqrt(norm);
      std::vector<float> f(dim);
      for (int k = 0; k < dim; ++k) f[k] = static_cast<float>(v[k] / norm);
      table.insert(name, std::move(f));
    }
    return table;
  }

  void save(const fs::path& path) const {
    std::vector<io::NamedTensor> tensors;
    for (const auto& [name, vec] : rows_)
      tensors.push_back({name, {static_cast<std::uint32_t>(dim_)}, vec});
    io::save_tensor_archive(path, tensors);
  }

  static GeneEmbeddingTable load(const fs::path& path) {
    GeneEmbeddingTable table;
    for (auto& t : io::load_tensor_archive(path)) {
      if (t.dims.size() != 1) throw io::FormatError(path.string() + ": gene embedding must be rank 1");
      for (float v : t.data)
        if (!std::isfinite(v)) throw io::FormatError(path.string() + ": non-finite embedding for " + t.name);
      table.insert(t.name, std::move(t.data));
    }
    if (table.size() == 0) throw io::FormatError(path.string() + ": empty gene table");
    return table;
  }

  friend bool operator==(const GeneEmbeddingTable&, const GeneEmbeddingTable&) = default;

 private:
  int dim_ = 0;
  std::map<std::string, std::vector<float>> rows_;
};

/// Keeps only genes present in the table, in their original order.
inline PatientRecord filter_genes(PatientRecord rec, const GeneEmbeddingTable& table,
                                  const std::string& origin = "<memory>") {
  std::vector<GeneValue> kept;
  for (auto& g : rec.genes)
    if (table.contains(g.name)) kept.push_back(std::move(g));
  if (kept.empty()) throw std::runtime_error(origin + ": zero surviving genes");
  rec.genes = std::move(kept);
  return rec;
}

/// Reads a feature file and filters its genes against the table.
inline PatientRecord load_patient(const fs::path& path, const GeneEmbeddingTable& table) {
  return filter_genes(read_patient_file(path), table, path.string());
}

// ---------------------------------------------------------------------------
// Cohort manifest (JSON lines: one header object, then one object per patient)

inline constexpr const char* kManifestSchema = "kemm.manifest";
inline constexpr int kManifestVersion = 1;
inline constexpr int kDefaultFolds = 5;

struct ManifestEntry {
  std::string patient_id;
  std::string path;  // relative to the manifest directory
  SurvivalLabel label;
  int fold = 0;
  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

struct CohortManifest {
  std::vector<ManifestEntry> entries;
  int num_bins = 4;
  int num_folds = kDefaultFolds;
  BinScheme bin_scheme;
  std::string gene_table;  // relative path, may be empty
  fs::path base_dir;       // directory holding the manifest; not serialized

  fs::path resolve(const std::string& relative) const { return base_dir / relative; }
  std::vector<int> fold_members(int fold) const {
    std::vector<int> out;
    for (int i = 0; i < static_cast<int>(entries.size()); ++i)
      if (entries[i].fold == fold) out.push_back(i);
    return out;
  }
  friend bool operator==(const CohortManifest& a, const CohortManifest& b) {
    return a.entries == b.entries && a.num_bins == b.num_bins && a.num_folds == b.num_folds &&
           a.bin_scheme == b.bin_scheme && a.gene_table == b.gene_table;
  }
};

inline std::string format_manifest(const CohortManifest& m) {
  std::ostringstream out;
  nlohmann::json header = {{"schema", kManifestSchema},
                           {"version", kManifestVersion},
                           {"num_bins", m.num_bins},
                           {"num_folds", m.num_folds},
                           {"bin_edges", m.bin_scheme.edges},
                           {"gene_table", m.gene_table}};
  out << header.dump() << '\n';
  for (const auto& e : m.entries) {
    nlohmann::json row = {{"patient_id", e.patient_id},   {"path", e.path},
                          {"raw_time", e.label.raw_time}, {"censorship", e.label.censorship},
                          {"event_bin", e.label.event_bin}, {"fold", e.fold}};
    out << row.dump() << '\n';
  }
  return out.str();
}

inline void write_manifest(const fs::path& path, const CohortManifest& m) {
  const std::string text = format_manifest(m);
  io::write_file(path, std::vector<char>(text.begin(), text.end()));
}

struct ManifestOptions {
  bool check_files = true;  // open every feature file and cross-check dims
};

inline CohortManifest parse_manifest(const std::string& text, const fs::path& base_dir,
                                     const std::string& origin, ManifestOptions opts = {}) {
  auto fail = [&](int line, const std::string& what) -> void {
    throw std::runtime_error(origin + (line > 0 ? ":" + std::to_string(line) : std::string()) + ": " + what);
  };
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  CohortManifest m;
  m.base_dir = base_dir;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      fail(line_no, std::string("malformed JSON: ") + e.what());
    }
    try {
      if (!have_header) {
        if (j.value("schema", "") != kManifestSchema) fail(line_no, "not a kemm manifest");
        if (j.at("version").get<int>() != kManifestVersion)
          fail(line_no, "schema version mismatch (expected " + std::to_string(kManifestVersion) + ")");
        m.num_bins = j.at("num_bins").get<int>();
        m.num_folds = j.value("num_folds", kDefaultFolds);
        m.bin_scheme.edges = j.at("bin_edges").get<std::vector<double>>();
        m.gene_table = j.value("gene_table", "");
        if (m.num_bins < 1) fail(line_no, "num_bins must be >= 1");
        if (m.num_folds < 2) fail(line_no, "num_folds must be >= 2");
        if (m.bin_scheme.num_bins() != m.num_bins) fail(line_no, "bin_edges inconsistent with num_bins");
        if (!std::is_sorted(m.bin_scheme.edges.begin(), m.bin_scheme.edges.end()) ||
            std::adjacent_find(m.bin_scheme.edges.begin(), m.bin_scheme.edges.end()) !=
                m.bin_scheme.edges.end())
          fail(line_no, "bin_edges must be strictly increasing");
        have_header = true;
        continue;
      }
      ManifestEntry e;
      e.patient_id = j.at("patient_id").get<std::string>();
      e.path = j.at("path").get<std::string>();
      e.label.raw_time = j.at("raw_time").get<double>();
      e.label.censorship = j.at("censorship").get<int>();
      e.label.event_bin = j.at("event_bin").get<int>();
      e.fold = j.at("fold").get<int>();
      m.entries.push_back(std::move(e));
    } catch (const nlohmann::json::exception& ex) {
      fail(line_no, std::string("bad field: ") + ex.what());
    } catch (const std::invalid_argument& ex) {
      fail(line_no, ex.what());
    }
  }
  if (!have_header) fail(0, "empty cohort (no manifest header)");
  if (m.entries.empty()) fail(0, "empty cohort");

  std::set<std::string> ids;
  int expected_dim = -1;
  for (std::size_t i = 0; i < m.entries.size(); ++i) {
    const auto& e = m.entries[i];
    const std::string where = "patient " + e.patient_id;
    if (!ids.insert(e.patient_id).second) fail(0, "duplicate patient_id " + e.patient_id);
    if (e.fold < 0 || e.fold >= m.num_folds) fail(0, where + ": fold " + std::to_string(e.fold) + " out of range");
    try {
      survival::validate_label(e.label, m.num_bins);
    } catch (const std::exception& ex) {
      fail(0, where + ": " + ex.what());
    }
    if (m.bin_scheme.assign(e.label.raw_time) != e.label.event_bin)
      fail(0, where + ": event_bin disagrees with bin_edges");
    if (opts.check_files) {
      const fs::path p = m.resolve(e.path);
      if (!fs::exists(p)) fail(0, where + ": missing feature file " + p.string());
      const PatientRecord rec = read_patient_file(p);
      if (rec.patient_id != e.patient_id) fail(0, where + ": feature file holds " + rec.patient_id);
      if (expected_dim < 0) expected_dim = rec.patch_dim();
      if (rec.patch_dim() != expected_dim) fail(0, where + ": patch dimension mismatch");
    }
  }
  if (opts.check_files && !m.gene_table.empty() && !fs::exists(m.resolve(m.gene_table)))
    fail(0, "missing gene table " + m.gene_table);
  return m;
}

inline CohortManifest load_manifest(const fs::path& path, ManifestOptions opts = {}) {
  if (!fs::exists(path)) throw std::runtime_error("manifest not found: " + path.string());
  const auto bytes = io::read_file(path);
  return parse_manifest(std::string(bytes.begin(), bytes.end()), path.parent_path(), path.string(), opts);
}

// ---------------------------------------------------------------------------
// Folds

/// Seeded shuffle, then round-robin assignment: fold sizes differ by <= 1.
inline std::vector<int> make_folds(const std::vector<std::string>& patient_ids, std::uint64_t seed,
                                   int num_folds = kDefaultFolds) {
  if (num_folds < 2) throw std::invalid_argument("make_folds: need at least 2 folds");
  if (static_cast<int>(patient_ids.size()) < num_folds)
    throw std::invalid_argument("make_folds: fewer patients (" + std::to_string(patient_ids.size()) +
                                ") than folds (" + std::to_string(num_folds) + ")");
  std::vector<int> order(patient_ids.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  Rng rng(mix_seed(seed, 0x666f6c64ull));
  rng.shuffle(order);
  std::vector<int> folds(patient_ids.size());
  for (std::size_t k = 0; k < order.size(); ++k) folds[order[k]] = static_cast<int>(k % num_folds);
  return folds;
}

/// Loads every record of the manifest, filters genes and attaches labels.
inline std::vector<PatientRecord> load_cohort(const CohortManifest& m, const GeneEmbeddingTable& table) {
  std::vector<PatientRecord> out;
  out.reserve(m.entries.size());
  for (const auto& e : m.entries) {
    PatientRecord rec = load_patient(m.resolve(e.path), table);
    rec.label = e.label;
    out.push_back(std::move(rec));
  }
  return out;
}

}  // namespace kemm::data
