#pragma once

// Desk-scale synthetic cohorts with a planted risk model.
//
// Every patient draws a latent risk z ~ N(0,1). Event times are exponential
// with rate exp(hazard_coupling * z); censoring times are independent
// exponentials whose rate is solved for the target censoring fraction. z
// leaks into each modality with its own strength:
//   patches  - a fixed fraction of "tumor" patches carries a marker pattern
//              plus patch_signal * z on a designated feature block
//   genes    - designated genes get gene_signal * z added to expression
//   report   - each keyword slot holds a high-risk word with probability
//              logistic(text_signal * 1.7 * z), else its low-risk partner

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "kemm/data.hpp"
#include "kemm/random.hpp"
#include "kemm/survival.hpp"

namespace kemm::synthetic {

namespace fs = std::filesystem;

struct SyntheticConfig {
  int num_patients = 500;
  int min_patches = 12;
  int max_patches = 20;
  int d_patch = 32;
  int gene_vocabulary = 24;
  int genes_outside_table = 4;  // emitted in records, absent from the table
  int d_gene = 16;
  int num_bins = 4;
  int num_folds = 5;
  std::string cancer_type = "BRCA";
  double hazard_coupling = 3.0;
  double patch_signal = 1.0;
  double gene_signal = 1.0;
  double text_signal = 1.0;
  double censoring_fraction = 0.4;
  double tumor_fraction = 0.3;
  int signal_patch_features = 4;
  int signal_genes = 6;
  int keyword_slots = 8;
  std::uint64_t seed = 1;

  void validate() const {
    auto bad = [](const std::string& what) { throw std::invalid_argument("synthetic config: " + what); };
    if (num_bins < 1) bad("T must be >= 1");
    if (num_patients < std::max(num_folds, 2)) bad("too few patients");
    if (gene_vocabulary <= genes_outside_table) bad("empty gene vocabulary");
    if (min_patches < 1 || max_patches < min_patches) bad("bad patch count range");
    if (d_patch < signal_patch_features + 4) bad("d_patch too small for the planted blocks");
    if (d_gene < 1) bad("d_gene must be positive");
    if (signal_genes > gene_vocabulary - genes_outside_table) bad("more signal genes than table genes");
    if (!(censoring_fraction >= 0.0 && censoring_fraction < 1.0)) bad("censoring fraction outside [0,1)");
    if (!(tumor_fraction > 0.0 && tumor_fraction <= 1.0)) bad("tumor fraction outside (0,1]");
    if (keyword_slots < 0) bad("negative keyword slots");
  }
};

struct SyntheticCohort {
  data::CohortManifest manifest;
  std::vector<data::PatientRecord> records;  // with labels attached
  data::GeneEmbeddingTable gene_table;
  std::vector<double> latent_risk;  // ground-truth z, aligned with manifest entries
};

inline constexpr std::array<std::string_view, 8> kHighRiskWords{
    "necrosis", "lymphovascular", "pleomorphic", "mitoses", "infiltrative", "anaplastic", "budding", "perineural"};
inline constexpr std::array<std::string_view, 8> kLowRiskWords{
    "tubular", "circumscribed", "lymphocytic", "indolent", "differentiated", "bland", "encapsulated", "quiescent"};

inline std::string gene_name(int i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "GENE%03d", i);
  return buf;
}

/// Censoring rate c such that E_z[c / (c + exp(beta z))] = target, z ~ N(0,1).
inline double solve_censoring_rate(double beta, double target) {
  if (target <= 0.0) return 0.0;
  auto fraction = [beta](double c) {
    double acc = 0.0, mass = 0.0;
    for (int k = -800; k <= 800; ++k) {
      const double z = k * 0.01;
      const double w = std::exp(-0.5 * z * z);
      acc += w * c / (c + std::exp(beta * z));
      mass += w;
    }
    return acc / mass;
  };
  double lo = 1e-9, hi = 1e9;
  for (int it = 0; it < 200; ++it) {
    const double mid = std::sqrt(lo * hi);
    (fraction(mid) < target ? lo : hi) = mid;
  }
  return std::sqrt(lo * hi);
}

namespace detail {

inline std::string raw_report(const SyntheticConfig& cfg, double z, Rng& rng) {
  static constexpr std::array<std::string_view, 4> kTypes{"ductal", "lobular", "mixed", "mucinous"};
  static constexpr std::array<std::string_view, 3> kMargins{"negative", "close", "clear"};
  static constexpr std::array<std::string_view, 4> kMarkers{"estrogen receptor", "progesterone receptor", "ki67",
                                                            "her2"};
  const double p_high = survival::logistic(cfg.text_signal * 1.7 * z);
  std::ostringstream comment;
  for (int s = 0; s < cfg.keyword_slots; ++s) {
    const auto k = static_cast<std::size_t>(s) % kHighRiskWords.size();
    comment << (rng.uniform() < p_high ? kHighRiskWords[k] : kLowRiskWords[k]) << ' ';
  }
  std::vector<std::string> sections;
  sections.push_back("DIAGNOSIS: invasive carcinoma, " + cfg.cancer_type + " primary.");
  sections.push_back("HISTOLOGIC TYPE: " + std::string(kTypes[rng.below(kTypes.size())]) + " pattern.");
  sections.push_back("TUMOR SIZE: " + std::to_string(1 + rng.below(5)) + " cm.");
  sections.push_back("MARGINS: " + std::string(kMargins[rng.below(kMargins.size())]) + ".");
  sections.push_back("LYMPH NODES: " + std::to_string(rng.below(4)) + " positive.");
  sections.push_back("IMMUNOHISTOCHEMISTRY: " + std::string(kMarkers[rng.below(kMarkers.size())]) + " stained.");
  sections.push_back("COMMENT: " + comment.str());
  rng.shuffle(sections);
  std::string out;
  for (const auto& s : sections) {
    out += s;
    out += rng.uniform() < 0.5 ? "\n\n  " : "  ";
  }
  return out;
}

}  // namespace detail

/// Builds the cohort in memory. Reports are raw (shuffled sections, ragged
/// whitespace) and PBK fields are empty; the knowledge pipeline fills both.
inline SyntheticCohort generate_cohort(const SyntheticConfig& cfg) {
  cfg.validate();
  Rng rng(mix_seed(cfg.seed, 0x73796e74ull));
  SyntheticCohort out;

  std::vector<std::string> vocab;
  for (int g = 0; g < cfg.gene_vocabulary; ++g) vocab.push_back(gene_name(g));
  const std::vector<std::string> table_names(vocab.begin(), vocab.end() - cfg.genes_outside_table);
  out.gene_table = data::GeneEmbeddingTable::random(table_names, cfg.d_gene, mix_seed(cfg.seed, 0x67656e65ull));

  const double censor_rate = solve_censoring_rate(cfg.hazard_coupling, cfg.censoring_fraction);
  const int marker_begin = cfg.signal_patch_features;

  std::vector<std::string> ids;
  for (int i = 0; i < cfg.num_patients; ++i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "SYN%05d", i);
    ids.emplace_back(buf);

    const double z = rng.normal();
    out.latent_risk.push_back(z);

    data::PatientRecord rec;
    rec.patient_id = ids.back();
    rec.cancer_type = cfg.cancer_type;

    const int n_p = cfg.min_patches + static_cast<int>(rng.below(cfg.max_patches - cfg.min_patches + 1));
    const int n_tumor = std::max(1, static_cast<int>(std::lround(cfg.tumor_fraction * n_p)));
    rec.patch_features.resize(n_p, cfg.d_patch);
    for (int r = 0; r < n_p; ++r) {
      for (int c = 0; c < cfg.d_patch; ++c) rec.patch_features(r, c) = static_cast<float>(rng.normal());
      if (r < n_tumor) {
        for (int c = marker_begin; c < marker_begin + 4; ++c) rec.patch_features(r, c) += 2.0f;
        for (int c = 0; c < cfg.signal_patch_features; ++c)
          rec.patch_features(r, c) += static_cast<float>(cfg.patch_signal * z);
      }
    }
    // tumor patches are scattered through the bag
    std::vector<int> order(n_p);
    for (int r = 0; r < n_p; ++r) order[r] = r;
    rng.shuffle(order);
    data::FeatureMatrix shuffled(n_p, cfg.d_patch);
    for (int r = 0; r < n_p; ++r) shuffled.row(r) = rec.patch_features.row(order[r]);
    rec.patch_features = std::move(shuffled);

    for (int g = 0; g < cfg.gene_vocabulary; ++g) {
      double v = rng.normal();
      if (g < cfg.signal_genes) v += cfg.gene_signal * z;
      rec.genes.push_back({vocab[g], static_cast<float>(v)});
    }

    rec.report_text = detail::raw_report(cfg, z, rng);

    const double event = rng.exponential(std::exp(cfg.hazard_coupling * z));
    const double censor = censor_rate > 0.0 ? rng.exponential(censor_rate) : INFINITY;
    rec.label.raw_time = std::min(event, censor);
    rec.label.censorship = censor < event ? 1 : 0;
    out.records.push_back(std::move(rec));
  }

  std::vector<double> times;
  std::vector<int> cens;
  for (const auto& r : out.records) {
    times.push_back(r.label.raw_time);
    cens.push_back(r.label.censorship);
  }
  auto& m = out.manifest;
  m.num_bins = cfg.num_bins;
  m.num_folds = cfg.num_folds;
  m.bin_scheme = survival::bin_times(times, cens, cfg.num_bins);
  m.gene_table = "gene_table.kta";
  const auto folds = data::make_folds(ids, cfg.seed, cfg.num_folds);
  for (std::size_t i = 0; i < out.records.size(); ++i) {
    auto& r = out.records[i];
    r.label.event_bin = m.bin_scheme.assign(r.label.raw_time);
    m.entries.push_back({r.patient_id, "patients/" + r.patient_id + ".kpt", r.label, folds[i]});
  }
  return out;
}

/// Writes manifest.jsonl, gene_table.kta, patients/*.kpt and
/// ground_truth.tsv (patient_id, z) under dir.
inline void write_cohort(const SyntheticCohort& cohort, const fs::path& dir) {
  fs::create_directories(dir / "patients");
  cohort.gene_table.save(dir / cohort.manifest.gene_table);
  for (std::size_t i = 0; i < cohort.records.size(); ++i)
    data::write_patient_file(dir / cohort.manifest.entries[i].path, cohort.records[i]);
  data::write_manifest(dir / "manifest.jsonl", cohort.manifest);
  std::ostringstream truth;
  truth << "patient_id\tlatent_risk\n";
  char buf[64];
  for (std::size_t i = 0; i < cohort.records.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g", cohort.latent_risk[i]);
    truth << cohort.records[i].patient_id << '\t' << buf << '\n';
  }
  const std::string text = truth.str();
  io::write_file(dir / "ground_truth.tsv", std::vector<char>(text.begin(), text.end()));
}

}  // namespace kemm::synthetic
