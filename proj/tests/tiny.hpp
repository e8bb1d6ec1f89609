#pragma once

// The tiny instance used by the model gradient checks:
// n_p = 4 patches, n_G = 5 genes, n_K = 3 knowledge tokens, d = 4, T = 4.

#include <string>
#include <vector>

#include "kemm/model.hpp"

namespace tiny {

using namespace kemm;

inline encoders::Dimensions tiny_dims() {
  encoders::Dimensions d;
  d.d_patch = 6;
  d.d_gene = 4;
  d.d_knowledge = 5;
  d.d_model = 4;
  d.pathology_hidden = 5;
  d.value_hidden = 3;
  d.gene_layers = 1;
  d.gene_heads = 2;
  d.gene_ff_mult = 2;
  return d;
}

inline ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.dims = tiny_dims();
  cfg.num_bins = 4;
  cfg.init_seed = 5;
  return cfg;
}

/// n_p = 4 patches, n_G = 5 genes, n_K = 3 knowledge tokens.
struct TinyPatient {
  data::PatientRecord record;
  data::GeneEmbeddingTable table;

  explicit TinyPatient(std::uint64_t seed = 1) {
    Rng rng(seed);
    record.patient_id = "P1";
    record.cancer_type = "BRCA";
    record.patch_features.resize(4, 6);
    for (Eigen::Index i = 0; i < record.patch_features.size(); ++i)
      record.patch_features.data()[i] = static_cast<float>(rng.normal());
    std::vector<std::string> names;
    for (int g = 0; g < 5; ++g) {
      names.push_back("G" + std::to_string(g));
      record.genes.push_back({names.back(), static_cast<float>(rng.normal())});
    }
    table = data::GeneEmbeddingTable::random(names, 4, 9);
    record.report_text = "necrosis mitoses";
    record.pbk_pathology = "grade";
    record.pbk_genomic = "";
    record.label.event_bin = 1;
    record.label.censorship = 0;
    record.label.raw_time = 3.0;
  }
};

}  // namespace tiny
