#pragma once

// In-memory synthetic cohorts with fixture knowledge attached, as the CLI
// would produce them through synth-data, refine-reports and pbk-gen.

#include <memory>
#include <vector>

#include "kemm/knowledge/backend.hpp"
#include "kemm/pipeline.hpp"
#include "kemm/synthetic.hpp"
#include "kemm/train.hpp"

namespace testing_cohorts {

struct Built {
  kemm::train::Cohort cohort;
  std::vector<double> latent_risk;  // aligned with cohort.records
};

inline Built build(const kemm::synthetic::SyntheticConfig& cfg) {
  auto syn = kemm::synthetic::generate_cohort(cfg);
  kemm::knowledge::KnowledgeClient client(std::make_shared<kemm::knowledge::FixtureBackend>());
  kemm::pipeline::attach_knowledge(syn.records, client);
  Built b{kemm::train::Cohort::from_records(std::move(syn.manifest), std::move(syn.gene_table),
                                            std::move(syn.records)),
          std::move(syn.latent_risk)};
  return b;
}

inline kemm::synthetic::SyntheticConfig small(int n, std::uint64_t seed = 1) {
  kemm::synthetic::SyntheticConfig cfg;
  cfg.num_patients = n;
  cfg.seed = seed;
  return cfg;
}

}  // namespace testing_cohorts
