#pragma once

// Glue between the knowledge pipeline and cohort files: backend selection,
// report refinement and PBK attachment.

#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "kemm/data.hpp"
#include "kemm/knowledge/backend.hpp"
#include "kemm/train.hpp"

namespace kemm::pipeline {

namespace fs = std::filesystem;

inline std::shared_ptr<knowledge::LlmBackend> make_backend(const train::LlmSelection& sel) {
  if (sel.backend == "fixture") return std::make_shared<knowledge::FixtureBackend>();
  if (sel.backend == "http") {
    knowledge::HttpBackendConfig cfg;
    if (!sel.url.empty()) cfg.url = sel.url;
    cfg.model = sel.model;
    return std::make_shared<knowledge::HttpBackend>(cfg);
  }
  throw std::invalid_argument("unknown LLM backend '" + sel.backend + "' (expected fixture or http)");
}

inline knowledge::KnowledgeClient make_client(const train::LlmSelection& sel) {
  return knowledge::KnowledgeClient(make_backend(sel), sel.cache_dir);
}

struct AttachOptions {
  bool refine_reports = true;
  bool generate_pbk = true;
};

/// Refines each report and fills both PBK fields (shared per cancer type).
inline void attach_knowledge(std::vector<data::PatientRecord>& records, knowledge::KnowledgeClient& client,
                             const AttachOptions& opts = {}) {
  std::map<std::string, knowledge::PbkTexts> pbk;
  for (auto& r : records) {
    if (opts.refine_reports) r.report_text = knowledge::refine_report(r.report_text, client);
    if (opts.generate_pbk) {
      auto it = pbk.find(r.cancer_type);
      if (it == pbk.end()) it = pbk.emplace(r.cancer_type, knowledge::generate_pbk(r.cancer_type, client)).first;
      r.pbk_pathology = it->second.pathology;
      r.pbk_genomic = it->second.genomic;
    }
  }
}

/// Rewrites every patient file listed in a manifest in place. Files are
/// read unfiltered, so genes outside the embedding table survive.
inline std::size_t attach_knowledge_to_files(const fs::path& manifest_path, knowledge::KnowledgeClient& client,
                                             const AttachOptions& opts) {
  const auto m = data::load_manifest(manifest_path, {.check_files = false});
  std::vector<data::PatientRecord> records;
  for (const auto& e : m.entries) records.push_back(data::read_patient_file(m.resolve(e.path)));
  attach_knowledge(records, client, opts);
  for (std::size_t i = 0; i < records.size(); ++i) data::write_patient_file(m.resolve(m.entries[i].path), records[i]);
  return records.size();
}

}  // namespace kemm::pipeline
