#pragma once

// Offline responses for the fixture LLM backend: one pathology and one
// genomic background-knowledge text per supported cancer-type code.

#include <array>
#include <optional>
#include <string_view>

#include "kemm/knowledge/prompt.hpp"

namespace kemm::knowledge::fixtures {

struct PbkFixture {
  std::string_view cancer_type;
  std::string_view pathology;
  std::string_view genomic;
};

inline constexpr std::array<PbkFixture, 5> kPbk{{
    {"BRCA",
     "High risk breast carcinoma shows high nuclear grade, brisk mitoses, tumor necrosis, "
     "lymphovascular invasion and sparse stromal lymphocytes. Low risk tumors are well "
     "differentiated with tubule formation, low mitotic count, dense tumor infiltrating "
     "lymphocytes and no vascular invasion.",
     "Poor outcome associates with ERBB2 amplification without targeted therapy, TP53 "
     "mutation, high proliferation genes such as MKI67 and basal-like expression. Favorable "
     "outcome associates with ESR1 and PGR expression, luminal A profiles and low genomic "
     "instability."},
    {"LUAD",
     "High risk lung adenocarcinoma has solid or micropapillary patterns, high mitotic "
     "activity, necrosis, visceral pleural invasion and spread through air spaces. Low risk "
     "tumors show lepidic growth, low grade cytology, minimal invasion and abundant "
     "lymphoid aggregates.",
     "Poor outcome associates with KRAS and TP53 co-mutation, STK11 or KEAP1 loss and high "
     "proliferation signatures. Favorable outcome associates with targetable EGFR mutation, "
     "ALK fusion with therapy, and immune active expression profiles."},
    {"UCEC",
     "High risk endometrial carcinoma is serous or high grade endometrioid with deep "
     "myometrial invasion, lymphovascular invasion, marked atypia and necrosis. Low risk "
     "tumors are low grade endometrioid, superficially invasive, and rich in tumor "
     "infiltrating lymphocytes.",
     "Poor outcome associates with the copy number high serous-like subtype, TP53 mutation "
     "and ERBB2 amplification. Favorable outcome associates with POLE ultramutation, "
     "mismatch repair deficiency with immune infiltration and PTEN altered low copy "
     "number tumors."},
    {"LUSC",
     "High risk squamous cell lung carcinoma shows poor keratinization, basaloid "
     "morphology, extensive necrosis, high tumor budding and vascular invasion. Low risk "
     "tumors are keratinizing, well differentiated, with limited budding and strong "
     "stromal lymphocytic response.",
     "Poor outcome associates with SOX2 and TP63 amplification, NFE2L2 pathway activation "
     "and high proliferation scores. Favorable outcome associates with immune rich "
     "expression, intact CDKN2A signaling and lower copy number burden."},
    {"KIRC",
     "High risk clear cell renal carcinoma has high nuclear grade, sarcomatoid or "
     "rhabdoid differentiation, coagulative necrosis and renal vein invasion. Low risk "
     "tumors show low nuclear grade, clear cytoplasm, a delicate vascular network and "
     "no necrosis.",
     "Poor outcome associates with BAP1 and SETD2 loss, CDKN2A deletion and high "
     "proliferation signatures. Favorable outcome associates with PBRM1 mutation, "
     "angiogenic expression programs and VHL loss without additional driver events."},
}};

inline std::optional<std::string_view> pbk_text(std::string_view cancer_type, Modality modality) {
  for (const auto& f : kPbk)
    if (f.cancer_type == cancer_type) return modality == Modality::pathology ? f.pathology : f.genomic;
  return std::nullopt;
}

}  // namespace kemm::knowledge::fixtures
