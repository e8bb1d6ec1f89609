#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace kemm::knowledge {

enum class Modality { pathology, genomic };

inline std::string_view modality_features(Modality m) {
  switch (m) {
    case Modality::pathology:
      return "pathology image features";
    case Modality::genomic:
      return "genomic data features";
  }
  throw std::invalid_argument("unknown modality");
}

inline std::string_view to_string(Modality m) {
  switch (m) {
    case Modality::pathology:
      return "pathology";
    case Modality::genomic:
      return "genomic";
  }
  throw std::invalid_argument("unknown modality");
}

inline Modality parse_modality(std::string_view s) {
  if (s == "pathology") return Modality::pathology;
  if (s == "genomic") return Modality::genomic;
  throw std::invalid_argument("unknown modality: " + std::string(s));
}

struct PromptTemplate {
  std::string cancer_type;
  Modality modality = Modality::pathology;
  std::string rendered;
};

inline constexpr std::string_view kPbkPrefix = "For patients diagnosed with ";
inline constexpr std::string_view kPbkMiddle = ", what ";
inline constexpr std::string_view kPbkSuffix =
    " indicate that the patient is at high or low risk? Please describe these features in 100 words.";

/// Prognostic-background-knowledge question for one cancer type and modality.
inline std::string build_pbk_prompt(const std::string& cancer_type, Modality modality) {
  if (cancer_type.empty()) throw std::invalid_argument("build_pbk_prompt: empty cancer type");
  std::string out(kPbkPrefix);
  out += cancer_type;
  out += kPbkMiddle;
  out += modality_features(modality);
  out += kPbkSuffix;
  return out;
}

inline PromptTemplate make_pbk_template(const std::string& cancer_type, Modality modality) {
  return {cancer_type, modality, build_pbk_prompt(cancer_type, modality)};
}

/// Inverse of build_pbk_prompt; nullopt when the text is not a PBK prompt.
inline std::optional<PromptTemplate> parse_pbk_prompt(std::string_view prompt) {
  if (!prompt.starts_with(kPbkPrefix) || !prompt.ends_with(kPbkSuffix)) return std::nullopt;
  std::string_view body = prompt.substr(kPbkPrefix.size(), prompt.size() - kPbkPrefix.size() - kPbkSuffix.size());
  const auto cut = body.rfind(kPbkMiddle);
  if (cut == std::string_view::npos || cut == 0) return std::nullopt;
  const std::string_view cancer = body.substr(0, cut);
  const std::string_view features = body.substr(cut + kPbkMiddle.size());
  for (Modality m : {Modality::pathology, Modality::genomic})
    if (features == modality_features(m)) return PromptTemplate{std::string(cancer), m, std::string(prompt)};
  return std::nullopt;
}

// Report refinement instruction. The section list is the canonical order the
// offline fixture backend also uses.
inline constexpr std::string_view kRefinePrefix =
    "Rewrite the pathology report below into a uniform structure using the sections "
    "DIAGNOSIS, HISTOLOGIC TYPE, GRADE, TUMOR SIZE, MARGINS, LYMPH NODES, "
    "IMMUNOHISTOCHEMISTRY, COMMENT. Keep every finding, drop boilerplate, and answer "
    "with the rewritten report only.\n\nREPORT:\n";

inline std::string build_refine_prompt(const std::string& raw_report) {
  if (raw_report.find_first_not_of(" \t\r\n") == std::string::npos)
    throw std::invalid_argument("refine_report: empty report");
  return std::string(kRefinePrefix) + raw_report;
}

inline std::optional<std::string> parse_refine_prompt(std::string_view prompt) {
  if (!prompt.starts_with(kRefinePrefix)) return std::nullopt;
  return std::string(prompt.substr(kRefinePrefix.size()));
}

}  // namespace kemm::knowledge
