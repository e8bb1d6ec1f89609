#pragma once

// Deterministic report normalization used as the offline stand-in for
// LLM report refinement: whitespace collapse, then sections reordered by a
// fixed header list. Text before the first known header stays in front;
// unknown headers stay attached to the preceding section.

#include <algorithm>
#include <array>
#include <cctype>
#include <string>
#include <string_view>
#include <vector>

namespace kemm::knowledge {

inline constexpr std::array<std::string_view, 8> kReportSections{
    "DIAGNOSIS", "HISTOLOGIC TYPE", "GRADE", "TUMOR SIZE",
    "MARGINS",   "LYMPH NODES",     "IMMUNOHISTOCHEMISTRY", "COMMENT"};

inline std::string collapse_whitespace(std::string_view text) {
  std::string out;
  bool pending_space = false;
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(c);
  }
  return out;
}

namespace detail {

// Index into kReportSections of a "HEADER:" starting at pos, or -1.
inline int header_at(std::string_view text, std::size_t pos) {
  if (pos > 0 && text[pos - 1] != ' ') return -1;
  int best = -1;
  std::size_t best_len = 0;
  for (std::size_t k = 0; k < kReportSections.size(); ++k) {
    const auto h = kReportSections[k];
    if (text.size() >= pos + h.size() + 1 && text.substr(pos, h.size()) == h && text[pos + h.size()] == ':' &&
        h.size() > best_len) {
      best = static_cast<int>(k);
      best_len = h.size();
    }
  }
  return best;
}

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(' ');
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(' ');
  return std::string(s.substr(b, e - b + 1));
}

}  // namespace detail

inline std::string normalize_report(std::string_view raw) {
  const std::string text = collapse_whitespace(raw);
  struct Section {
    int order;
    std::string body;
  };
  std::vector<Section> sections;
  std::string preamble;
  std::size_t start = 0;
  int current = -1;
  auto flush = [&](std::size_t end) {
    std::string piece = detail::trim(std::string_view(text).substr(start, end - start));
    if (current < 0)
      preamble = piece;
    else
      sections.push_back({current, piece});
  };
  for (std::size_t pos = 0; pos < text.size(); ++pos) {
    const int h = detail::header_at(text, pos);
    if (h < 0) continue;
    flush(pos);
    current = h;
    start = pos;
    pos += kReportSections[h].size();
  }
  flush(text.size());
  std::stable_sort(sections.begin(), sections.end(),
                   [](const Section& a, const Section& b) { return a.order < b.order; });
  std::string out = preamble;
  for (const auto& s : sections) {
    if (s.body.empty()) continue;
    if (!out.empty()) out.push_back(' ');
    out += s.body;
  }
  return out;
}

}  // namespace kemm::knowledge
