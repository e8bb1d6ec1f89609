#pragma once

// Tokenization of the merged knowledge text K = (R, PBK) and the hashed
// token-embedding stand-in for a pretrained text encoder.

#include <Eigen/Core>
#include <cctype>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "kemm/random.hpp"

namespace kemm::knowledge {

/// Lower-cased runs of alphanumeric ASCII (non-ASCII bytes are kept inside
/// tokens); whitespace and ASCII punctuation separate tokens.
inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (c >= 0x80 || std::isalnum(c)) {
      cur.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : ch);
    } else if (!cur.empty()) {
      tokens.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) tokens.push_back(std::move(cur));
  return tokens;
}

struct TokenSpan {
  int begin = 0;
  int end = 0;
  int size() const { return end - begin; }
  friend bool operator==(const TokenSpan&, const TokenSpan&) = default;
};

struct SourceSpans {
  TokenSpan report;
  TokenSpan pbk_pathology;
  TokenSpan pbk_genomic;
  int pbk_size() const { return pbk_pathology.size() + pbk_genomic.size(); }
};

using EmbeddingMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct KnowledgeSequence {
  std::vector<std::string> tokens;
  EmbeddingMatrix embeddings;  // n_K x d_K
  SourceSpans spans;

  int size() const { return static_cast<int>(tokens.size()); }
};

struct KnowledgeEncoderOptions {
  int max_tokens = 512;
  int dim = 32;  // d_K
  std::uint64_t seed = 0x6b656d6dull;
  bool allow_empty = false;  // modality ablation with every text dropped
};

/// Deterministic N(0,1) vector for one token; a function of the token
/// string and seed only.
inline std::vector<float> hashed_token_embedding(const std::string& token, int dim, std::uint64_t seed) {
  Rng rng(mix_seed(seed, fnv1a64(token)));
  std::vector<float> v(dim);
  for (auto& x : v) x = static_cast<float>(rng.normal());
  return v;
}

/// Merges report then pathology PBK then genomic PBK. Truncation to
/// max_tokens keeps report tokens first.
inline KnowledgeSequence encode_knowledge(const std::string& report, const std::string& pbk_pathology,
                                          const std::string& pbk_genomic,
                                          const KnowledgeEncoderOptions& opts = {}) {
  if (opts.max_tokens < 1) throw std::invalid_argument("encode_knowledge: max_tokens must be >= 1");
  if (opts.dim < 1) throw std::invalid_argument("encode_knowledge: dim must be >= 1");
  KnowledgeSequence seq;
  int budget = opts.max_tokens;
  auto append = [&](const std::string& text) {
    TokenSpan span{seq.size(), seq.size()};
    for (auto& tok : tokenize(text)) {
      if (budget == 0) break;
      seq.tokens.push_back(std::move(tok));
      --budget;
    }
    span.end = seq.size();
    return span;
  };
  seq.spans.report = append(report);
  seq.spans.pbk_pathology = append(pbk_pathology);
  seq.spans.pbk_genomic = append(pbk_genomic);
  if (seq.tokens.empty() && !opts.allow_empty)
    throw std::invalid_argument("encode_knowledge: all knowledge texts are empty");

  seq.embeddings.resize(seq.size(), opts.dim);
  for (int i = 0; i < seq.size(); ++i) {
    const auto v = hashed_token_embedding(seq.tokens[i], opts.dim, opts.seed);
    for (int k = 0; k < opts.dim; ++k) seq.embeddings(i, k) = v[k];
  }
  return seq;
}

}  // namespace kemm::knowledge
