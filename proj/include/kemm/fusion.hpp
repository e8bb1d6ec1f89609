#pragma once

// Post-attention aggregation: per-branch transformer encoders, feature-wise
// concatenation  T_P(F_PK) | F_K | T_G(F_GK),  mean pooling over tokens and
// an affine hazard classifier.

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "kemm/layers.hpp"

namespace kemm::fusion {

using nn::Matrix;
using nn::Tape;
using nn::Var;

struct FusionConfig {
  int depth = 1;
  int heads = 2;
  int ff_mult = 2;
  bool positional_encoding = true;
};

template <typename Scalar>
struct FusionHead {
  std::optional<nn::TransformerEncoder<Scalar>> pathology;  // T_P, absent when P is masked out
  std::optional<nn::TransformerEncoder<Scalar>> genomic;    // T_G
  nn::Linear<Scalar> classifier;                            // (#blocks * d) -> T
  FusionConfig config;
  int d_model = 0;

  static FusionHead create(nn::ParameterSet<Scalar>& ps, int d_model, int num_bins, bool with_pathology,
                           bool with_genomic, const FusionConfig& cfg, Rng& rng) {
    FusionHead f;
    f.config = cfg;
    f.d_model = d_model;
    if (with_pathology)
      f.pathology = nn::TransformerEncoder<Scalar>::create(ps, "fusion.pathology", cfg.depth, d_model, cfg.heads,
                                                           cfg.ff_mult, rng);
    if (with_genomic)
      f.genomic = nn::TransformerEncoder<Scalar>::create(ps, "fusion.genomic", cfg.depth, d_model, cfg.heads,
                                                         cfg.ff_mult, rng);
    const int blocks = 1 + (with_pathology ? 1 : 0) + (with_genomic ? 1 : 0);
    f.classifier = nn::Linear<Scalar>::create(ps, "classifier", blocks * d_model, num_bins, rng);
    return f;
  }

  int classifier_width() const { return classifier.in_features(); }

  Var<Scalar> with_positions(Tape<Scalar>& t, Var<Scalar> x) const {
    if (!config.positional_encoding) return x;
    return nn::add(x, t.constant(nn::sinusoidal_positions<Scalar>(x.rows(), x.cols())));
  }

  /// F_final = T_P(F_PK) | F_K | T_G(F_GK); absent branches are skipped.
  Var<Scalar> fuse(Tape<Scalar>& t, std::optional<Var<Scalar>> pathology_tokens, Var<Scalar> knowledge,
                   std::optional<Var<Scalar>> genomic_tokens) const {
    if (pathology_tokens.has_value() != pathology.has_value() || genomic_tokens.has_value() != genomic.has_value())
      throw std::invalid_argument("fuse: branch inputs do not match the configured modalities");
    std::vector<Var<Scalar>> blocks;
    auto check = [&](const Var<Scalar>& v) {
      if (v.rows() != knowledge.rows()) throw std::invalid_argument("fuse: token-count mismatch");
      if (v.cols() != d_model) throw std::invalid_argument("fuse: width mismatch");
    };
    check(knowledge);
    if (pathology_tokens) {
      check(*pathology_tokens);
      blocks.push_back((*pathology)(t, with_positions(t, *pathology_tokens)));
    }
    blocks.push_back(knowledge);
    if (genomic_tokens) {
      check(*genomic_tokens);
      blocks.push_back((*genomic)(t, with_positions(t, *genomic_tokens)));
    }
    return nn::concat_cols(blocks);
  }

  /// rho (token mean) then the affine classifier; returns 1 x T logits.
  Var<Scalar> pool_and_classify(Tape<Scalar>& t, Var<Scalar> fused) const {
    if (fused.rows() < 1) throw std::invalid_argument("pool_and_classify: empty token axis");
    if (fused.cols() != classifier_width())
      throw std::invalid_argument("pool_and_classify: expected width " + std::to_string(classifier_width()));
    return classifier(t, nn::mean_rows(fused));
  }
};

}  // namespace kemm::fusion
