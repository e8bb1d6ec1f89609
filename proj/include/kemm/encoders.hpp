#pragma once

// Unimodal adapters mapping patch bags, gene sets and knowledge tokens into
// the shared d-dimensional latent space. All three preserve token counts.

#include <stdexcept>
#include <string>

#include "kemm/layers.hpp"

namespace kemm::encoders {

using nn::Matrix;
using nn::Tape;
using nn::Var;

struct Dimensions {
  int d_patch = 32;
  int d_gene = 16;       // d_G, width of the gene-name embeddings
  int d_knowledge = 32;  // d_K, width of the token embeddings
  int d_model = 16;      // d, shared latent width
  int pathology_hidden = 32;
  int value_hidden = 16;
  int gene_layers = 2;
  int gene_heads = 2;
  int gene_ff_mult = 2;

  void validate() const {
    for (int v : {d_patch, d_gene, d_knowledge, d_model, pathology_hidden, value_hidden, gene_heads, gene_ff_mult})
      if (v <= 0) throw std::invalid_argument("Dimensions: all widths must be positive");
    if (gene_layers < 0) throw std::invalid_argument("Dimensions: gene_layers must be >= 0");
    if (d_gene % gene_heads != 0) throw std::invalid_argument("Dimensions: d_gene not divisible by gene_heads");
  }
};

/// f_P: row-wise MLP d_patch -> hidden -> d over pre-extracted patch features.
template <typename Scalar>
struct PathologyEncoder {
  nn::Mlp<Scalar> adapter;

  static PathologyEncoder create(nn::ParameterSet<Scalar>& ps, const Dimensions& dims, Rng& rng) {
    return {nn::Mlp<Scalar>::create(ps, "pathology.adapter", dims.d_patch, dims.pathology_hidden, dims.d_model, rng,
                                    nn::ParamGroup::pathology_adapter)};
  }

  Var<Scalar> operator()(Tape<Scalar>& t, Var<Scalar> patches) const {
    if (patches.rows() < 1) throw std::invalid_argument("encode_pathology: empty patch bag");
    if (patches.cols() != adapter.first.in_features())
      throw std::invalid_argument("encode_pathology: patch width " + std::to_string(patches.cols()) +
                                  " != " + std::to_string(adapter.first.in_features()));
    return adapter(t, patches);
  }
};

/// Gene tokens are name embedding + E_v(expression); a self-attention set
/// encoder E_G (no positional encoding) and a linear adapter f_G follow.
template <typename Scalar>
struct GeneEncoder {
  nn::Mlp<Scalar> value_encoder;
  nn::TransformerEncoder<Scalar> set_encoder;
  nn::Linear<Scalar> adapter;

  static GeneEncoder create(nn::ParameterSet<Scalar>& ps, const Dimensions& dims, Rng& rng) {
    GeneEncoder g;
    g.value_encoder = nn::Mlp<Scalar>::create(ps, "genomic.value_encoder", 1, dims.value_hidden, dims.d_gene, rng);
    g.set_encoder = nn::TransformerEncoder<Scalar>::create(ps, "genomic.set_encoder", dims.gene_layers, dims.d_gene,
                                                           dims.gene_heads, dims.gene_ff_mult, rng);
    g.adapter = nn::Linear<Scalar>::create(ps, "genomic.adapter", dims.d_gene, dims.d_model, rng);
    return g;
  }

  /// name_embeddings: n_G x d_G (frozen lookup); values: n_G x 1.
  Var<Scalar> operator()(Tape<Scalar>& t, Var<Scalar> name_embeddings, Var<Scalar> values) const {
    if (name_embeddings.rows() < 1) throw std::invalid_argument("encode_genes: empty gene set");
    if (values.rows() != name_embeddings.rows() || values.cols() != 1)
      throw std::invalid_argument("encode_genes: values must be n_G x 1");
    if (name_embeddings.cols() != value_encoder.second.out_features())
      throw std::invalid_argument("encode_genes: gene embedding width mismatch");
    const auto& v = values.value();
    for (Eigen::Index i = 0; i < v.size(); ++i)
      if (!std::isfinite(static_cast<double>(v.data()[i]))) throw std::invalid_argument("encode_genes: NaN value");
    auto tokens = nn::add(name_embeddings, value_encoder(t, values));
    return adapter(t, set_encoder(t, tokens));
  }
};

/// f_K: one fully connected layer d_K -> d, applied row-wise.
template <typename Scalar>
struct KnowledgeAdapter {
  nn::Linear<Scalar> adapter;

  static KnowledgeAdapter create(nn::ParameterSet<Scalar>& ps, const Dimensions& dims, Rng& rng,
                                 bool with_bias = true) {
    return {nn::Linear<Scalar>::create(ps, "knowledge.adapter", dims.d_knowledge, dims.d_model, rng,
                                       nn::ParamGroup::other, with_bias)};
  }

  Var<Scalar> operator()(Tape<Scalar>& t, Var<Scalar> embeddings) const {
    if (embeddings.rows() < 1) throw std::invalid_argument("encode_knowledge_features: n_K must be >= 1");
    if (embeddings.cols() != adapter.in_features())
      throw std::invalid_argument("encode_knowledge_features: embedding width mismatch");
    return adapter(t, embeddings);
  }
};

}  // namespace kemm::encoders
