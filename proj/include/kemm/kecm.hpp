#pragma once

// Knowledge-enhanced cross-modal attention: knowledge tokens query the
// tokens of one redundant modality,
//
//   A   = softmax_keys( (F_K W_q^T)(F_X W_k^T)^T / sqrt(d_head) )   per head
//   out = norm(A) (F_X W_v^T)                                       heads concatenated
//
// so n_X modality tokens are compressed to n_K knowledge-aligned tokens.
// norm is either off or a row-wise layer norm over the key axis with one
// shared affine pair (the key count varies per patient).

#include <stdexcept>
#include <string>
#include <vector>

#include "kemm/layers.hpp"

namespace kemm::kecm {

using nn::Matrix;
using nn::Tape;
using nn::Var;

enum class AttentionNorm { off, layernorm };

inline const char* to_string(AttentionNorm n) { return n == AttentionNorm::off ? "off" : "layernorm"; }
inline AttentionNorm parse_attention_norm(const std::string& s) {
  if (s == "off") return AttentionNorm::off;
  if (s == "layernorm") return AttentionNorm::layernorm;
  throw std::invalid_argument("unknown attention norm mode: " + s);
}

struct KecmConfig {
  int heads = 2;
  AttentionNorm norm = AttentionNorm::layernorm;
  bool residual = false;  // add F_K to the output
};

template <typename Scalar>
struct AttentionStack {
  nn::Parameter<Scalar>* w_q = nullptr;  // d x d
  nn::Parameter<Scalar>* w_k = nullptr;
  nn::Parameter<Scalar>* w_v = nullptr;
  nn::LayerNorm<Scalar> norm;  // shared scalar gamma / beta
  KecmConfig config;

  static AttentionStack create(nn::ParameterSet<Scalar>& ps, const std::string& name, int d, const KecmConfig& cfg,
                               Rng& rng) {
    if (cfg.heads < 1 || d % cfg.heads != 0)
      throw std::invalid_argument(name + ": d=" + std::to_string(d) + " not divisible by head_count=" +
                                  std::to_string(cfg.heads));
    AttentionStack s;
    s.config = cfg;
    s.w_q = &ps.create(name + ".w_q", d, d);
    s.w_k = &ps.create(name + ".w_k", d, d);
    s.w_v = &ps.create(name + ".w_v", d, d);
    for (auto* p : {s.w_q, s.w_k, s.w_v}) nn::init_fan_in_uniform(*p, rng);
    s.norm = nn::LayerNorm<Scalar>::create(ps, name + ".norm", 0);
    return s;
  }

  int width() const { return static_cast<int>(w_q->value.rows()); }

  void check_inputs(const Var<Scalar>& knowledge, const Var<Scalar>& tokens) const {
    if (tokens.rows() < 1) throw std::invalid_argument("kecm: empty key set");
    if (knowledge.rows() < 1) throw std::invalid_argument("kecm: empty query set");
    if (knowledge.cols() != width() || tokens.cols() != width())
      throw std::invalid_argument("kecm: width mismatch (expected " + std::to_string(width()) + ")");
  }

  /// Pre-norm attention weights, one n_K x n_X matrix per head.
  std::vector<Var<Scalar>> weights(Tape<Scalar>& t, Var<Scalar> knowledge, Var<Scalar> tokens) const {
    check_inputs(knowledge, tokens);
    auto q = nn::matmul_nt(knowledge, t.param(*w_q));
    auto k = nn::matmul_nt(tokens, t.param(*w_k));
    return nn::attention_heads(q, k, config.heads);
  }

  /// Output is n_K x d for every n_X.
  Var<Scalar> operator()(Tape<Scalar>& t, Var<Scalar> knowledge, Var<Scalar> tokens) const {
    auto heads = weights(t, knowledge, tokens);
    if (config.norm == AttentionNorm::layernorm)
      for (auto& a : heads) a = norm(t, a);
    auto out = nn::combine_heads(heads, nn::matmul_nt(tokens, t.param(*w_v)));
    if (config.residual) out = nn::add(out, knowledge);
    return out;
  }
};

/// Convenience for inspection: evaluates the weights without gradients.
template <typename Scalar>
std::vector<Matrix<Scalar>> attention_weights(const AttentionStack<Scalar>& stack, const Matrix<Scalar>& knowledge,
                                              const Matrix<Scalar>& tokens) {
  Tape<Scalar> t(false);
  auto heads = stack.weights(t, t.constant(knowledge), t.constant(tokens));
  std::vector<Matrix<Scalar>> out;
  for (const auto& h : heads) out.push_back(h.value());
  return out;
}

}  // namespace kemm::kecm
