#pragma once

// The full network: encoders -> two KECM blocks -> fusion head -> hazard
// logits, with structural modality masking.

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "kemm/data.hpp"
#include "kemm/encoders.hpp"
#include "kemm/fusion.hpp"
#include "kemm/kecm.hpp"
#include "kemm/knowledge/encode.hpp"

namespace kemm {

using nn::Matrix;
using nn::Tape;
using nn::Var;

/// Which of the four inputs (P, G, R, PBK) the model sees.
struct ModalityMask {
  bool pathology = true;
  bool genomic = true;
  bool report = true;
  bool pbk = true;

  bool has_knowledge_text() const { return report || pbk; }

  /// "full", or any concatenation of "-P", "-G", "-R", "-PBK" (e.g. "-R-PBK").
  static ModalityMask parse(const std::string& spec) {
    ModalityMask m;
    if (spec == "full" || spec.empty()) return m;
    std::size_t pos = 0;
    while (pos < spec.size()) {
      if (spec.compare(pos, 4, "-PBK") == 0) {
        m.pbk = false;
        pos += 4;
      } else if (spec.compare(pos, 2, "-P") == 0) {
        m.pathology = false;
        pos += 2;
      } else if (spec.compare(pos, 2, "-G") == 0) {
        m.genomic = false;
        pos += 2;
      } else if (spec.compare(pos, 2, "-R") == 0) {
        m.report = false;
        pos += 2;
      } else {
        throw std::invalid_argument("bad modality mask: " + spec);
      }
    }
    return m;
  }

  std::string name() const {
    std::string s;
    if (!pathology) s += "-P";
    if (!genomic) s += "-G";
    if (!report) s += "-R";
    if (!pbk) s += "-PBK";
    return s.empty() ? "full" : s;
  }
  friend bool operator==(const ModalityMask&, const ModalityMask&) = default;
};

struct ModelConfig {
  encoders::Dimensions dims;
  int num_bins = 4;
  kecm::KecmConfig kecm;
  fusion::FusionConfig fusion;
  ModalityMask mask;
  bool knowledge_fallback = false;  // learned queries when both R and PBK are masked out
  int fallback_queries = 4;
  int max_tokens = 512;
  std::uint64_t token_seed = 0x6b656d6dull;
  std::uint64_t init_seed = 0;
};

/// Model-ready tensors for one patient under a given mask.
struct PreparedPatient {
  std::string patient_id;
  data::FeatureMatrix patches;          // n_p x d_patch
  data::FeatureMatrix gene_embeddings;  // n_G x d_G
  data::FeatureMatrix gene_values;      // n_G x 1
  knowledge::KnowledgeSequence knowledge;
  survival::SurvivalLabel label;
};

inline PreparedPatient prepare_patient(const data::PatientRecord& rec, const data::GeneEmbeddingTable& table,
                                       const ModelConfig& cfg) {
  PreparedPatient p;
  p.patient_id = rec.patient_id;
  p.label = rec.label;
  if (cfg.mask.pathology) {
    if (rec.patch_dim() != cfg.dims.d_patch)
      throw std::invalid_argument(rec.patient_id + ": patch width " + std::to_string(rec.patch_dim()) +
                                  " != configured d_patch " + std::to_string(cfg.dims.d_patch));
    p.patches = rec.patch_features;
  }
  if (cfg.mask.genomic) {
    if (table.dim() != cfg.dims.d_gene)
      throw std::invalid_argument("gene table width " + std::to_string(table.dim()) + " != configured d_gene");
    const auto n = static_cast<Eigen::Index>(rec.genes.size());
    if (n == 0) throw std::invalid_argument(rec.patient_id + ": no genes");
    p.gene_embeddings.resize(n, table.dim());
    p.gene_values.resize(n, 1);
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto& g = rec.genes[static_cast<std::size_t>(i)];
      const auto& e = table.at(g.name);
      for (int k = 0; k < table.dim(); ++k) p.gene_embeddings(i, k) = e[k];
      p.gene_values(i, 0) = g.expression;
    }
  }
  if (!cfg.mask.has_knowledge_text() && !cfg.knowledge_fallback)
    throw std::invalid_argument(
        "mask drops both report and PBK: knowledge queries are required; enable knowledge_fallback "
        "(--knowledge-fallback) to use learned queries instead");
  knowledge::KnowledgeEncoderOptions opts;
  opts.max_tokens = cfg.max_tokens;
  opts.dim = cfg.dims.d_knowledge;
  opts.seed = cfg.token_seed;
  opts.allow_empty = cfg.knowledge_fallback;
  p.knowledge = knowledge::encode_knowledge(cfg.mask.report ? rec.report_text : std::string(),
                                            cfg.mask.pbk ? rec.pbk_pathology : std::string(),
                                            cfg.mask.pbk ? rec.pbk_genomic : std::string(), opts);
  return p;
}

enum class Branch { pathology, genomic };

template <typename Scalar>
class KemmModel {
 public:
  struct Forward {
    Var<Scalar> logits;
    Var<Scalar> knowledge;  // F_K (with positions)
    std::optional<Var<Scalar>> pathology_tokens;    // F_P
    std::optional<Var<Scalar>> genomic_tokens;      // F_G
    std::optional<Var<Scalar>> pathology_enhanced;  // F_{P->K}
    std::optional<Var<Scalar>> genomic_enhanced;    // F_{G->K}
    Var<Scalar> fused;                              // F_final
  };

  explicit KemmModel(ModelConfig cfg) : config_(std::move(cfg)) {
    config_.dims.validate();
    if (config_.num_bins < 1) throw std::invalid_argument("num_bins must be >= 1");
    if (config_.fallback_queries < 1) throw std::invalid_argument("fallback_queries must be >= 1");
    Rng rng(mix_seed(config_.init_seed, 0x696e6974ull));
    const int d = config_.dims.d_model;
    if (config_.mask.pathology) {
      pathology_ = encoders::PathologyEncoder<Scalar>::create(params_, config_.dims, rng);
      kecm_pathology_ = kecm::AttentionStack<Scalar>::create(params_, "kecm.pathology", d, config_.kecm, rng);
    }
    if (config_.mask.genomic) {
      genomic_ = encoders::GeneEncoder<Scalar>::create(params_, config_.dims, rng);
      kecm_genomic_ = kecm::AttentionStack<Scalar>::create(params_, "kecm.genomic", d, config_.kecm, rng);
    }
    if (config_.mask.has_knowledge_text())
      knowledge_ = encoders::KnowledgeAdapter<Scalar>::create(params_, config_.dims, rng);
    if (config_.knowledge_fallback && !config_.mask.has_knowledge_text()) {
      fallback_ = &params_.create("knowledge.fallback_queries", config_.fallback_queries, d);
      nn::init_fan_in_uniform(*fallback_, rng);
    }
    fusion_ = fusion::FusionHead<Scalar>::create(params_, d, config_.num_bins, config_.mask.pathology,
                                                 config_.mask.genomic, config_.fusion, rng);
  }

  KemmModel(const KemmModel&) = delete;
  KemmModel& operator=(const KemmModel&) = delete;
  KemmModel(KemmModel&&) noexcept = default;

  const ModelConfig& config() const { return config_; }
  nn::ParameterSet<Scalar>& parameters() { return params_; }
  const nn::ParameterSet<Scalar>& parameters() const { return params_; }
  const fusion::FusionHead<Scalar>& fusion_head() const { return fusion_; }
  fusion::FusionHead<Scalar>& fusion_head() { return fusion_; }
  const std::optional<kecm::AttentionStack<Scalar>>& kecm_block(Branch b) const {
    return b == Branch::pathology ? kecm_pathology_ : kecm_genomic_;
  }

  /// F_K: knowledge adapter output plus positions, or the learned fallback
  /// queries when the knowledge sequence is empty.
  Var<Scalar> knowledge_features(Tape<Scalar>& t, const PreparedPatient& p) const {
    if (p.knowledge.size() == 0) {
      if (!fallback_)
        throw std::invalid_argument("empty knowledge sequence: enable knowledge_fallback (--knowledge-fallback)");
      return t.param(*fallback_);
    }
    if (!knowledge_) throw std::logic_error("model built without a knowledge adapter");
    auto fk = (*knowledge_)(t, t.constant(p.knowledge.embeddings.template cast<Scalar>()));
    return fusion_.with_positions(t, fk);
  }

  Forward forward(Tape<Scalar>& t, const PreparedPatient& p) const {
    Forward f;
    f.knowledge = knowledge_features(t, p);
    if (pathology_) {
      if (p.patches.rows() == 0) throw std::invalid_argument(p.patient_id + ": missing patch features");
      f.pathology_tokens = (*pathology_)(t, t.constant(p.patches.template cast<Scalar>()));
      f.pathology_enhanced = (*kecm_pathology_)(t, f.knowledge, *f.pathology_tokens);
    }
    if (genomic_) {
      if (p.gene_values.rows() == 0) throw std::invalid_argument(p.patient_id + ": missing genes");
      f.genomic_tokens = (*genomic_)(t, t.constant(p.gene_embeddings.template cast<Scalar>()),
                                     t.constant(p.gene_values.template cast<Scalar>()));
      f.genomic_enhanced = (*kecm_genomic_)(t, f.knowledge, *f.genomic_tokens);
    }
    f.fused = fusion_.fuse(t, f.pathology_enhanced, f.knowledge, f.genomic_enhanced);
    f.logits = fusion_.pool_and_classify(t, f.fused);
    return f;
  }

  std::vector<Scalar> predict_logits(const PreparedPatient& p) const {
    Tape<Scalar> t(false);
    const auto& v = forward(t, p).logits.value();
    return std::vector<Scalar>(v.data(), v.data() + v.size());
  }

  survival::HazardCurve predict_curve(const PreparedPatient& p) const {
    const auto logits = predict_logits(p);
    return survival::hazard_curve_from_logits<Scalar>(std::span<const Scalar>(logits));
  }

  double predict_risk(const PreparedPatient& p) const { return survival::risk_score(predict_curve(p)); }

  /// Pre-norm KECM weights of one branch for one patient, per head.
  std::vector<Matrix<Scalar>> attention_weights(const PreparedPatient& p, Branch b) const {
    Tape<Scalar> t(false);
    const auto& stack = kecm_block(b);
    if (!stack) throw std::invalid_argument("attention_weights: branch is masked out");
    auto fk = knowledge_features(t, p);
    Var<Scalar> tokens =
        b == Branch::pathology
            ? (*pathology_)(t, t.constant(p.patches.template cast<Scalar>()))
            : (*genomic_)(t, t.constant(p.gene_embeddings.template cast<Scalar>()),
                          t.constant(p.gene_values.template cast<Scalar>()));
    std::vector<Matrix<Scalar>> out;
    for (const auto& h : stack->weights(t, fk, tokens)) out.push_back(h.value());
    return out;
  }

 private:
  ModelConfig config_;
  nn::ParameterSet<Scalar> params_;
  std::optional<encoders::PathologyEncoder<Scalar>> pathology_;
  std::optional<encoders::GeneEncoder<Scalar>> genomic_;
  std::optional<encoders::KnowledgeAdapter<Scalar>> knowledge_;
  std::optional<kecm::AttentionStack<Scalar>> kecm_pathology_;
  std::optional<kecm::AttentionStack<Scalar>> kecm_genomic_;
  nn::Parameter<Scalar>* fallback_ = nullptr;
  fusion::FusionHead<Scalar> fusion_;
};

}  // namespace kemm
