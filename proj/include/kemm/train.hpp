#pragma once

// Training loop, k-fold cross-validation, ablation runner, checkpoints and
// structured results.

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "kemm/data.hpp"
#include "kemm/model.hpp"
#include "kemm/survival.hpp"

namespace kemm::train {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration

struct LlmSelection {
  std::string backend = "fixture";  // "fixture" or "http"
  std::string url;
  std::string model = "gpt-4";
  std::string cache_dir;
  friend bool operator==(const LlmSelection&, const LlmSelection&) = default;
};

struct RunConfig {
  std::uint64_t seed = 7;
  int epochs = 30;
  std::string optimizer = "adam";
  double lr_pathology_adapter = 2e-4;
  double lr_other = 2e-5;
  double weight_decay = 1e-5;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int batch_size = 1;  // patients per optimizer step (gradient accumulation)
  encoders::Dimensions dims;
  int num_bins = 4;
  kecm::KecmConfig kecm;
  fusion::FusionConfig fusion;
  ModalityMask mask;
  bool knowledge_fallback = false;
  int fallback_queries = 4;
  int max_tokens = 512;
  LlmSelection llm;

  void validate() const {
    auto bad = [](const std::string& what) { throw std::invalid_argument("RunConfig: " + what); };
    if (epochs < 1) bad("epochs must be >= 1");
    if (optimizer != "adam") bad("unsupported optimizer '" + optimizer + "' (only adam)");
    if (!(lr_pathology_adapter > 0.0) || !(lr_other > 0.0)) bad("learning rates must be positive");
    if (!(weight_decay >= 0.0)) bad("weight_decay must be >= 0");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0))
      bad("Adam betas must lie in [0,1)");
    if (!(adam_eps > 0.0)) bad("adam_eps must be positive");
    if (batch_size < 1) bad("batch_size must be >= 1");
    if (num_bins < 1) bad("T must be >= 1");
    if (max_tokens < 1) bad("max_tokens must be >= 1");
    if (llm.backend != "fixture" && llm.backend != "http") bad("unknown LLM backend '" + llm.backend + "'");
    dims.validate();
    if (dims.d_model % kecm.heads != 0) bad("d not divisible by KECM head_count");
    if (dims.d_model % fusion.heads != 0) bad("d not divisible by fusion head_count");
    if (!mask.has_knowledge_text() && !knowledge_fallback)
      bad("mask " + mask.name() + " drops all knowledge text; enable knowledge_fallback");
  }

  ModelConfig model_config(int fold) const {
    ModelConfig m;
    m.dims = dims;
    m.num_bins = num_bins;
    m.kecm = kecm;
    m.fusion = fusion;
    m.mask = mask;
    m.knowledge_fallback = knowledge_fallback;
    m.fallback_queries = fallback_queries;
    m.max_tokens = max_tokens;
    m.init_seed = mix_seed(seed, static_cast<std::uint64_t>(fold) + 1);
    return m;
  }

  friend bool operator==(const RunConfig& a, const RunConfig& b) {
    return a.to_json() == b.to_json();
  }

  json to_json() const {
    return json{{"seed", seed},
                {"epochs", epochs},
                {"optimizer", optimizer},
                {"lr_pathology_adapter", lr_pathology_adapter},
                {"lr_other", lr_other},
                {"weight_decay", weight_decay},
                {"adam_beta1", adam_beta1},
                {"adam_beta2", adam_beta2},
                {"adam_eps", adam_eps},
                {"batch_size", batch_size},
                {"dims",
                 {{"d_patch", dims.d_patch},
                  {"d_gene", dims.d_gene},
                  {"d_knowledge", dims.d_knowledge},
                  {"d_model", dims.d_model},
                  {"pathology_hidden", dims.pathology_hidden},
                  {"value_hidden", dims.value_hidden},
                  {"gene_layers", dims.gene_layers},
                  {"gene_heads", dims.gene_heads},
                  {"gene_ff_mult", dims.gene_ff_mult}}},
                {"num_bins", num_bins},
                {"kecm", {{"heads", kecm.heads}, {"norm", kecm::to_string(kecm.norm)}, {"residual", kecm.residual}}},
                {"fusion",
                 {{"depth", fusion.depth},
                  {"heads", fusion.heads},
                  {"ff_mult", fusion.ff_mult},
                  {"positional_encoding", fusion.positional_encoding}}},
                {"mask", mask.name()},
                {"knowledge_fallback", knowledge_fallback},
                {"fallback_queries", fallback_queries},
                {"max_tokens", max_tokens},
                {"llm", {{"backend", llm.backend}, {"url", llm.url}, {"model", llm.model}, {"cache_dir", llm.cache_dir}}}};
  }

  /// Missing keys keep their defaults; unknown keys are rejected.
  static RunConfig from_json(const json& j) {
    RunConfig c;
    auto take = [](const json& obj, const char* key, auto& field, const std::string& where) {
      if (auto it = obj.find(key); it != obj.end()) {
        try {
          it->get_to(field);
        } catch (const json::exception& e) {
          throw std::invalid_argument("RunConfig: bad value for " + where + key + ": " + e.what());
        }
      }
    };
    auto reject_unknown = [](const json& obj, std::initializer_list<const char*> known, const std::string& where) {
      if (!obj.is_object()) throw std::invalid_argument("RunConfig: " + where + " must be an object");
      for (auto it = obj.begin(); it != obj.end(); ++it)
        if (std::none_of(known.begin(), known.end(), [&](const char* k) { return it.key() == k; }))
          throw std::invalid_argument("RunConfig: unknown key " + where + it.key());
    };
    reject_unknown(j,
                   {"seed", "epochs", "optimizer", "lr_pathology_adapter", "lr_other", "weight_decay", "adam_beta1",
                    "adam_beta2", "adam_eps", "batch_size", "dims", "num_bins", "kecm", "fusion", "mask",
                    "knowledge_fallback", "fallback_queries", "max_tokens", "llm"},
                   "");
    take(j, "seed", c.seed, "");
    take(j, "epochs", c.epochs, "");
    take(j, "optimizer", c.optimizer, "");
    take(j, "lr_pathology_adapter", c.lr_pathology_adapter, "");
    take(j, "lr_other", c.lr_other, "");
    take(j, "weight_decay", c.weight_decay, "");
    take(j, "adam_beta1", c.adam_beta1, "");
    take(j, "adam_beta2", c.adam_beta2, "");
    take(j, "adam_eps", c.adam_eps, "");
    take(j, "batch_size", c.batch_size, "");
    take(j, "num_bins", c.num_bins, "");
    take(j, "knowledge_fallback", c.knowledge_fallback, "");
    take(j, "fallback_queries", c.fallback_queries, "");
    take(j, "max_tokens", c.max_tokens, "");
    if (auto it = j.find("dims"); it != j.end()) {
      const auto& d = *it;
      reject_unknown(d,
                     {"d_patch", "d_gene", "d_knowledge", "d_model", "pathology_hidden", "value_hidden", "gene_layers",
                      "gene_heads", "gene_ff_mult"},
                     "dims.");
      take(d, "d_patch", c.dims.d_patch, "dims.");
      take(d, "d_gene", c.dims.d_gene, "dims.");
      take(d, "d_knowledge", c.dims.d_knowledge, "dims.");
      take(d, "d_model", c.dims.d_model, "dims.");
      take(d, "pathology_hidden", c.dims.pathology_hidden, "dims.");
      take(d, "value_hidden", c.dims.value_hidden, "dims.");
      take(d, "gene_layers", c.dims.gene_layers, "dims.");
      take(d, "gene_heads", c.dims.gene_heads, "dims.");
      take(d, "gene_ff_mult", c.dims.gene_ff_mult, "dims.");
    }
    if (auto it = j.find("kecm"); it != j.end()) {
      reject_unknown(*it, {"heads", "norm", "residual"}, "kecm.");
      take(*it, "heads", c.kecm.heads, "kecm.");
      std::string norm = kecm::to_string(c.kecm.norm);
      take(*it, "norm", norm, "kecm.");
      c.kecm.norm = kecm::parse_attention_norm(norm);
      take(*it, "residual", c.kecm.residual, "kecm.");
    }
    if (auto it = j.find("fusion"); it != j.end()) {
      reject_unknown(*it, {"depth", "heads", "ff_mult", "positional_encoding"}, "fusion.");
      take(*it, "depth", c.fusion.depth, "fusion.");
      take(*it, "heads", c.fusion.heads, "fusion.");
      take(*it, "ff_mult", c.fusion.ff_mult, "fusion.");
      take(*it, "positional_encoding", c.fusion.positional_encoding, "fusion.");
    }
    if (auto it = j.find("mask"); it != j.end()) c.mask = ModalityMask::parse(it->get<std::string>());
    if (auto it = j.find("llm"); it != j.end()) {
      reject_unknown(*it, {"backend", "url", "model", "cache_dir"}, "llm.");
      take(*it, "backend", c.llm.backend, "llm.");
      take(*it, "url", c.llm.url, "llm.");
      take(*it, "model", c.llm.model, "llm.");
      take(*it, "cache_dir", c.llm.cache_dir, "llm.");
    }
    return c;
  }
};

// ---------------------------------------------------------------------------
// Optimizer

inline double learning_rate(const RunConfig& c, nn::ParamGroup g) {
  return g == nn::ParamGroup::pathology_adapter ? c.lr_pathology_adapter : c.lr_other;
}

/// Adam with L2 weight decay folded into the gradient, one learning rate per
/// parameter group.
template <typename Scalar>
class Adam {
 public:
  Adam(std::vector<nn::Parameter<Scalar>*> params, const RunConfig& cfg) : params_(std::move(params)), cfg_(cfg) {
    for (auto* p : params_) {
      m_.push_back(nn::Matrix<Scalar>::Zero(p->value.rows(), p->value.cols()));
      v_.push_back(nn::Matrix<Scalar>::Zero(p->value.rows(), p->value.cols()));
    }
  }

  /// Parameter name -> learning rate actually applied.
  std::map<std::string, double> group_audit() const {
    std::map<std::string, double> out;
    for (auto* p : params_) out[p->name] = learning_rate(cfg_, p->group);
    return out;
  }

  long long steps() const { return step_; }

  /// Applies grad * grad_scale, then clears the gradients.
  void step(Scalar grad_scale = Scalar(1)) {
    ++step_;
    const Scalar b1 = static_cast<Scalar>(cfg_.adam_beta1), b2 = static_cast<Scalar>(cfg_.adam_beta2);
    const Scalar c1 = Scalar(1) - static_cast<Scalar>(std::pow(cfg_.adam_beta1, static_cast<double>(step_)));
    const Scalar c2 = Scalar(1) - static_cast<Scalar>(std::pow(cfg_.adam_beta2, static_cast<double>(step_)));
    const Scalar wd = static_cast<Scalar>(cfg_.weight_decay), eps = static_cast<Scalar>(cfg_.adam_eps);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = *params_[i];
      const Scalar lr = static_cast<Scalar>(learning_rate(cfg_, p.group));
      auto& m = m_[i];
      auto& v = v_[i];
      for (Eigen::Index k = 0; k < p.value.size(); ++k) {
        const Scalar g = p.grad.data()[k] * grad_scale + wd * p.value.data()[k];
        m.data()[k] = b1 * m.data()[k] + (Scalar(1) - b1) * g;
        v.data()[k] = b2 * v.data()[k] + (Scalar(1) - b2) * g * g;
        const Scalar mhat = m.data()[k] / c1, vhat = v.data()[k] / c2;
        p.value.data()[k] -= lr * mhat / (std::sqrt(vhat) + eps);
      }
      p.zero_grad();
    }
  }

 private:
  std::vector<nn::Parameter<Scalar>*> params_;
  RunConfig cfg_;
  std::vector<nn::Matrix<Scalar>> m_, v_;
  long long step_ = 0;
};

// ---------------------------------------------------------------------------
// Cohort access with label auditing

enum class LabelUse { training, evaluation };
using LabelObserver = std::function<void(const std::string& patient_id, LabelUse use)>;

/// Loaded records plus a label accessor that reports every read.
struct Cohort {
  data::CohortManifest manifest;
  data::GeneEmbeddingTable gene_table;
  std::vector<data::PatientRecord> records;  // aligned with manifest.entries
  LabelObserver observer;

  static Cohort load(const data::CohortManifest& m) {
    Cohort c;
    c.manifest = m;
    if (m.gene_table.empty()) throw std::invalid_argument("manifest has no gene table");
    c.gene_table = data::GeneEmbeddingTable::load(m.resolve(m.gene_table));
    c.records = data::load_cohort(m, c.gene_table);
    return c;
  }
  static Cohort load(const fs::path& manifest_path) { return load(data::load_manifest(manifest_path)); }

  /// In-memory cohort; records are gene-filtered and relabelled from the manifest.
  static Cohort from_records(data::CohortManifest m, data::GeneEmbeddingTable table,
                             std::vector<data::PatientRecord> records) {
    if (records.size() != m.entries.size()) throw std::invalid_argument("cohort: record count != manifest size");
    Cohort c;
    for (std::size_t i = 0; i < records.size(); ++i) {
      if (records[i].patient_id != m.entries[i].patient_id)
        throw std::invalid_argument("cohort: record " + records[i].patient_id + " out of manifest order");
      records[i] = data::filter_genes(std::move(records[i]), table, records[i].patient_id);
      records[i].label = m.entries[i].label;
    }
    c.manifest = std::move(m);
    c.gene_table = std::move(table);
    c.records = std::move(records);
    return c;
  }

  std::size_t size() const { return records.size(); }

  const survival::SurvivalLabel& label(std::size_t i, LabelUse use) const {
    if (observer) observer(records.at(i).patient_id, use);
    return manifest.entries.at(i).label;
  }
};

/// Control cohort: labels permuted across patients with a seeded shuffle.
inline Cohort shuffle_labels(Cohort c, std::uint64_t seed) {
  std::vector<survival::SurvivalLabel> labels;
  for (const auto& e : c.manifest.entries) labels.push_back(e.label);
  Rng rng(mix_seed(seed, 0x73687566ull));
  rng.shuffle(labels);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    c.manifest.entries[i].label = labels[i];
    c.records[i].label = labels[i];
  }
  return c;
}

// ---------------------------------------------------------------------------
// Results

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct FoldResult {
  int fold = 0;
  std::vector<std::string> patient_ids;  // held-out patients, manifest order
  std::vector<double> risks;
  std::vector<survival::SurvivalLabel> labels;
  double c_index = std::numeric_limits<double>::quiet_NaN();  // NaN when undefined
  bool c_index_defined = false;
  bool constant_risk = false;
  std::vector<double> loss_trajectory;  // mean training loss per epoch
  double wall_seconds = 0.0;
  std::string checkpoint;  // file name, relative to the results directory

  /// Bit-for-bit equality of everything except wall time and paths.
  bool same_outcome(const FoldResult& o) const {
    auto bits_equal = [](const std::vector<double>& a, const std::vector<double>& b) {
      if (a.size() != b.size()) return false;
      for (std::size_t i = 0; i < a.size(); ++i)
        if (std::bit_cast<std::uint64_t>(a[i]) != std::bit_cast<std::uint64_t>(b[i])) return false;
      return true;
    };
    return fold == o.fold && patient_ids == o.patient_ids && bits_equal(risks, o.risks) && labels == o.labels &&
           std::bit_cast<std::uint64_t>(c_index) == std::bit_cast<std::uint64_t>(o.c_index) &&
           c_index_defined == o.c_index_defined && constant_risk == o.constant_risk &&
           bits_equal(loss_trajectory, o.loss_trajectory);
  }

  json to_json() const {
    json risks_j = json::array();
    for (std::size_t i = 0; i < risks.size(); ++i)
      risks_j.push_back({{"patient_id", patient_ids[i]},
                         {"risk", risks[i]},
                         {"event_bin", labels[i].event_bin},
                         {"censorship", labels[i].censorship},
                         {"raw_time", labels[i].raw_time}});
    return json{{"record", "fold"},
                {"fold", fold},
                {"c_index", c_index_defined ? json(c_index) : json(nullptr)},
                {"c_index_defined", c_index_defined},
                {"constant_risk", constant_risk},
                {"loss_trajectory", loss_trajectory},
                {"wall_seconds", wall_seconds},
                {"checkpoint", checkpoint},
                {"risks", risks_j}};
  }
};

/// Population statistics over the fold C-indices.
struct CvSummary {
  double mean = std::numeric_limits<double>::quiet_NaN();
  double std = std::numeric_limits<double>::quiet_NaN();
  int defined_folds = 0;
  int constant_folds = 0;
  bool degenerate = false;  // some fold undefined or constant-risk

  json to_json() const {
    auto num = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
    return json{{"record", "summary"},
                {"mean_c_index", num(mean)},
                {"std_c_index", num(std)},
                {"defined_folds", defined_folds},
                {"constant_folds", constant_folds},
                {"degenerate", degenerate}};
  }
};

inline CvSummary summarize(const std::vector<FoldResult>& folds) {
  CvSummary s;
  std::vector<double> values;
  for (const auto& f : folds) {
    if (f.c_index_defined) values.push_back(f.c_index);
    if (f.constant_risk) ++s.constant_folds;
  }
  s.defined_folds = static_cast<int>(values.size());
  s.degenerate = s.defined_folds < static_cast<int>(folds.size()) || s.constant_folds > 0;
  if (!values.empty()) {
    s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(values.size()));
  }
  return s;
}

struct CvResult {
  RunConfig config;
  std::vector<FoldResult> folds;
  CvSummary summary;
};

// ---------------------------------------------------------------------------
// Checkpoints

using Model = KemmModel<float>;

inline void save_checkpoint(const fs::path& path, const Model& model) {
  io::save_tensor_archive(path, model.parameters().to_tensors());
}

inline Model load_checkpoint(const fs::path& path, const RunConfig& cfg, int fold) {
  cfg.validate();
  Model m(cfg.model_config(fold));
  m.parameters().load_tensors(io::load_tensor_archive(path));
  return m;
}

// ---------------------------------------------------------------------------
// Training

struct TrainOptions {
  fs::path checkpoint_path;  // empty: no checkpoint written
  std::function<void(int fold, int epoch, double mean_loss)> on_epoch;
};

inline std::vector<PreparedPatient> prepare_all(const Cohort& c, const ModelConfig& mc) {
  std::vector<PreparedPatient> out;
  out.reserve(c.size());
  for (const auto& r : c.records) out.push_back(prepare_patient(r, c.gene_table, mc));
  return out;
}

namespace detail {

inline void check_fold(const Cohort& c, int fold, const RunConfig& cfg) {
  if (fold < 0 || fold >= c.manifest.num_folds)
    throw std::invalid_argument("fold " + std::to_string(fold) + " does not exist (manifest has " +
                                std::to_string(c.manifest.num_folds) + ")");
  if (cfg.num_bins != c.manifest.num_bins)
    throw std::invalid_argument("config T=" + std::to_string(cfg.num_bins) + " but manifest uses T=" +
                                std::to_string(c.manifest.num_bins));
  if (c.records.size() != c.manifest.entries.size()) throw std::logic_error("cohort records out of sync");
}

inline double c_index_or_nan(const std::vector<double>& risks, const std::vector<survival::SurvivalLabel>& labels,
                             bool& defined) {
  try {
    defined = true;
    return survival::concordance_index(risks, labels);
  } catch (const survival::UndefinedStatistic&) {
    defined = false;
    return std::numeric_limits<double>::quiet_NaN();
  }
}

}  // namespace detail

/// Evaluates held-out risks of a trained model (labels only for the metric).
inline FoldResult evaluate_fold(const Model& model, const Cohort& c, const std::vector<PreparedPatient>& prepared,
                                int fold) {
  FoldResult r;
  r.fold = fold;
  for (int i : c.manifest.fold_members(fold)) {
    r.patient_ids.push_back(prepared[i].patient_id);
    r.risks.push_back(model.predict_risk(prepared[i]));
  }
  for (int i : c.manifest.fold_members(fold)) r.labels.push_back(c.label(static_cast<std::size_t>(i), LabelUse::evaluation));
  r.constant_risk =
      !r.risks.empty() && std::all_of(r.risks.begin(), r.risks.end(), [&](double v) { return v == r.risks.front(); });
  r.c_index = detail::c_index_or_nan(r.risks, r.labels, r.c_index_defined);
  return r;
}

/// Trains on every fold but `fold`, evaluates on `fold`.
inline FoldResult train_fold(const Cohort& c, int fold, const RunConfig& cfg, const TrainOptions& opts = {},
                             std::optional<Model>* trained = nullptr) {
  cfg.validate();
  detail::check_fold(c, fold, cfg);
  const auto start = std::chrono::steady_clock::now();

  const ModelConfig mc = cfg.model_config(fold);
  const auto prepared = prepare_all(c, mc);
  std::vector<int> train_idx;
  for (int i = 0; i < static_cast<int>(c.size()); ++i)
    if (c.manifest.entries[i].fold != fold) train_idx.push_back(i);
  if (train_idx.empty()) throw std::invalid_argument("fold " + std::to_string(fold) + ": no training patients");
  if (c.manifest.fold_members(fold).empty())
    throw std::invalid_argument("fold " + std::to_string(fold) + ": no held-out patients");

  Model model(mc);
  Adam<float> adam(model.parameters().all(), cfg);
  model.parameters().zero_grad();
  std::vector<double> trajectory;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng order_rng(mix_seed(cfg.seed, (static_cast<std::uint64_t>(fold) << 32) | static_cast<std::uint64_t>(epoch)));
    auto order = train_idx;
    order_rng.shuffle(order);
    double total = 0.0;
    int pending = 0;
    for (int i : order) {
      nn::Tape<float> tape(true);
      auto fwd = model.forward(tape, prepared[i]);
      auto loss = nn::surv_nll(fwd.logits, c.label(static_cast<std::size_t>(i), LabelUse::training));
      const double value = static_cast<double>(loss.value()(0, 0));
      if (!std::isfinite(value))
        throw TrainingDiverged("fold " + std::to_string(fold) + " epoch " + std::to_string(epoch) + " patient " +
                               prepared[i].patient_id + ": non-finite training loss (" + std::to_string(value) +
                               "); check learning rates and input scaling");
      tape.backward(loss);
      tape.accumulate_parameter_grads();
      total += value;
      if (++pending == cfg.batch_size) {
        adam.step(1.0f / static_cast<float>(pending));
        pending = 0;
      }
    }
    if (pending > 0) adam.step(1.0f / static_cast<float>(pending));
    trajectory.push_back(total / static_cast<double>(order.size()));
    if (opts.on_epoch) opts.on_epoch(fold, epoch, trajectory.back());
  }

  // The checkpoint stores float32 values; evaluating the same values makes a
  // reloaded checkpoint reproduce the held-out risks exactly.
  model.parameters().round_to_float();
  FoldResult r = evaluate_fold(model, c, prepared, fold);
  r.loss_trajectory = std::move(trajectory);
  if (!opts.checkpoint_path.empty()) {
    save_checkpoint(opts.checkpoint_path, model);
    r.checkpoint = opts.checkpoint_path.filename().string();
  }
  r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (trained) trained->emplace(std::move(model));
  return r;
}

// ---------------------------------------------------------------------------
// Cross-validation

struct CvOptions {
  fs::path output_dir;  // results.jsonl, summary.txt, checkpoints; empty: nothing written
  bool write_checkpoints = true;
  std::function<void(const FoldResult&)> on_fold;
  std::function<void(int fold, int epoch, double mean_loss)> on_epoch;
};

inline std::string format_summary_table(const CvResult& r) {
  std::ostringstream out;
  char buf[160];
  out << "mask: " << r.config.mask.name() << "   seed: " << r.config.seed << "   epochs: " << r.config.epochs << '\n';
  out << "fold  n_test  c_index   final_loss  seconds\n";
  for (const auto& f : r.folds) {
    char cbuf[24] = "undef";
    if (f.c_index_defined) std::snprintf(cbuf, sizeof cbuf, "%.4f", f.c_index);
    std::snprintf(buf, sizeof buf, "%4d  %6zu  %-8s  %10.5f  %7.2f%s\n", f.fold, f.risks.size(), cbuf,
                  f.loss_trajectory.empty() ? 0.0 : f.loss_trajectory.back(), f.wall_seconds,
                  f.constant_risk ? "  [constant risk]" : "");
    out << buf;
  }
  if (r.summary.defined_folds > 0) {
    std::snprintf(buf, sizeof buf, "mean C-index %.4f +/- %.4f over %d fold(s)\n", r.summary.mean, r.summary.std,
                  r.summary.defined_folds);
    out << buf;
  } else {
    out << "mean C-index undefined (no fold had an admissible pair)\n";
  }
  if (r.summary.degenerate)
    out << "WARNING: degenerate run (" << r.summary.constant_folds << " constant-risk fold(s), "
        << (static_cast<int>(r.folds.size()) - r.summary.defined_folds) << " undefined fold(s))\n";
  return out.str();
}

inline void write_results(const fs::path& dir, const CvResult& r) {
  fs::create_directories(dir);
  std::string lines = json{{"record", "config"}, {"config", r.config.to_json()}}.dump() + '\n';
  for (const auto& f : r.folds) lines += f.to_json().dump() + '\n';
  lines += r.summary.to_json().dump() + '\n';
  io::write_file(dir / "results.jsonl", std::vector<char>(lines.begin(), lines.end()));
  const std::string table = format_summary_table(r);
  io::write_file(dir / "summary.txt", std::vector<char>(table.begin(), table.end()));
}

/// Reads a results.jsonl back (config, folds, summary); checkpoint names
/// are resolved against the file's directory.
inline CvResult read_results(const fs::path& path) {
  const auto bytes = io::read_file(path);
  std::istringstream in(std::string(bytes.begin(), bytes.end()));
  CvResult r;
  bool have_config = false;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw std::invalid_argument(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    const auto kind = j.value("record", "");
    if (kind == "config") {
      r.config = RunConfig::from_json(j.at("config"));
      have_config = true;
    } else if (kind == "fold") {
      FoldResult f;
      f.fold = j.at("fold").get<int>();
      f.c_index_defined = j.at("c_index_defined").get<bool>();
      if (f.c_index_defined) f.c_index = j.at("c_index").get<double>();
      f.constant_risk = j.at("constant_risk").get<bool>();
      f.loss_trajectory = j.at("loss_trajectory").get<std::vector<double>>();
      f.wall_seconds = j.at("wall_seconds").get<double>();
      f.checkpoint = j.at("checkpoint").get<std::string>();
      if (!f.checkpoint.empty()) f.checkpoint = (path.parent_path() / f.checkpoint).string();
      for (const auto& p : j.at("risks")) {
        f.patient_ids.push_back(p.at("patient_id").get<std::string>());
        f.risks.push_back(p.at("risk").get<double>());
        survival::SurvivalLabel l;
        l.event_bin = p.at("event_bin").get<int>();
        l.censorship = p.at("censorship").get<int>();
        l.raw_time = p.at("raw_time").get<double>();
        f.labels.push_back(l);
      }
      r.folds.push_back(std::move(f));
    } else if (kind != "summary") {
      throw std::invalid_argument(path.string() + ":" + std::to_string(lineno) + ": unknown record '" + kind + "'");
    }
  }
  if (!have_config) throw std::invalid_argument(path.string() + ": missing config record");
  r.summary = summarize(r.folds);
  return r;
}

inline CvResult cross_validate(const Cohort& c, const RunConfig& cfg, const CvOptions& opts = {}) {
  cfg.validate();
  CvResult r;
  r.config = cfg;
  for (int fold = 0; fold < c.manifest.num_folds; ++fold) {
    TrainOptions to;
    to.on_epoch = opts.on_epoch;
    if (!opts.output_dir.empty() && opts.write_checkpoints)
      to.checkpoint_path = opts.output_dir / ("fold" + std::to_string(fold) + ".kta");
    try {
      r.folds.push_back(train_fold(c, fold, cfg, to));
    } catch (const std::exception& e) {
      throw std::runtime_error("cross-validation failed in fold " + std::to_string(fold) + ": " + e.what());
    }
    if (opts.on_fold) opts.on_fold(r.folds.back());
  }
  r.summary = summarize(r.folds);
  if (!opts.output_dir.empty()) write_results(opts.output_dir, r);
  return r;
}

// ---------------------------------------------------------------------------
// Ablation

inline std::vector<std::string> default_ablation_masks() { return {"full", "-P", "-G", "-R", "-PBK", "-R-PBK"}; }

struct AblationRow {
  std::string mask;
  CvResult result;
};

/// Runs cross-validation once per mask; the knowledge fallback is switched
/// on exactly for masks without knowledge text.
inline std::vector<AblationRow> run_ablation_suite(const Cohort& c, const RunConfig& base,
                                                   const std::vector<std::string>& masks = default_ablation_masks(),
                                                   const CvOptions& opts = {}) {
  std::vector<AblationRow> rows;
  for (const auto& name : masks) {
    RunConfig cfg = base;
    cfg.mask = ModalityMask::parse(name);
    if (!cfg.mask.has_knowledge_text()) cfg.knowledge_fallback = true;
    CvOptions o = opts;
    if (!opts.output_dir.empty()) o.output_dir = opts.output_dir / cfg.mask.name();
    rows.push_back({cfg.mask.name(), cross_validate(c, cfg, o)});
  }
  return rows;
}

inline std::string format_ablation_table(const std::vector<AblationRow>& rows) {
  std::ostringstream out;
  char buf[160];
  out << "P  G  R  PBK  | C-index (mean +/- std)\n";
  for (const auto& r : rows) {
    const auto m = r.result.config.mask;
    auto mark = [](bool on) { return on ? "x" : "-"; };
    if (r.result.summary.defined_folds > 0)
      std::snprintf(buf, sizeof buf, "%s  %s  %s  %s    | %.4f +/- %.4f   (%s)\n", mark(m.pathology), mark(m.genomic),
                    mark(m.report), mark(m.pbk), r.result.summary.mean, r.result.summary.std, r.mask.c_str());
    else
      std::snprintf(buf, sizeof buf, "%s  %s  %s  %s    | undefined          (%s)\n", mark(m.pathology),
                    mark(m.genomic), mark(m.report), mark(m.pbk), r.mask.c_str());
    out << buf;
  }
  return out.str();
}

inline json ablation_to_json(const std::vector<AblationRow>& rows) {
  json arr = json::array();
  for (const auto& r : rows) {
    json per_fold = json::array();
    for (const auto& f : r.result.folds) per_fold.push_back(f.c_index_defined ? json(f.c_index) : json(nullptr));
    arr.push_back({{"mask", r.mask},
                   {"config", r.result.config.to_json()},
                   {"fold_c_index", per_fold},
                   {"summary", r.result.summary.to_json()}});
  }
  return arr;
}

// ---------------------------------------------------------------------------
// Kaplan-Meier report

struct KmReport {
  double median_risk = 0.0;
  std::vector<survival::KmStep> high;  // risk > median
  std::vector<survival::KmStep> low;
  std::size_t n_high = 0, n_low = 0;
  survival::LogRankResult log_rank;
  bool significant = false;  // p < 0.05
};

namespace detail {

inline std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string km_svg(const KmReport& r) {
  constexpr double W = 640, H = 420, L = 60, R = 20, T = 40, B = 50;
  double t_max = 0.0;
  for (const auto* curve : {&r.high, &r.low})
    for (const auto& s : *curve) t_max = std::max(t_max, s.time);
  if (t_max <= 0.0) t_max = 1.0;
  auto x = [&](double t) { return L + (W - L - R) * t / t_max; };
  auto y = [&](double s) { return T + (H - T - B) * (1.0 - s); };
  auto curve = [&](const std::vector<survival::KmStep>& steps, const char* group, const char* colour) {
    std::string pts, data;
    double prev = 1.0;
    for (std::size_t i = 0; i < steps.size(); ++i) {
      const auto& s = steps[i];
      char buf[96];
      if (i > 0) {
        std::snprintf(buf, sizeof buf, "%.3f,%.3f ", x(s.time), y(prev));
        pts += buf;
      }
      std::snprintf(buf, sizeof buf, "%.3f,%.3f ", x(s.time), y(s.survival));
      pts += buf;
      data += fmt(s.time) + ":" + fmt(s.survival) + " ";
      prev = s.survival;
    }
    if (!pts.empty()) pts.pop_back();
    if (!data.empty()) data.pop_back();
    return std::string("  <polyline class=\"km\" data-group=\"") + group + "\" data-km=\"" + data +
           "\" fill=\"none\" stroke=\"" + colour + "\" stroke-width=\"2\" points=\"" + pts + "\"/>\n";
  };
  char buf[256];
  std::string svg = "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  std::snprintf(buf, sizeof buf,
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%.0f\" height=\"%.0f\" viewBox=\"0 0 %.0f %.0f\">\n",
                W, H, W, H);
  svg += buf;
  svg += "  <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  std::snprintf(buf, sizeof buf,
                "  <line x1=\"%.0f\" y1=\"%.0f\" x2=\"%.0f\" y2=\"%.0f\" stroke=\"black\"/>\n"
                "  <line x1=\"%.0f\" y1=\"%.0f\" x2=\"%.0f\" y2=\"%.0f\" stroke=\"black\"/>\n",
                L, H - B, W - R, H - B, L, T, L, H - B);
  svg += buf;
  std::snprintf(buf, sizeof buf,
                "  <text x=\"%.0f\" y=\"%.0f\" font-size=\"12\" text-anchor=\"middle\">time</text>\n"
                "  <text x=\"14\" y=\"%.0f\" font-size=\"12\" transform=\"rotate(-90 14 %.0f)\" "
                "text-anchor=\"middle\">survival probability</text>\n",
                (L + W - R) / 2, H - 12, (T + H - B) / 2, (T + H - B) / 2);
  svg += buf;
  for (double tick : {0.0, 0.5, 1.0}) {
    std::snprintf(buf, sizeof buf, "  <text x=\"%.0f\" y=\"%.1f\" font-size=\"10\" text-anchor=\"end\">%.1f</text>\n",
                  L - 6, y(tick) + 3, tick);
    svg += buf;
  }
  std::snprintf(buf, sizeof buf, "  <text x=\"%.0f\" y=\"%.0f\" font-size=\"10\">%s</text>\n", W - R - 40, H - B + 14,
                fmt(t_max).substr(0, 8).c_str());
  svg += buf;
  svg += curve(r.high, "high", "#d62728");
  svg += curve(r.low, "low", "#2ca02c");
  std::snprintf(buf, sizeof buf,
                "  <text x=\"%.0f\" y=\"24\" font-size=\"13\">high risk (red, n=%zu) vs low risk (green, n=%zu): "
                "log-rank chi2=%.3f, p=%.3g%s</text>\n",
                L, r.n_high, r.n_low, r.log_rank.statistic, r.log_rank.p_value, r.significant ? " *" : "");
  svg += buf;
  svg += "</svg>\n";
  return svg;
}

}  // namespace detail

/// Median split (high = risk strictly above the median), KM curves per
/// group, log-rank test, optional SVG rendering.
inline KmReport km_report(const std::vector<double>& risks, const std::vector<survival::SurvivalLabel>& labels,
                          const fs::path& svg_path = {}) {
  if (risks.size() != labels.size()) throw std::invalid_argument("km_report: risks and labels differ in length");
  if (risks.empty()) throw std::invalid_argument("km_report: no patients");
  for (double v : risks)
    if (!std::isfinite(v)) throw std::invalid_argument("km_report: non-finite risk");
  if (std::all_of(risks.begin(), risks.end(), [&](double v) { return v == risks.front(); }))
    throw std::invalid_argument("km_report: degenerate split (all risks equal)");
  KmReport r;
  auto sorted = risks;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  r.median_risk = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  std::vector<survival::SurvivalLabel> high, low;
  for (std::size_t i = 0; i < n; ++i) (risks[i] > r.median_risk ? high : low).push_back(labels[i]);
  r.n_high = high.size();
  r.n_low = low.size();
  if (high.size() < 2 || low.size() < 2)
    throw std::invalid_argument("km_report: degenerate split (a median group has fewer than 2 patients)");
  r.high = survival::kaplan_meier(high);
  r.low = survival::kaplan_meier(low);
  r.log_rank = survival::log_rank_test(high, low);
  r.significant = r.log_rank.p_value < 0.05;
  if (!svg_path.empty()) {
    const std::string svg = detail::km_svg(r);
    io::write_file(svg_path, std::vector<char>(svg.begin(), svg.end()));
  }
  return r;
}

}  // namespace kemm::train
