// Command-line front end: synthetic data, knowledge generation, training,
// cross-validation, ablation, KM plots and attention dumps.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "kemm/kemm.hpp"

namespace {

using namespace kemm;
using nlohmann::json;
namespace fs = std::filesystem;

void add_llm_flags(CLI::App& cmd, train::LlmSelection& llm) {
  cmd.add_option("--llm-backend", llm.backend, "fixture (offline) or http")
      ->check(CLI::IsMember({"fixture", "http"}));
  cmd.add_option("--llm-url", llm.url, "chat-completion endpoint (http:// only); token read from KEMM_LLM_API_KEY");
  cmd.add_option("--llm-model", llm.model, "model name sent to the endpoint");
  cmd.add_option("--llm-cache", llm.cache_dir, "response cache directory");
}

struct RunFlags {
  train::RunConfig cfg;
  std::string mask = "full";
  std::string norm = "layernorm";
};

void add_run_flags(CLI::App& cmd, RunFlags& f) {
  auto& c = f.cfg;
  cmd.add_option("--seed", c.seed, "random seed");
  cmd.add_option("--epochs", c.epochs, "training epochs (>= 1)");
  cmd.add_option("--lr-pathology-adapter", c.lr_pathology_adapter, "learning rate of the pathology adapter");
  cmd.add_option("--lr-other", c.lr_other, "learning rate of every other parameter");
  cmd.add_option("--weight-decay", c.weight_decay, "L2 weight decay");
  cmd.add_option("--batch-size", c.batch_size, "patients per optimizer step (gradient accumulation)");
  cmd.add_option("--bins", c.num_bins, "number of hazard bins T");
  cmd.add_option("--d-model", c.dims.d_model, "shared latent width d");
  cmd.add_option("--d-patch", c.dims.d_patch, "patch feature width");
  cmd.add_option("--d-gene", c.dims.d_gene, "gene embedding width");
  cmd.add_option("--d-knowledge", c.dims.d_knowledge, "knowledge token embedding width");
  cmd.add_option("--kecm-heads", c.kecm.heads, "KECM head count");
  cmd.add_option("--kecm-norm", f.norm, "KECM attention normalisation")->check(CLI::IsMember({"off", "layernorm"}));
  cmd.add_flag("--kecm-residual", c.kecm.residual, "add F_K to the KECM output");
  cmd.add_option("--fusion-depth", c.fusion.depth, "fusion transformer depth");
  cmd.add_option("--mask", f.mask, "modality mask: full or a combination of -P -G -R -PBK (write --mask=-R-PBK)");
  cmd.add_flag("--knowledge-fallback", c.knowledge_fallback, "learned queries when R and PBK are both masked");
  cmd.add_option("--max-tokens", c.max_tokens, "knowledge token budget n_K");
  add_llm_flags(cmd, c.llm);
}

train::RunConfig finish(RunFlags& f) {
  f.cfg.mask = ModalityMask::parse(f.mask);
  f.cfg.kecm.norm = kecm::parse_attention_norm(f.norm);
  f.cfg.validate();
  return f.cfg;
}

void print_epoch(int fold, int epoch, double loss) {
  std::fprintf(stderr, "fold %d epoch %3d  loss %.5f\n", fold, epoch + 1, loss);
}

void write_text(const fs::path& path, const std::string& text) {
  io::write_file(path, std::vector<char>(text.begin(), text.end()));
}

int run(int argc, char** argv) {
  CLI::App app{"knowledge-enhanced multimodal survival model"};
  app.require_subcommand(1);

  // synth-data ---------------------------------------------------------------
  synthetic::SyntheticConfig sc;
  std::string synth_out;
  bool synth_raw = false;
  train::LlmSelection synth_llm;
  auto* synth = app.add_subcommand("synth-data", "generate a synthetic cohort with planted risk");
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--patients", sc.num_patients, "cohort size");
  synth->add_option("--seed", sc.seed, "generator seed");
  synth->add_option("--bins", sc.num_bins, "hazard bins T");
  synth->add_option("--folds", sc.num_folds, "cross-validation folds");
  synth->add_option("--cancer-type", sc.cancer_type, "cancer type label");
  synth->add_option("--hazard-coupling", sc.hazard_coupling, "log-hazard = coupling * z");
  synth->add_option("--patch-signal", sc.patch_signal, "patch feature signal strength");
  synth->add_option("--gene-signal", sc.gene_signal, "gene expression signal strength");
  synth->add_option("--text-signal", sc.text_signal, "report keyword signal strength");
  synth->add_option("--censoring", sc.censoring_fraction, "target censoring fraction");
  synth->add_flag("--raw", synth_raw, "skip report refinement and PBK generation");
  add_llm_flags(*synth, synth_llm);

  // pbk-gen / refine-reports ---------------------------------------------------
  std::string pbk_manifest, pbk_cancer;
  train::LlmSelection pbk_llm;
  auto* pbk = app.add_subcommand("pbk-gen", "generate prognostic background knowledge");
  auto* pbk_m = pbk->add_option("--manifest", pbk_manifest, "attach PBK to every patient file of this cohort");
  pbk->add_option("--cancer-type", pbk_cancer, "print the PBK texts for one cancer type")->excludes(pbk_m);
  add_llm_flags(*pbk, pbk_llm);

  std::string refine_manifest;
  train::LlmSelection refine_llm;
  auto* refine = app.add_subcommand("refine-reports", "rewrite pathology reports into the uniform layout");
  refine->add_option("--manifest", refine_manifest, "cohort manifest")->required();
  add_llm_flags(*refine, refine_llm);

  // train / cv / ablate ---------------------------------------------------------
  RunFlags train_flags, cv_flags, ablate_flags;
  std::string train_manifest, train_out, cv_manifest, cv_out, ablate_manifest, ablate_out;
  int train_fold = 0;
  std::vector<std::string> ablate_masks = train::default_ablation_masks();

  auto* trn = app.add_subcommand("train", "train on all folds but one and evaluate it");
  trn->add_option("--manifest", train_manifest, "cohort manifest")->required();
  trn->add_option("--fold", train_fold, "held-out fold")->required();
  trn->add_option("--out", train_out, "output directory")->required();
  add_run_flags(*trn, train_flags);

  auto* cv = app.add_subcommand("cv", "k-fold cross-validation");
  cv->add_option("--manifest", cv_manifest, "cohort manifest")->required();
  cv->add_option("--out", cv_out, "output directory")->required();
  add_run_flags(*cv, cv_flags);

  auto* abl = app.add_subcommand("ablate", "cross-validation per modality mask");
  abl->add_option("--manifest", ablate_manifest, "cohort manifest")->required();
  abl->add_option("--out", ablate_out, "output directory")->required();
  abl->add_option("--masks", ablate_masks, "masks to run (comma separated; write --masks=full,-P)")->delimiter(',');
  add_run_flags(*abl, ablate_flags);

  // km-plot ---------------------------------------------------------------------
  std::string km_results, km_out;
  int km_fold = -1;
  auto* km = app.add_subcommand("km-plot", "median-split Kaplan-Meier curves and log-rank test");
  km->add_option("--results", km_results, "results.jsonl from train or cv")->required();
  km->add_option("--fold", km_fold, "fold to plot (default: every fold, one file each)");
  km->add_option("--out", km_out, "SVG path (with --fold) or output directory")->required();

  // inspect-attn ----------------------------------------------------------------
  std::string attn_results, attn_manifest, attn_patient, attn_branch = "pathology", attn_out;
  int attn_fold = -1;
  auto* attn = app.add_subcommand("inspect-attn", "dump KECM attention weights for one patient");
  attn->add_option("--results", attn_results, "results.jsonl holding the config and checkpoints")->required();
  attn->add_option("--manifest", attn_manifest, "cohort manifest")->required();
  attn->add_option("--patient", attn_patient, "patient id")->required();
  attn->add_option("--fold", attn_fold, "checkpoint fold (default: the fold holding the patient out)");
  attn->add_option("--branch", attn_branch, "pathology or genomic")->check(CLI::IsMember({"pathology", "genomic"}));
  attn->add_option("--out", attn_out, "output JSON path (default: stdout)");

  CLI11_PARSE(app, argc, argv);

  if (*synth) {
    auto cohort = synthetic::generate_cohort(sc);
    if (!synth_raw) {
      auto client = pipeline::make_client(synth_llm);
      pipeline::attach_knowledge(cohort.records, client);
    }
    synthetic::write_cohort(cohort, synth_out);
    std::printf("wrote %zu patients to %s\n", cohort.records.size(), synth_out.c_str());
    return 0;
  }
  if (*pbk) {
    auto client = pipeline::make_client(pbk_llm);
    if (!pbk_manifest.empty()) {
      const auto n = pipeline::attach_knowledge_to_files(pbk_manifest, client, {.refine_reports = false});
      std::printf("attached PBK to %zu patient files\n", n);
    } else {
      if (pbk_cancer.empty()) throw std::invalid_argument("pbk-gen: give --manifest or --cancer-type");
      const auto texts = knowledge::generate_pbk(pbk_cancer, client);
      std::printf("[pathology]\n%s\n\n[genomic]\n%s\n", texts.pathology.c_str(), texts.genomic.c_str());
    }
    return 0;
  }
  if (*refine) {
    auto client = pipeline::make_client(refine_llm);
    const auto n = pipeline::attach_knowledge_to_files(refine_manifest, client, {.generate_pbk = false});
    std::printf("refined %zu reports\n", n);
    return 0;
  }
  if (*trn) {
    const auto cfg = finish(train_flags);
    const auto cohort = train::Cohort::load(fs::path(train_manifest));
    train::TrainOptions opts;
    opts.on_epoch = print_epoch;
    opts.checkpoint_path = fs::path(train_out) / ("fold" + std::to_string(train_fold) + ".kta");
    train::CvResult r;
    r.config = cfg;
    r.folds.push_back(train::train_fold(cohort, train_fold, cfg, opts));
    r.summary = train::summarize(r.folds);
    train::write_results(train_out, r);
    std::cout << train::format_summary_table(r);
    return 0;
  }
  if (*cv) {
    const auto cfg = finish(cv_flags);
    const auto cohort = train::Cohort::load(fs::path(cv_manifest));
    train::CvOptions opts;
    opts.output_dir = cv_out;
    opts.on_epoch = print_epoch;
    const auto r = train::cross_validate(cohort, cfg, opts);
    std::cout << train::format_summary_table(r);
    return r.summary.defined_folds > 0 ? 0 : 2;
  }
  if (*abl) {
    const auto cfg = finish(ablate_flags);
    const auto cohort = train::Cohort::load(fs::path(ablate_manifest));
    train::CvOptions opts;
    opts.output_dir = ablate_out;
    opts.on_epoch = print_epoch;
    const auto rows = train::run_ablation_suite(cohort, cfg, ablate_masks, opts);
    const auto table = train::format_ablation_table(rows);
    write_text(fs::path(ablate_out) / "ablation.txt", table);
    write_text(fs::path(ablate_out) / "ablation.json", train::ablation_to_json(rows).dump(2) + "\n");
    std::cout << table;
    return 0;
  }
  if (*km) {
    const auto r = train::read_results(km_results);
    int failures = 0;
    for (const auto& f : r.folds) {
      if (km_fold >= 0 && f.fold != km_fold) continue;
      const fs::path path = km_fold >= 0 ? fs::path(km_out) : fs::path(km_out) / ("km_fold" + std::to_string(f.fold) + ".svg");
      try {
        const auto rep = train::km_report(f.risks, f.labels, path);
        std::printf("fold %d: high n=%zu low n=%zu  chi2=%.4f  p=%.4g%s  -> %s\n", f.fold, rep.n_high, rep.n_low,
                    rep.log_rank.statistic, rep.log_rank.p_value, rep.significant ? " (p<0.05)" : "",
                    path.string().c_str());
      } catch (const std::exception& e) {
        std::fprintf(stderr, "fold %d: %s\n", f.fold, e.what());
        ++failures;
      }
    }
    if (km_fold >= 0 && std::none_of(r.folds.begin(), r.folds.end(), [&](const auto& f) { return f.fold == km_fold; }))
      throw std::invalid_argument("km-plot: no fold " + std::to_string(km_fold) + " in " + km_results);
    return failures == 0 ? 0 : 1;
  }
  if (*attn) {
    const auto r = train::read_results(attn_results);
    const auto cohort = train::Cohort::load(fs::path(attn_manifest));
    std::size_t idx = cohort.size();
    for (std::size_t i = 0; i < cohort.size(); ++i)
      if (cohort.records[i].patient_id == attn_patient) idx = i;
    if (idx == cohort.size()) throw std::invalid_argument("inspect-attn: unknown patient " + attn_patient);
    const int fold = attn_fold >= 0 ? attn_fold : cohort.manifest.entries[idx].fold;
    const train::FoldResult* fr = nullptr;
    for (const auto& f : r.folds)
      if (f.fold == fold) fr = &f;
    if (!fr || fr->checkpoint.empty())
      throw std::invalid_argument("inspect-attn: results have no checkpoint for fold " + std::to_string(fold));
    const auto model = train::load_checkpoint(fr->checkpoint, r.config, fold);
    const auto prepared = prepare_patient(cohort.records[idx], cohort.gene_table, r.config.model_config(fold));
    const auto branch = attn_branch == "pathology" ? Branch::pathology : Branch::genomic;
    const auto heads = model.attention_weights(prepared, branch);
    json out{{"patient_id", attn_patient}, {"fold", fold}, {"branch", attn_branch}};
    json queries = json::array();
    if (prepared.knowledge.size() > 0)
      for (const auto& tok : prepared.knowledge.tokens) queries.push_back(tok);
    else
      for (int q = 0; q < r.config.fallback_queries; ++q) queries.push_back("<query " + std::to_string(q) + ">");
    out["queries"] = queries;
    json hs = json::array();
    for (const auto& h : heads) {
      json rows = json::array();
      for (Eigen::Index i = 0; i < h.rows(); ++i) {
        json row = json::array();
        for (Eigen::Index j = 0; j < h.cols(); ++j) row.push_back(h(i, j));
        rows.push_back(row);
      }
      hs.push_back(rows);
    }
    out["heads"] = hs;
    const std::string text = out.dump(1) + "\n";
    if (attn_out.empty())
      std::cout << text;
    else
      write_text(attn_out, text);
    return 0;
  }
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
