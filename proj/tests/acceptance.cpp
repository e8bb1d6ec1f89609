// Acceptance suite: one PASS/FAIL line per criterion, exit code 0 only when
// every criterion passes.

#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "cohorts.hpp"
#include "gradcheck.hpp"
#include "kemm/kemm.hpp"
#include "oracles.hpp"
#include "tiny.hpp"

namespace fs = std::filesystem;
using namespace kemm;
using gradcheck::M;
using gradcheck::random_matrix;
using gradcheck::V;

// ---------------------------------------------------------------------------
// Network guard. This definition interposes the C library's socket() for
// every call made from this binary, including the header-only HTTP client.
// Fixture mode must never reach it.

namespace {
std::atomic<int> g_socket_calls{0};
}

extern "C" int socket(int, int, int) noexcept {
  ++g_socket_calls;
  errno = EACCES;
  return -1;
}

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  int id;
  std::string name;
  std::function<Outcome()> run;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

fs::path scratch_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("kemm_acceptance_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::vector<survival::SurvivalLabel> manifest_labels(const train::Cohort& c) {
  std::vector<survival::SurvivalLabel> out;
  for (const auto& e : c.manifest.entries) out.push_back(e.label);
  return out;
}

// ------------------------------------------------------------- criterion 1

Outcome survival_oracles() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(2024);
  int instances = 0, c_index_cases = 0, km_cases = 0, log_rank_cases = 0;
  double worst_survival = 0, worst_nll = 0, worst_km = 0, worst_lr = 0;
  int c_mismatch = 0, km_shape_mismatch = 0, undefined_mismatch = 0;
  for (int trial = 0; trial < 300; ++trial) {
    ++instances;
    const int bins = 1 + static_cast<int>(rng.below(6));
    std::vector<double> hazards, logits;
    for (int t = 0; t < bins; ++t) {
      logits.push_back(4.0 * rng.normal());
      hazards.push_back(rng.uniform());
    }
    const auto s = survival::survival_from_hazard(hazards);
    const auto s_oracle = oracle::survival_loop(hazards);
    for (int t = 0; t < bins; ++t) worst_survival = std::max(worst_survival, std::abs(s[t] - s_oracle[t]));

    survival::SurvivalLabel label;
    label.event_bin = static_cast<int>(rng.below(static_cast<std::uint64_t>(bins)));
    label.censorship = rng.uniform() < 0.4 ? 1 : 0;
    label.raw_time = 1.0;
    const double nll = survival::nll_surv_loss<double>(std::span<const double>(logits), label);
    worst_nll = std::max(worst_nll, std::abs(nll - oracle::nll_direct(logits, label)));

    const int n = 2 + static_cast<int>(rng.below(40));
    const auto labels = oracle::random_labels(rng, n, 4, 10, 0.35);
    std::vector<double> risks;
    for (int i = 0; i < n; ++i) risks.push_back(static_cast<double>(rng.below(6)));  // many ties
    const double c_oracle = oracle::c_index_pairs(risks, labels);
    try {
      const double c = survival::concordance_index(risks, labels);
      ++c_index_cases;
      if (std::isnan(c_oracle) || c != c_oracle) ++c_mismatch;
    } catch (const survival::UndefinedStatistic&) {
      if (!std::isnan(c_oracle)) ++undefined_mismatch;
    }

    const auto km = survival::kaplan_meier(labels);
    const auto km_oracle = oracle::km_table(labels);
    ++km_cases;
    if (km.size() != km_oracle.size()) {
      ++km_shape_mismatch;
    } else {
      for (std::size_t i = 0; i < km.size(); ++i) {
        if (km[i].time != km_oracle[i].first) ++km_shape_mismatch;
        worst_km = std::max(worst_km, std::abs(km[i].survival - km_oracle[i].second));
      }
    }

    std::vector<survival::SurvivalLabel> a(labels.begin(), labels.begin() + n / 2), b(labels.begin() + n / 2,
                                                                                      labels.end());
    const auto sums = oracle::log_rank_table(a, b);
    if (sums.variance > 0) {
      const auto lr = survival::log_rank_test(a, b);
      ++log_rank_cases;
      worst_lr = std::max({worst_lr, std::abs(lr.statistic - sums.statistic),
                           std::abs(lr.p_value - std::erfc(std::sqrt(sums.statistic / 2.0)))});
    }
  }
  const double secs = seconds_since(t0);
  const bool pass = c_index_cases >= 100 && km_cases >= 100 && log_rank_cases >= 100 && c_mismatch == 0 &&
                    undefined_mismatch == 0 && km_shape_mismatch == 0 && worst_survival <= 1e-6 &&
                    worst_nll <= 1e-6 && worst_km <= 1e-6 && worst_lr <= 1e-6 && secs < 30;
  return {pass, fmt("%d instances (C-index %d, KM %d, log-rank %d); C mismatches %d; max err survival %.1e, nll "
                    "%.1e, KM %.1e, log-rank %.1e; %.2f s",
                    instances, c_index_cases, km_cases, log_rank_cases, c_mismatch + undefined_mismatch,
                    worst_survival, worst_nll, worst_km, worst_lr, secs)};
}

// ------------------------------------------------------------- criterion 2

Outcome gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(7);
  double nll_err = 0;
  for (int trial = 0; trial < 40; ++trial) {
    survival::SurvivalLabel label;
    label.event_bin = trial % 4;
    label.censorship = (trial / 4) % 2;
    label.raw_time = 1.0;
    nll_err = std::max(nll_err, gradcheck::worst(gradcheck::check_inputs(
                                    {random_matrix(rng, 1, 4, 2.0)},
                                    [&](auto&, const std::vector<V>& x) { return nn::surv_nll(x[0], label); })));
  }

  double kecm_err = 0;
  for (auto norm : {kecm::AttentionNorm::off, kecm::AttentionNorm::layernorm}) {
    nn::ParameterSet<double> ps;
    kecm::KecmConfig cfg;
    cfg.norm = norm;
    auto stack = kecm::AttentionStack<double>::create(ps, "kecm", 4, cfg, rng);
    stack.norm.gamma->value(0, 0) = 1.3;
    stack.norm.beta->value(0, 0) = 0.2;
    const M fk = random_matrix(rng, 3, 4), fx = random_matrix(rng, 5, 4);
    kecm_err = std::max(kecm_err, gradcheck::worst(gradcheck::check_inputs(
                                      {fk, fx}, [&](auto& t, const std::vector<V>& x) {
                                        return gradcheck::project(t, stack(t, x[0], x[1]));
                                      })));
    for (const auto& [name, err] : gradcheck::check_parameters(ps, [&](nn::Tape<double>& t) {
           return gradcheck::project(t, stack(t, t.constant(fk), t.constant(fx)));
         }))
      if (norm == kecm::AttentionNorm::layernorm || name.find(".norm.") == std::string::npos)
        kecm_err = std::max(kecm_err, err);
  }

  tiny::TinyPatient p;
  const auto cfg = tiny::tiny_config();
  KemmModel<double> model(cfg);
  const auto prepared = prepare_patient(p.record, p.table, cfg);
  const bool shape_ok = prepared.patches.rows() == 4 && prepared.gene_values.rows() == 5 &&
                        prepared.knowledge.size() == 3 && cfg.dims.d_model == 4 && cfg.num_bins == 4;
  double pipeline_err = 0;
  std::size_t pipeline_params = 0;
  for (int censored = 0; censored <= 1; ++censored) {
    auto label = prepared.label;
    label.censorship = censored;
    const auto errors = gradcheck::check_parameters(model.parameters(), [&](nn::Tape<double>& t) {
      return nn::surv_nll(model.forward(t, prepared).logits, label);
    });
    pipeline_err = std::max(pipeline_err, gradcheck::worst(errors));
    pipeline_params = errors.size();
  }
  const double secs = seconds_since(t0);
  const bool pass = shape_ok && nll_err < 1e-4 && kecm_err < 1e-4 && pipeline_err < 1e-4 && secs < 60;
  return {pass, fmt("max rel err: nll %.2e, KECM (inputs + W_q/W_k/W_v/norm) %.2e, full pipeline (%zu tensors) "
                    "%.2e; %.2f s",
                    nll_err, kecm_err, pipeline_params, pipeline_err, secs)};
}

// ------------------------------------------------------------- criterion 3

template <typename Scalar>
bool pooling_exact(Rng& rng, int trials) {
  using Mat = nn::Matrix<Scalar>;
  nn::ParameterSet<Scalar> ps;
  auto head = fusion::FusionHead<Scalar>::create(ps, 4, 4, true, true, {}, rng);
  for (int trial = 0; trial < trials; ++trial) {
    const int n = 1 + static_cast<int>(rng.below(40));
    Mat x(n, 12);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = static_cast<Scalar>(rng.normal() * 3.0);
    std::vector<int> perm(n);
    for (int i = 0; i < n; ++i) perm[i] = i;
    rng.shuffle(perm);
    const int k = 2 + static_cast<int>(rng.below(3));
    Mat px(n, 12), dx(n * k, 12);
    for (int i = 0; i < n; ++i) px.row(i) = x.row(perm[i]);
    for (int i = 0; i < n * k; ++i) dx.row(i) = x.row(i % n);
    auto logits = [&](const Mat& f) {
      nn::Tape<Scalar> t(false);
      return Mat(head.pool_and_classify(t, t.constant(f)).value());
    };
    const Mat base = logits(x);
    if (!(logits(px).array() == base.array()).all() || !(logits(dx).array() == base.array()).all()) return false;
  }
  return true;
}

Outcome structure() {
  Rng rng(33);
  nn::ParameterSet<double> ps;
  auto stack = kecm::AttentionStack<double>::create(ps, "kecm", 8, {}, rng);
  bool rows_ok = true;
  double perm_err = 0, sum_err = 0;
  for (int trial = 0; trial < 30; ++trial) {
    const int nk = 1 + static_cast<int>(rng.below(9));
    const M fk = random_matrix(rng, nk, 8);
    for (int nx : {1, 7, 64}) {
      const M fx = random_matrix(rng, nx, 8, 2.0);
      nn::Tape<double> t(false);
      const M out = stack(t, t.constant(fk), t.constant(fx)).value();
      rows_ok &= out.rows() == nk && out.cols() == 8;
      std::vector<int> perm(nx);
      for (int i = 0; i < nx; ++i) perm[i] = i;
      rng.shuffle(perm);
      M px(nx, 8);
      for (int i = 0; i < nx; ++i) px.row(i) = fx.row(perm[i]);
      nn::Tape<double> t2(false);
      perm_err = std::max(perm_err, (stack(t2, t2.constant(fk), t2.constant(px)).value() - out).cwiseAbs().maxCoeff());
      for (const auto& a : kecm::attention_weights(stack, fk, fx))
        for (int r = 0; r < a.rows(); ++r) sum_err = std::max(sum_err, std::abs(a.row(r).sum() - 1.0));
    }
  }
  const bool pool_ok = pooling_exact<float>(rng, 200) && pooling_exact<double>(rng, 200);
  const bool pass = rows_ok && perm_err <= 1e-6 && sum_err <= 1e-6 && pool_ok;
  return {pass, fmt("n_K rows for n_X in {1,7,64}: %s; key-permutation max diff %.1e; attention row-sum err %.1e; "
                    "pooling permutation/duplication bit-exact: %s",
                    rows_ok ? "yes" : "NO", perm_err, sum_err, pool_ok ? "yes" : "NO")};
}

// ------------------------------------------------------------- criterion 4

struct LearningRun {
  testing_cohorts::Built built;
  train::CvResult cv;
  double cv_seconds = 0;
};

Outcome learning(LearningRun& run) {
  run.built = testing_cohorts::build(testing_cohorts::small(500));
  const auto labels = manifest_labels(run.built.cohort);
  const double ceiling = survival::concordance_index(run.built.latent_risk, labels);
  const train::RunConfig cfg;
  auto t0 = std::chrono::steady_clock::now();
  run.cv = train::cross_validate(run.built.cohort, cfg);
  run.cv_seconds = seconds_since(t0);
  const auto shuffled = train::cross_validate(train::shuffle_labels(run.built.cohort, 99), cfg);
  std::string folds;
  for (const auto& f : run.cv.folds) folds += fmt("%.3f ", f.c_index);
  const bool pass = run.cv.summary.defined_folds == 5 && run.cv.summary.mean >= 0.70 && ceiling >= 0.85 &&
                    std::abs(shuffled.summary.mean - 0.5) <= 0.05 && run.cv_seconds < 300;
  return {pass, fmt("mean C %.4f +/- %.4f (folds %s); ground-truth C %.4f; shuffled-label C %.4f; CV %.1f s",
                    run.cv.summary.mean, run.cv.summary.std, folds.c_str(), ceiling, shuffled.summary.mean,
                    run.cv_seconds)};
}

// ------------------------------------------------------------- criterion 5

synthetic::SyntheticConfig knowledge_only_cohort() {
  auto cfg = testing_cohorts::small(500, 11);
  cfg.patch_signal = 0;
  cfg.gene_signal = 0;
  // With the default 8 keyword slots the risk words are ~8% of the ~105
  // knowledge tokens and are drowned out in the pooled sequence; 32 slots
  // make the report the dominant part of K.
  cfg.keyword_slots = 32;
  return cfg;
}

synthetic::SyntheticConfig patch_only_cohort() {
  auto cfg = testing_cohorts::small(500, 12);
  cfg.text_signal = 0;
  cfg.gene_signal = 0;
  return cfg;
}

Outcome ablation() {
  const train::RunConfig cfg;
  const auto knowledge = train::run_ablation_suite(testing_cohorts::build(knowledge_only_cohort()).cohort, cfg,
                                                   {"full", "-R-PBK"});
  const auto patch =
      train::run_ablation_suite(testing_cohorts::build(patch_only_cohort()).cohort, cfg, {"full", "-P"});
  const double k_full = knowledge[0].result.summary.mean, k_none = knowledge[1].result.summary.mean;
  const double p_full = patch[0].result.summary.mean, p_drop = patch[1].result.summary.mean;
  const bool pass = k_full >= 0.70 && k_none <= 0.55 && p_full - p_drop >= 0.10;
  return {pass, fmt("knowledge-only cohort: full %.4f, -R-PBK %.4f; patch-only cohort: full %.4f, -P %.4f (drop %.4f)",
                    k_full, k_none, p_full, p_drop, p_full - p_drop)};
}

// ------------------------------------------------------------- criterion 6

Outcome kaplan_meier(const LearningRun& run) {
  if (run.cv.folds.empty()) return {false, "criterion 4 produced no folds"};
  const auto dir = scratch_dir("km");
  int significant = 0;
  std::string ps;
  for (const auto& f : run.cv.folds) {
    try {
      const auto r = train::km_report(f.risks, f.labels, dir / ("fold" + std::to_string(f.fold) + ".svg"));
      significant += r.significant;
      ps += fmt("%.2g ", r.log_rank.p_value);
    } catch (const std::exception& e) {
      ps += std::string("error(") + e.what() + ") ";
    }
  }
  fs::remove_all(dir);
  return {significant >= 4, fmt("log-rank p per fold: %s-> %d/5 significant", ps.c_str(), significant)};
}

// ------------------------------------------------------------- criterion 7

bool same_bytes(const fs::path& a, const std::vector<char>& b) { return io::read_file(a) == b; }

Outcome hygiene(const LearningRun& run) {
  std::vector<std::string> problems;
  const train::RunConfig cfg;

  // Determinism: retrain fold 0 of criterion 4.
  bool deterministic = false;
  if (!run.cv.folds.empty()) {
    const auto again = train::train_fold(run.built.cohort, 0, cfg);
    deterministic = again.same_outcome(run.cv.folds[0]);
  }
  if (!deterministic) problems.push_back("fold 0 not reproduced bit-for-bit");

  // Optimizer groups.
  train::Model model(cfg.model_config(0));
  train::Adam<float> adam(model.parameters().all(), cfg);
  int adapter = 0, other = 0;
  bool audit_ok = true;
  for (const auto& [name, lr] : adam.group_audit()) {
    const bool is_adapter = name.rfind("pathology.adapter.", 0) == 0;
    (is_adapter ? adapter : other)++;
    audit_ok &= lr == (is_adapter ? 2e-4 : 2e-5);
  }
  audit_ok &= adapter > 0 && other > 0;
  if (!audit_ok) problems.push_back("optimizer group audit failed");

  // File round trips.
  const auto dir = scratch_dir("files");
  bool files_ok = true;
  {
    auto syn = synthetic::generate_cohort(testing_cohorts::small(40, 5));
    synthetic::write_cohort(syn, dir / "cohort");
    const auto manifest_path = dir / "cohort" / "manifest.jsonl";
    const auto m = data::load_manifest(manifest_path);
    const std::string text = data::format_manifest(m);
    files_ok &= same_bytes(manifest_path, std::vector<char>(text.begin(), text.end()));
    for (const auto& e : m.entries) {
      const auto path = m.resolve(e.path);
      files_ok &= same_bytes(path, data::encode_patient(data::read_patient_file(path)));
    }
    const auto table_path = m.resolve(m.gene_table);
    data::GeneEmbeddingTable::load(table_path).save(dir / "table_copy.kta");
    files_ok &= io::read_file(table_path) == io::read_file(dir / "table_copy.kta");
    train::save_checkpoint(dir / "ckpt.kta", model);
    train::save_checkpoint(dir / "ckpt_copy.kta", train::load_checkpoint(dir / "ckpt.kta", cfg, 0));
    files_ok &= io::read_file(dir / "ckpt.kta") == io::read_file(dir / "ckpt_copy.kta");
    if (!run.cv.folds.empty()) {
      train::write_results(dir / "results", run.cv);
      const auto back = train::read_results(dir / "results" / "results.jsonl");
      train::write_results(dir / "results_copy", back);
      files_ok &= io::read_file(dir / "results" / "results.jsonl") ==
                  io::read_file(dir / "results_copy" / "results.jsonl");
    }
  }
  if (!files_ok) problems.push_back("file round trip not bit-exact");

  // Fixture mode end to end with the network guard armed.
  const int sockets_before = g_socket_calls.load();
  long long fixture_requests = 0;
  bool pipeline_ok = false;
  {
    synthetic::write_cohort(synthetic::generate_cohort(testing_cohorts::small(30, 6)), dir / "offline");
    knowledge::KnowledgeClient client(pipeline::make_backend(cfg.llm), dir / "cache");
    pipeline::attach_knowledge_to_files(dir / "offline" / "manifest.jsonl", client, {});
    fixture_requests = client.backend_requests();
    auto quick = cfg;
    quick.epochs = 1;
    const auto result = train::cross_validate(train::Cohort::load(dir / "offline" / "manifest.jsonl"), quick);
    pipeline_ok = result.folds.size() == 5;
  }
  const int offline_sockets = g_socket_calls.load() - sockets_before;
  // The guard itself must be live: an HTTP backend call has to hit it.
  bool guard_live = false;
  {
    knowledge::HttpBackendConfig hc;
    hc.url = "http://127.0.0.1:9/v1/chat/completions";
    hc.timeout_seconds = 1;
    knowledge::KnowledgeClient http(std::make_shared<knowledge::HttpBackend>(hc), {}, {1, {}});
    try {
      http.complete("ping");
    } catch (const knowledge::BackendError&) {
    }
    guard_live = g_socket_calls.load() > sockets_before + offline_sockets;
  }
  fs::remove_all(dir);
  if (!pipeline_ok || offline_sockets != 0 || !guard_live) problems.push_back("offline pipeline check failed");

  std::string detail = fmt("determinism %s; lr audit %d adapter tensors @2e-4, %d others @2e-5 %s; file round trips "
                           "%s; fixture pipeline: %lld backend requests, %d sockets opened (guard live: %s)",
                           deterministic ? "bit-exact" : "MISMATCH", adapter, other, audit_ok ? "ok" : "BAD",
                           files_ok ? "bit-exact" : "MISMATCH", fixture_requests, offline_sockets,
                           guard_live ? "yes" : "no");
  return {problems.empty(), detail};
}

}  // namespace

int main(int argc, char** argv) {
  // Optional criterion filter, e.g. `acceptance 1 2 3`.
  std::vector<int> only;
  for (int i = 1; i < argc; ++i) only.push_back(std::atoi(argv[i]));
  auto wanted = [&](int id) { return only.empty() || std::find(only.begin(), only.end(), id) != only.end(); };

  LearningRun learning_run;
  const std::vector<Criterion> criteria{
      {1, "survival math vs brute-force oracles", survival_oracles},
      {2, "analytic gradients vs central differences", gradients},
      {3, "structural invariants (KECM, attention, pooling)", structure},
      {4, "end-to-end learning on N=500 synthetic cohort", [&] { return learning(learning_run); }},
      {5, "ablation directionality", ablation},
      {6, "median-split KM / log-rank on held-out risks", [&] { return kaplan_meier(learning_run); }},
      {7, "determinism and hygiene", [&] { return hygiene(learning_run); }},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    if (!wanted(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("[%s] criterion %d: %s -- %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", c.id, c.name.c_str(),
                o.detail.c_str(), seconds_since(t0));
    std::fflush(stdout);
  }
  std::printf("%s\n", failed == 0 ? "ALL ACCEPTANCE CRITERIA PASSED" : "ACCEPTANCE FAILURES PRESENT");
  return failed == 0 ? 0 : 1;
}
