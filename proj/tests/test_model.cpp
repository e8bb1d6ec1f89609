#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "kemm/encoders.hpp"
#include "kemm/fusion.hpp"
#include "kemm/model.hpp"
#include "tiny.hpp"

using namespace kemm;
using gradcheck::M;
using gradcheck::random_matrix;
using gradcheck::V;

using tiny::TinyPatient;
using tiny::tiny_config;
using tiny::tiny_dims;

namespace {

template <typename Scalar>
Matrix<Scalar> run(const std::function<Var<Scalar>(Tape<Scalar>&)>& f) {
  Tape<Scalar> t(false);
  return f(t).value();
}

}  // namespace

// ----------------------------------------------------------------- encoders

TEST(Encoders, PathologyZeroInputGivesBias) {
  Rng rng(1);
  nn::ParameterSet<double> ps;
  auto enc = encoders::PathologyEncoder<double>::create(ps, tiny_dims(), rng);
  enc.adapter.second.bias->value << 0.1, -0.2, 0.3, 0.4;
  enc.adapter.first.bias->value.setZero();
  // GELU(0) = 0, so the hidden layer is zero and only the final bias remains.
  const M out = run<double>([&](auto& t) { return enc(t, t.constant(M::Zero(3, 6))); });
  ASSERT_EQ(out.rows(), 3);
  for (int r = 0; r < 3; ++r) EXPECT_TRUE((out.row(r).array() == enc.adapter.second.bias->value.array()).all());
}

TEST(Encoders, PathologyRowPermutationEquivariant) {
  Rng rng(2);
  nn::ParameterSet<double> ps;
  auto enc = encoders::PathologyEncoder<double>::create(ps, tiny_dims(), rng);
  const M x = random_matrix(rng, 5, 6);
  M px(5, 6);
  const int perm[] = {3, 0, 4, 1, 2};
  for (int i = 0; i < 5; ++i) px.row(i) = x.row(perm[i]);
  const M y = run<double>([&](auto& t) { return enc(t, t.constant(x)); });
  const M py = run<double>([&](auto& t) { return enc(t, t.constant(px)); });
  for (int i = 0; i < 5; ++i) EXPECT_TRUE((py.row(i).array() == y.row(perm[i]).array()).all());
  EXPECT_THROW(run<double>([&](auto& t) { return enc(t, t.constant(M::Zero(2, 7))); }), std::invalid_argument);
  EXPECT_THROW(run<double>([&](auto& t) { return enc(t, t.constant(M(0, 6))); }), std::invalid_argument);
}

TEST(Encoders, PathologyGradients) {
  Rng rng(3);
  nn::ParameterSet<double> ps;
  auto enc = encoders::PathologyEncoder<double>::create(ps, tiny_dims(), rng);
  const M x = random_matrix(rng, 4, 6);
  EXPECT_LT(gradcheck::worst(gradcheck::check_parameters(
                ps, [&](auto& t) { return gradcheck::project(t, enc(t, t.constant(x))); })),
            1e-4);
  EXPECT_LT(gradcheck::worst(gradcheck::check_inputs(
                {x}, [&](auto& t, const std::vector<V>& v) { return gradcheck::project(t, enc(t, v[0])); })),
            1e-4);
  for (auto* p : ps.all()) EXPECT_EQ(p->group, nn::ParamGroup::pathology_adapter) << p->name;
}

TEST(Encoders, GeneSingleAndPermutation) {
  Rng rng(4);
  nn::ParameterSet<double> ps;
  auto enc = encoders::GeneEncoder<double>::create(ps, tiny_dims(), rng);
  const M emb = random_matrix(rng, 5, 4), val = random_matrix(rng, 5, 1);
  const M one = run<double>([&](auto& t) {
    return enc(t, t.constant(M(emb.topRows(1))), t.constant(M(val.topRows(1))));
  });
  EXPECT_EQ(one.rows(), 1);
  EXPECT_EQ(one.cols(), 4);

  const int perm[] = {2, 4, 0, 1, 3};
  M pe(5, 4), pv(5, 1);
  for (int i = 0; i < 5; ++i) {
    pe.row(i) = emb.row(perm[i]);
    pv.row(i) = val.row(perm[i]);
  }
  const M y = run<double>([&](auto& t) { return enc(t, t.constant(emb), t.constant(val)); });
  const M py = run<double>([&](auto& t) { return enc(t, t.constant(pe), t.constant(pv)); });
  for (int i = 0; i < 5; ++i) EXPECT_LT((py.row(i) - y.row(perm[i])).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Encoders, GeneErrors) {
  Rng rng(5);
  nn::ParameterSet<double> ps;
  auto enc = encoders::GeneEncoder<double>::create(ps, tiny_dims(), rng);
  M val = random_matrix(rng, 2, 1);
  val(1, 0) = std::nan("");
  const M emb = random_matrix(rng, 2, 4);
  EXPECT_THROW(run<double>([&](auto& t) { return enc(t, t.constant(emb), t.constant(val)); }),
               std::invalid_argument);
  EXPECT_THROW(run<double>([&](auto& t) { return enc(t, t.constant(M(0, 4)), t.constant(M(0, 1))); }),
               std::invalid_argument);
  EXPECT_THROW(run<double>([&](auto& t) { return enc(t, t.constant(emb), t.constant(M::Zero(3, 1))); }),
               std::invalid_argument);
}

TEST(Encoders, GeneValueEncoderGradients) {
  Rng rng(6);
  nn::ParameterSet<double> ps;
  auto enc = encoders::GeneEncoder<double>::create(ps, tiny_dims(), rng);
  const M emb = random_matrix(rng, 5, 4), val = random_matrix(rng, 5, 1);
  const auto errors = gradcheck::check_parameters(
      ps, [&](auto& t) { return gradcheck::project(t, enc(t, t.constant(emb), t.constant(val))); });
  for (const auto& [name, err] : errors) EXPECT_LT(err, 1e-4) << name;
  EXPECT_LT(gradcheck::worst(gradcheck::check_inputs({val}, [&](auto& t, const std::vector<V>& v) {
              return gradcheck::project(t, enc(t, t.constant(emb), v[0]));
            })),
            1e-4);
}

TEST(Encoders, KnowledgeIdentityAndLinearity) {
  Rng rng(7);
  auto dims = tiny_dims();
  dims.d_knowledge = dims.d_model;
  nn::ParameterSet<double> ps;
  auto enc = encoders::KnowledgeAdapter<double>::create(ps, dims, rng, /*with_bias=*/false);
  const M x = random_matrix(rng, 3, 4);
  const M y = run<double>([&](auto& t) { return enc(t, t.constant(x)); });
  const M y3 = run<double>([&](auto& t) { return enc(t, t.constant(M(2.5 * x))); });
  EXPECT_LT((y3 - 2.5 * y).cwiseAbs().maxCoeff(), 1e-12);
  enc.adapter.weight->value.setIdentity();
  EXPECT_TRUE((run<double>([&](auto& t) { return enc(t, t.constant(x)); }).array() == x.array()).all());
  EXPECT_THROW(run<double>([&](auto& t) { return enc(t, t.constant(M(0, 4))); }), std::invalid_argument);
  EXPECT_THROW(run<double>([&](auto& t) { return enc(t, t.constant(M::Zero(1, 5))); }), std::invalid_argument);
}

TEST(Encoders, KnowledgeGradients) {
  Rng rng(8);
  nn::ParameterSet<double> ps;
  auto enc = encoders::KnowledgeAdapter<double>::create(ps, tiny_dims(), rng);
  const M x = random_matrix(rng, 3, 5);
  EXPECT_LT(gradcheck::worst(gradcheck::check_parameters(
                ps, [&](auto& t) { return gradcheck::project(t, enc(t, t.constant(x))); })),
            1e-4);
}

// ------------------------------------------------------------------- fusion

TEST(Fusion, ShapeArithmetic) {
  Rng rng(9);
  nn::ParameterSet<double> ps;
  fusion::FusionConfig cfg;
  cfg.heads = 1;
  auto head = fusion::FusionHead<double>::create(ps, 3, 4, true, true, cfg, rng);
  const M fused = run<double>([&](auto& t) {
    return head.fuse(t, t.constant(random_matrix(rng, 2, 3)), t.constant(random_matrix(rng, 2, 3)),
                     t.constant(random_matrix(rng, 2, 3)));
  });
  EXPECT_EQ(fused.rows(), 2);
  EXPECT_EQ(fused.cols(), 9);
  EXPECT_EQ(head.classifier_width(), 9);
  EXPECT_THROW(run<double>([&](auto& t) {
                 return head.fuse(t, t.constant(random_matrix(rng, 3, 3)), t.constant(random_matrix(rng, 2, 3)),
                                  t.constant(random_matrix(rng, 2, 3)));
               }),
               std::invalid_argument);
  EXPECT_THROW(run<double>([&](auto& t) {
                 return head.fuse(t, std::nullopt, t.constant(random_matrix(rng, 2, 3)),
                                  t.constant(random_matrix(rng, 2, 3)));
               }),
               std::invalid_argument);
}

TEST(Fusion, IdentityTransformersLayout) {
  Rng rng(10);
  nn::ParameterSet<double> ps;
  fusion::FusionConfig cfg;
  cfg.positional_encoding = false;
  auto head = fusion::FusionHead<double>::create(ps, 4, 4, true, true, cfg, rng);
  head.pathology->make_identity();
  head.genomic->make_identity();
  const M fk = random_matrix(rng, 3, 4), fg = random_matrix(rng, 3, 4);
  const M fused = run<double>(
      [&](auto& t) { return head.fuse(t, t.constant(M::Zero(3, 4)), t.constant(fk), t.constant(fg)); });
  EXPECT_TRUE(fused.leftCols(4).isZero(0.0));
  EXPECT_TRUE((fused.middleCols(4, 4).array() == fk.array()).all());
  EXPECT_TRUE((fused.rightCols(4).array() == fg.array()).all());
}

TEST(Fusion, PoolingConstantRowsAndDuplication) {
  Rng rng(11);
  nn::ParameterSet<double> ps;
  auto head = fusion::FusionHead<double>::create(ps, 4, 4, true, true, {}, rng);
  const M row = random_matrix(rng, 1, 12);
  const M pooled = run<double>([&](auto& t) { return nn::mean_rows(t.constant(M(row.replicate(5, 1)))); });
  EXPECT_TRUE((pooled.array() == row.array()).all());

  const M x = random_matrix(rng, 7, 12);
  M dup(14, 12), perm(7, 12);
  for (int i = 0; i < 7; ++i) {
    dup.row(2 * i) = x.row(i);
    dup.row(2 * i + 1) = x.row(i);
    perm.row(i) = x.row((3 * i + 2) % 7);
  }
  auto logits = [&](const M& f) { return run<double>([&](auto& t) { return head.pool_and_classify(t, t.constant(f)); }); };
  const M base = logits(x);
  EXPECT_TRUE((logits(dup).array() == base.array()).all());
  EXPECT_TRUE((logits(perm).array() == base.array()).all());
  EXPECT_EQ(base.rows(), 1);
  EXPECT_EQ(base.cols(), 4);
  EXPECT_THROW(logits(M(0, 12)), std::invalid_argument);
  EXPECT_THROW(logits(M::Zero(2, 8)), std::invalid_argument);
}

// -------------------------------------------------------------------- model

TEST(Model, MaskParseAndName) {
  for (const std::string s : {"full", "-P", "-G", "-R", "-PBK", "-R-PBK", "-P-G"})
    EXPECT_EQ(ModalityMask::parse(s).name(), s);
  EXPECT_THROW(ModalityMask::parse("-X"), std::invalid_argument);
  EXPECT_FALSE(ModalityMask::parse("-R-PBK").has_knowledge_text());
}

TEST(Model, FullMaskMatchesPlainForward) {
  TinyPatient p;
  auto plain_cfg = tiny_config();
  auto masked_cfg = tiny_config();
  masked_cfg.mask = ModalityMask::parse("full");
  KemmModel<double> plain(plain_cfg), masked(masked_cfg);
  const auto a = plain.predict_logits(prepare_patient(p.record, p.table, plain_cfg));
  const auto b = masked.predict_logits(prepare_patient(p.record, p.table, masked_cfg));
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.size(), 4u);
}

TEST(Model, DroppingModalitiesShrinksClassifier) {
  TinyPatient p;
  for (const auto& [spec, width] : std::vector<std::pair<std::string, int>>{{"full", 12}, {"-P", 8}, {"-G", 8}, {"-P-G", 4}}) {
    auto cfg = tiny_config();
    cfg.mask = ModalityMask::parse(spec);
    KemmModel<double> m(cfg);
    EXPECT_EQ(m.fusion_head().classifier_width(), width) << spec;
    EXPECT_EQ(m.kecm_block(Branch::pathology).has_value(), cfg.mask.pathology);
    EXPECT_EQ(m.kecm_block(Branch::genomic).has_value(), cfg.mask.genomic);
    const auto prepared = prepare_patient(p.record, p.table, cfg);
    Tape<double> t(false);
    auto f = m.forward(t, prepared);
    EXPECT_EQ(f.fused.cols(), width);
    EXPECT_EQ(f.logits.cols(), 4);
    bool has_pathology_param = false;
    for (auto* param : m.parameters().all())
      has_pathology_param |= param->group == nn::ParamGroup::pathology_adapter;
    EXPECT_EQ(has_pathology_param, cfg.mask.pathology);
  }
}

TEST(Model, DroppingPbkShrinksKnowledgeBySpan) {
  TinyPatient p;
  p.record.pbk_pathology = "high grade tumor";
  p.record.pbk_genomic = "TP53 mutation";
  auto full = tiny_config();
  auto no_pbk = tiny_config();
  no_pbk.mask = ModalityMask::parse("-PBK");
  auto no_r = tiny_config();
  no_r.mask = ModalityMask::parse("-R");
  const auto a = prepare_patient(p.record, p.table, full);
  const auto b = prepare_patient(p.record, p.table, no_pbk);
  const auto c = prepare_patient(p.record, p.table, no_r);
  EXPECT_EQ(a.knowledge.size(), 7);
  EXPECT_EQ(a.knowledge.size() - b.knowledge.size(), a.knowledge.spans.pbk_size());
  EXPECT_EQ(a.knowledge.size() - c.knowledge.size(), a.knowledge.spans.report.size());
  KemmModel<double> m(no_pbk);
  Tape<double> t(false);
  EXPECT_EQ(m.forward(t, b).knowledge.rows(), 2);
}

TEST(Model, NoKnowledgeNeedsFallback) {
  TinyPatient p;
  auto cfg = tiny_config();
  cfg.mask = ModalityMask::parse("-R-PBK");
  try {
    prepare_patient(p.record, p.table, cfg);
    FAIL() << "expected an error";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("knowledge_fallback"), std::string::npos) << e.what();
  }
  cfg.knowledge_fallback = true;
  cfg.fallback_queries = 3;
  KemmModel<double> m(cfg);
  const auto prepared = prepare_patient(p.record, p.table, cfg);
  EXPECT_EQ(prepared.knowledge.size(), 0);
  Tape<double> t(false);
  auto f = m.forward(t, prepared);
  EXPECT_EQ(f.knowledge.rows(), 3);
  EXPECT_EQ(f.fused.rows(), 3);
}

TEST(Model, PrepareChecksWidths) {
  TinyPatient p;
  auto cfg = tiny_config();
  cfg.dims.d_patch = 7;
  EXPECT_THROW(prepare_patient(p.record, p.table, cfg), std::invalid_argument);
  cfg = tiny_config();
  cfg.dims.d_gene = 6;
  EXPECT_THROW(prepare_patient(p.record, p.table, cfg), std::invalid_argument);
}

TEST(Model, SameSeedSameParameters) {
  KemmModel<float> a(tiny_config()), b(tiny_config());
  auto cfg = tiny_config();
  cfg.init_seed = 6;
  KemmModel<float> c(cfg);
  bool all_equal = true, any_diff = false;
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    const auto& pa = *a.parameters().all()[i];
    all_equal &= (pa.value.array() == b.parameters().all()[i]->value.array()).all();
    any_diff |= !(pa.value.array() == c.parameters().all()[i]->value.array()).all();
  }
  EXPECT_TRUE(all_equal);
  EXPECT_TRUE(any_diff);
}

TEST(Model, AttentionWeightsPerBranch) {
  TinyPatient p;
  auto cfg = tiny_config();
  KemmModel<double> m(cfg);
  const auto prepared = prepare_patient(p.record, p.table, cfg);
  const auto wp = m.attention_weights(prepared, Branch::pathology);
  const auto wg = m.attention_weights(prepared, Branch::genomic);
  ASSERT_EQ(wp.size(), 2u);
  EXPECT_EQ(wp[0].rows(), 3);
  EXPECT_EQ(wp[0].cols(), 4);
  EXPECT_EQ(wg[0].cols(), 5);
  for (const auto& w : wp)
    for (int r = 0; r < 3; ++r) EXPECT_NEAR(w.row(r).sum(), 1.0, 1e-12);
}

TEST(Model, FullPipelineGradient) {
  TinyPatient p;
  auto cfg = tiny_config();
  KemmModel<double> m(cfg);
  const auto prepared = prepare_patient(p.record, p.table, cfg);
  ASSERT_EQ(prepared.patches.rows(), 4);
  ASSERT_EQ(prepared.gene_values.rows(), 5);
  ASSERT_EQ(prepared.knowledge.size(), 3);
  for (int censored = 0; censored <= 1; ++censored) {
    auto label = prepared.label;
    label.censorship = censored;
    const auto errors = gradcheck::check_parameters(
        m.parameters(), [&](Tape<double>& t) { return nn::surv_nll(m.forward(t, prepared).logits, label); });
    for (const auto& [name, err] : errors) EXPECT_LT(err, 1e-4) << name << " censored=" << censored;
  }
}

TEST(Model, EveryParameterGetsGradient) {
  TinyPatient p;
  auto cfg = tiny_config();
  KemmModel<double> m(cfg);
  const auto prepared = prepare_patient(p.record, p.table, cfg);
  m.parameters().zero_grad();
  Tape<double> t;
  t.backward(nn::surv_nll(m.forward(t, prepared).logits, prepared.label));
  t.accumulate_parameter_grads();
  for (auto* param : m.parameters().all()) EXPECT_GT(param->grad.cwiseAbs().maxCoeff(), 0.0) << param->name;
}
