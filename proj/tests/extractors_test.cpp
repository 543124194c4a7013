#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "dann/extractors.hpp"
#include "grad_check.hpp"

namespace dann {
namespace {

using testing::grad_check;
using testing::random_tensor;

constexpr std::size_t kVocab = 10;

Tensor sum_probe(Rng& rng, Shape shape) { return random_tensor(rng, std::move(shape)); }

// Scalar loss sum(z * probe) so every output element gets a distinct weight.
Var probe_loss(Graph& g, Var z, const Tensor& probe) { return sum(mul(z, g.constant(probe))); }

TEST(AvgPool, MeanStage) {
  Graph g;
  Var rows = g.constant(Tensor::matrix({{1, 0}, {0, 1}}));
  EXPECT_EQ(avg_pool(g, rows, {2}).value(), Tensor::matrix({{0.5, 0.5}}));
  Var one = g.constant(Tensor::matrix({{3, -2}}));
  EXPECT_EQ(avg_pool(g, one, {1}).value(), Tensor::matrix({{3, -2}}));
}

TEST(AvgPool, PassthroughHead) {
  ParamStore store;
  Rng rng(1);
  Dense head = Dense::create(store, "h", 2, 2, rng);
  head.w->value = Tensor::identity(2);
  Graph g;
  Var z = f_avg(g, g.constant(Tensor::matrix({{1, 0}, {0, 1}})), head);
  EXPECT_EQ(z.value(), Tensor::vector({0.5, 0.5}));
  EXPECT_THROW(f_avg(g, g.constant(Tensor(Shape{0, 2})), head), Error);
}

TEST(AvgPool, PermutationInvariant) {
  Rng rng(4);
  Tensor x = random_tensor(rng, {5, 3});
  std::vector<std::size_t> perm = {3, 0, 4, 1, 2};
  Tensor y(x.shape());
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t c = 0; c < 3; ++c) y.at(i, c) = x.at(perm[i], c);
  }
  Graph g;
  Tensor a = avg_pool(g, g.constant(x), {5}).value();
  Tensor b = avg_pool(g, g.constant(y), {5}).value();
  for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(a[c], b[c], 1e-15);
}

TEST(FitIdf, HandValues) {
  std::vector<EncodedDoc> docs(2);
  docs[0].ids = {1, 2};
  docs[1].ids = {1, 3, 3};
  IdfTable t = fit_idf(docs);
  EXPECT_DOUBLE_EQ(t.idf(1), 1.0);
  EXPECT_NEAR(t.idf(2), 1.405465, 1e-6);
  EXPECT_NEAR(t.idf(3), std::log(1.5) + 1.0, 1e-15);  // repeats count once
  EXPECT_DOUBLE_EQ(t.idf(99), std::log(3.0) + 1.0);
  for (std::size_t id : {1, 2, 3, 99}) EXPECT_GE(t.idf(id), 0.0);
  EXPECT_THROW(fit_idf(std::vector<EncodedDoc>{}), Error);
}

TEST(Tfidf, WeightedStageMatchesScalarOracle) {
  std::vector<EncodedDoc> train(3);
  train[0].ids = {1, 2};
  train[1].ids = {2, 3};
  train[2].ids = {4};
  IdfTable idf = fit_idf(train);
  Rng rng(7);
  Tensor emb = random_tensor(rng, {3, 4});
  EncodedDoc doc;
  doc.ids = {1, 3, 1};
  Graph g;
  Tensor pooled = tfidf_pool(g, g.constant(emb), {&doc}, {idf}).value();
  // Oracle: loop over positions, tf counted by scanning the document.
  for (std::size_t c = 0; c < 4; ++c) {
    double acc = 0.0;
    for (std::size_t i = 0; i < 3; ++i) {
      double tf = 0.0;
      for (std::size_t j = 0; j < 3; ++j) tf += doc.ids[j] == doc.ids[i] ? 1.0 : 0.0;
      double df = 0.0;
      for (const auto& t : train) {
        df += std::find(t.ids.begin(), t.ids.end(), doc.ids[i]) != t.ids.end() ? 1.0 : 0.0;
      }
      const double w = tf * (std::log(4.0 / (1.0 + df)) + 1.0);
      acc += w * emb.at(i, c);
    }
    EXPECT_NEAR(pooled[c], acc / 3.0, 1e-12);
  }
}

TEST(Tfidf, ConstantWeightAndSingleToken) {
  std::vector<EncodedDoc> train(2);
  train[0].ids = {1, 2};
  train[1].ids = {1, 2};
  IdfTable idf = fit_idf(train);  // idf 1 for both tokens
  EncodedDoc doc;
  doc.ids = {1, 2};
  Rng rng(2);
  Tensor emb = random_tensor(rng, {2, 3});
  Graph g;
  Tensor weighted = tfidf_pool(g, g.constant(emb), {&doc}, {idf}).value();
  Tensor mean = avg_pool(g, g.constant(emb), {2}).value();
  for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(weighted[c], 1.0 * mean[c], 1e-15);

  EncodedDoc single;
  single.ids = {7};
  Tensor row = random_tensor(rng, {1, 3});
  Tensor one = tfidf_pool(g, g.constant(row), {&single}, {idf}).value();
  for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(one[c], idf.idf(7) * row[c], 1e-15);
}

TEST(Tfidf, PermutationInvariant) {
  std::vector<EncodedDoc> train(2);
  train[0].ids = {1, 2, 2};
  train[1].ids = {3};
  IdfTable idf = fit_idf(train);
  Rng rng(3);
  Tensor emb = random_tensor(rng, {4, 2});
  EncodedDoc a;
  a.ids = {1, 2, 3, 2};
  EncodedDoc b;
  b.ids = {2, 3, 2, 1};
  Tensor emb_b(emb.shape());
  const std::size_t perm[4] = {1, 2, 3, 0};
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t c = 0; c < 2; ++c) emb_b.at(i, c) = emb.at(perm[i], c);
  }
  Graph g;
  Tensor pa = tfidf_pool(g, g.constant(emb), {&a}, {idf}).value();
  Tensor pb = tfidf_pool(g, g.constant(emb_b), {&b}, {idf}).value();
  for (std::size_t c = 0; c < 2; ++c) EXPECT_NEAR(pa[c], pb[c], 1e-15);
}

std::vector<Dense> make_filters(ParamStore& store, std::size_t k, std::size_t maps,
                                const std::vector<std::size_t>& widths, Rng& rng) {
  std::vector<Dense> f;
  for (std::size_t h : widths) {
    f.push_back(Dense::create(store, "conv" + std::to_string(h), h * k, maps, rng));
  }
  return f;
}

TEST(Cnn, HandConvolution) {
  ParamStore store;
  Rng rng(1);
  auto filters = make_filters(store, 2, 1, {3}, rng);
  filters[0].w->value = Tensor(Shape{6, 1}, 1.0);
  Graph g;
  // Four real rows, padded to five: windows give [6, 5, 3].
  Var x = g.constant(Tensor::matrix({{1, 0}, {2, 0}, {3, 0}, {0, 0}}));
  Var z = cnn_features(g, x, {4}, 5, filters, {3});
  EXPECT_EQ(z.value(), Tensor::matrix({{6}}));
  Var single = f_cnn(g, g.constant(Tensor::matrix({{0, 0}, {0, 0}, {3, 0}, {2, 0}, {0, 0}})), filters, {3});
  EXPECT_EQ(single.value(), Tensor::vector({5}));
}

TEST(Cnn, ZeroInputGivesZeroFeatures) {
  ParamStore store;
  Rng rng(2);
  auto filters = make_filters(store, 3, 4, {3, 4, 5}, rng);
  Graph g;
  Var z = f_cnn(g, g.constant(Tensor(Shape{6, 3})), filters, {3, 4, 5});
  EXPECT_EQ(z.value(), Tensor(Shape{12}));
}

TEST(Cnn, TrailingPaddingInvariance) {
  ParamStore store;
  Rng rng(3);
  auto filters = make_filters(store, 3, 4, {3, 4, 5}, rng);
  for (auto& f : filters) {
    for (double& v : f.w->value.data()) v = std::abs(v);
  }
  Tensor x = random_tensor(rng, {6, 3}, 0.0, 1.0);
  Graph g;
  Tensor base = cnn_features(g, g.constant(x), {6}, 6, filters, {3, 4, 5}).value();
  for (std::size_t n : {7u, 9u, 15u}) {
    Tensor padded = cnn_features(g, g.constant(x), {6}, n, filters, {3, 4, 5}).value();
    EXPECT_TRUE(bit_identical(base, padded)) << n;
  }
}

TEST(Cnn, BatchedMatchesSingleAndTruncates) {
  ParamStore store;
  Rng rng(4);
  auto filters = make_filters(store, 2, 3, {3, 4, 5}, rng);
  Tensor a = random_tensor(rng, {7, 2});
  Tensor b = random_tensor(rng, {5, 2});
  Tensor both(Shape{12, 2});
  std::copy(a.data().begin(), a.data().end(), both.data().begin());
  std::copy(b.data().begin(), b.data().end(), both.data().begin() + 14);
  Graph g;
  Tensor batched = cnn_features(g, g.constant(both), {7, 5}, 6, filters, {3, 4, 5}).value();
  Tensor za = cnn_features(g, g.constant(a), {7}, 6, filters, {3, 4, 5}).value();
  Tensor zb = cnn_features(g, g.constant(b), {5}, 6, filters, {3, 4, 5}).value();
  // Truncation: the first six rows of `a` alone give the same answer.
  Tensor a6 = pad_rows(a, 6);
  Tensor za6 = cnn_features(g, g.constant(a6), {6}, 6, filters, {3, 4, 5}).value();
  EXPECT_TRUE(bit_identical(za, za6));
  for (std::size_t c = 0; c < 9; ++c) {
    EXPECT_EQ(batched.at(0, c), za.at(0, c));
    EXPECT_EQ(batched.at(1, c), zb.at(0, c));
  }
}

TEST(Cnn, ConfigRejectsShortDocuments) {
  ExtractorConfig cfg;
  cfg.kind = ExtractorKind::kCnn;
  cfg.cnn_len = 4;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg.cnn_len = 5;
  EXPECT_NO_THROW(cfg.validate());
}

TEST(Gru, ZeroWeightsHalveState) {
  ParamStore store;
  Rng rng(5);
  GruParams p = GruParams::create(store, "gru", 3, 4, rng);
  for (Parameter* q : store.all()) q->value.fill(0.0);
  Graph g;
  Var h = gru_cell(g, p, g.constant(Tensor::vector({1, 2, 3})),
                   g.constant(Tensor::vector({1, -2, 4, 0.5})));
  EXPECT_EQ(h.value(), Tensor::vector({0.5, -1, 2, 0.25}));
}

TEST(Gru, ZeroStateAndZeroCandidateInput) {
  ParamStore store;
  Rng rng(6);
  GruParams p = GruParams::create(store, "gru", 3, 4, rng);
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t c = 8; c < 12; ++c) p.w->value.at(r, c) = 0.0;
  }
  Graph g;
  Var h = gru_cell(g, p, g.constant(Tensor::vector({1, -1, 2})), g.constant(Tensor(Shape{4})));
  EXPECT_EQ(h.value(), Tensor(Shape{4}));
  EXPECT_THROW(gru_cell(g, p, g.constant(Tensor::vector({1, 2})), g.constant(Tensor(Shape{4}))), Error);
}

TEST(Gru, GradientMatchesFiniteDifferences) {
  ParamStore store;
  Rng rng(7);
  GruParams p = GruParams::create(store, "gru", 3, 4, rng);
  for (double& v : p.b->value.data()) v = uniform(rng, -0.5, 0.5);
  Parameter x("x", random_tensor(rng, {3}));
  Parameter h0("h0", random_tensor(rng, {4}));
  Tensor probe = random_tensor(rng, {4});
  auto params = store.all();
  params.push_back(&x);
  params.push_back(&h0);
  auto r = grad_check([&](Graph& g) {
    return probe_loss(g, gru_cell(g, p, g.param(x), g.param(h0)), probe);
  }, params);
  EXPECT_LT(r.max_rel_error, 1e-6) << r.worst;
}

TEST(Attention, SingletonAndUniform) {
  ParamStore store;
  Rng rng(8);
  AttentionParams p = AttentionParams::create(store, "att", 3, 5, rng);
  Graph g;
  Tensor h1 = Tensor::matrix({{0.3, -1, 2}});
  auto [s, alpha] = attention_pool(g, p, g.constant(h1));
  EXPECT_EQ(alpha.value(), Tensor::vector({1}));
  EXPECT_EQ(s.value(), Tensor::vector({0.3, -1, 2}));

  Tensor same = Tensor::matrix({{1, 2, 3}, {1, 2, 3}, {1, 2, 3}, {1, 2, 3}});
  auto [s4, a4] = attention_pool(g, p, g.constant(same));
  for (std::size_t t = 0; t < 4; ++t) EXPECT_NEAR(a4.value()[t], 0.25, 1e-15);
  EXPECT_THROW(attention_pool(g, p, g.constant(Tensor(Shape{0, 3}))), Error);
}

TEST(Attention, WeightsSumToOneAndGradient) {
  ParamStore store;
  Rng rng(9);
  AttentionParams p = AttentionParams::create(store, "att", 3, 4, rng);
  for (int trial = 0; trial < 20; ++trial) {
    Graph g;
    auto [s, alpha] = attention_pool(g, p, g.constant(random_tensor(rng, {1 + static_cast<std::size_t>(trial % 7), 3}, -3, 3)));
    double total = 0.0;
    for (double a : alpha.value().data()) {
      EXPECT_GE(a, 0.0);
      total += a;
    }
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
  Parameter h("h", random_tensor(rng, {5, 3}));
  Tensor probe = random_tensor(rng, {3});
  auto params = store.all();
  params.push_back(&h);
  auto r = grad_check([&](Graph& g) {
    return probe_loss(g, attention_pool(g, p, g.param(h)).first, probe);
  }, params);
  EXPECT_LT(r.max_rel_error, 1e-6) << r.worst;
}

// A toy table with random rows and a fixed vocabulary of ids 1..kVocab-1.
struct Toy {
  ParamStore store;
  Parameter table;
  Extractor ext;
  Toy(ExtractorConfig cfg, std::size_t k, std::uint64_t seed) {
    Rng rng(seed);
    table = Parameter("table", random_tensor(rng, {kVocab, k}), true);
    ext = Extractor::create(cfg, k, store, rng);
    for (Parameter* p : store.all()) {
      if (p->name.ends_with(".b")) {
        for (double& v : p->value.data()) v = uniform(rng, -0.3, 0.3);
      }
    }
  }
  Var embed(Graph& g, const std::vector<const EncodedDoc*>& docs) {
    std::vector<std::size_t> ids;
    for (const auto* d : docs) ids.insert(ids.end(), d->ids.begin(), d->ids.end());
    return gather_rows(g.param(table), ids);
  }
  std::vector<Parameter*> params() {
    auto p = store.all();
    p.push_back(&table);
    return p;
  }
};

EncodedDoc doc_of(std::vector<std::size_t> ids, std::vector<SentenceRange> sents = {}) {
  EncodedDoc d;
  d.ids = std::move(ids);
  d.sentences = sents.empty() ? std::vector<SentenceRange>{{0, d.ids.size()}} : std::move(sents);
  return d;
}

TEST(Han, SingleTokenDocument) {
  ExtractorConfig cfg;
  cfg.kind = ExtractorKind::kHan;
  cfg.gru_units = 3;
  cfg.attention_units = 4;
  Toy toy(cfg, 2, 10);
  EncodedDoc d = doc_of({4});
  Graph g;
  FeatureOutput out = toy.ext.forward(g, toy.embed(g, {&d}), {&d}, nullptr);
  EXPECT_EQ(out.z.value().shape(), (Shape{1, 6}));
  EXPECT_EQ(out.word_alpha, Tensor::matrix({{1}}));
  EXPECT_EQ(out.sentence_alpha, Tensor::matrix({{1}}));
}

TEST(Han, AttentionRowsSumToOneWithPadding) {
  ExtractorConfig cfg;
  cfg.kind = ExtractorKind::kHan;
  cfg.gru_units = 3;
  cfg.attention_units = 4;
  Toy toy(cfg, 3, 11);
  EncodedDoc a = doc_of({1, 2, 3, 4, 5}, {{0, 2}, {2, 5}});
  EncodedDoc b = doc_of({6, 7}, {{0, 2}});
  EncodedDoc c = doc_of({8, 9, 1, 2}, {{0, 1}, {1, 2}, {2, 4}});
  Graph g;
  std::vector<const EncodedDoc*> batch = {&a, &b, &c};
  FeatureOutput out = toy.ext.forward(g, toy.embed(g, batch), batch, nullptr);
  EXPECT_EQ(out.word_alpha.shape(), (Shape{6, 3}));
  EXPECT_EQ(out.sentence_alpha.shape(), (Shape{3, 3}));
  EXPECT_EQ(out.first_sentence, (std::vector<std::size_t>{0, 2, 3}));
  for (const Tensor* t : {&out.word_alpha, &out.sentence_alpha}) {
    for (std::size_t r = 0; r < t->rows(); ++r) {
      double s = 0.0;
      for (std::size_t col = 0; col < t->cols(); ++col) {
        EXPECT_GE(t->at(r, col), 0.0);
        s += t->at(r, col);
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
  EXPECT_EQ(out.word_alpha.at(2, 2), 0.0);  // b's only sentence has 2 tokens
  EXPECT_EQ(out.sentence_alpha.at(1, 1), 0.0);

  // Each document alone gives the same features as inside the padded batch.
  for (std::size_t i = 0; i < 3; ++i) {
    Graph g1;
    FeatureOutput one = toy.ext.forward(g1, toy.embed(g1, {batch[i]}), {batch[i]}, nullptr);
    for (std::size_t col = 0; col < 6; ++col) {
      EXPECT_NEAR(one.z.value().at(0, col), out.z.value().at(i, col), 1e-14);
    }
  }
}

TEST(Han, RejectsEmptyStructure) {
  ExtractorConfig cfg;
  cfg.kind = ExtractorKind::kHan;
  cfg.gru_units = 2;
  cfg.attention_units = 2;
  Toy toy(cfg, 2, 12);
  EncodedDoc bad = doc_of({1, 2}, {{0, 1}});
  Graph g;
  EXPECT_THROW(toy.ext.forward(g, toy.embed(g, {&bad}), {&bad}, nullptr), Error);
  EncodedDoc none;
  none.ids = {1};
  EXPECT_THROW(toy.ext.forward(g, toy.embed(g, {&none}), {&none}, nullptr), Error);
}

TEST(Han, GradientOnTwoSentenceToy) {
  ExtractorConfig cfg;
  cfg.kind = ExtractorKind::kHan;
  cfg.gru_units = 4;
  cfg.attention_units = 8;
  Toy toy(cfg, 3, 13);
  EncodedDoc d = doc_of({1, 2, 3, 4, 5, 6}, {{0, 3}, {3, 6}});
  Rng rng(14);
  Tensor probe = random_tensor(rng, {1, 8});
  auto r = grad_check([&](Graph& g) {
    return probe_loss(g, toy.ext.forward(g, toy.embed(g, {&d}), {&d}, nullptr).z, probe);
  }, toy.params());
  EXPECT_LT(r.max_rel_error, 1e-5) << r.worst;
}

struct ExtractorCase {
  ExtractorKind kind;
  std::size_t k;
};

class ExtractorGradient : public ::testing::TestWithParam<ExtractorCase> {};

// End to end on toy sizes with at most 200 parameters, batch of two with
// ragged lengths.
TEST_P(ExtractorGradient, MatchesFiniteDifferences) {
  ExtractorConfig cfg;
  cfg.kind = GetParam().kind;
  cfg.dense_units = 4;
  cfg.cnn_maps = 2;
  cfg.cnn_widths = {2, 3};
  cfg.cnn_len = 5;
  cfg.gru_units = 2;
  cfg.attention_units = 3;
  Toy toy(cfg, GetParam().k, 20 + static_cast<int>(cfg.kind));
  EncodedDoc a = doc_of({1, 2, 3, 1}, {{0, 1}, {1, 4}});
  EncodedDoc b = doc_of({4, 5, 6, 7, 8, 9, 2}, {{0, 3}, {3, 5}, {5, 7}});
  a.domain = 0;
  b.domain = 0;
  toy.ext.idf = {fit_idf(std::vector<EncodedDoc>{a, doc_of({2, 3}), doc_of({5})})};
  std::size_t n_params = 0;
  for (Parameter* p : toy.params()) n_params += p->value.size();
  EXPECT_LE(n_params, 200u);
  Rng rng(15);
  Tensor probe = random_tensor(rng, {2, cfg.feature_dim()});
  std::vector<const EncodedDoc*> batch = {&a, &b};
  auto r = grad_check([&](Graph& g) {
    return probe_loss(g, toy.ext.forward(g, toy.embed(g, batch), batch, nullptr).z, probe);
  }, toy.params());
  EXPECT_LT(r.max_rel_error, 1e-5) << r.worst;
}

INSTANTIATE_TEST_SUITE_P(All, ExtractorGradient,
                         ::testing::Values(ExtractorCase{ExtractorKind::kAvg, 3},
                                           ExtractorCase{ExtractorKind::kTfidf, 3},
                                           ExtractorCase{ExtractorKind::kCnn, 2},
                                           ExtractorCase{ExtractorKind::kHan, 2}),
                         [](const auto& info) { return extractor_name(info.param.kind); });

TEST(Extractor, FeatureDims) {
  ExtractorConfig cfg;
  EXPECT_EQ(cfg.feature_dim(), 100u);
  cfg.kind = ExtractorKind::kTfidf;
  EXPECT_EQ(cfg.feature_dim(), 100u);
  cfg.kind = ExtractorKind::kCnn;
  EXPECT_EQ(cfg.feature_dim(), 300u);
  cfg.kind = ExtractorKind::kHan;
  EXPECT_EQ(cfg.feature_dim(), 200u);
  EXPECT_EQ(parse_extractor("han"), ExtractorKind::kHan);
  EXPECT_EQ(parse_extractor("lstm"), std::nullopt);
}

TEST(Extractor, CnnDropoutOnlyWhenTraining) {
  ExtractorConfig cfg;
  cfg.kind = ExtractorKind::kCnn;
  cfg.cnn_maps = 3;
  cfg.cnn_len = 6;
  Toy toy(cfg, 2, 30);
  EncodedDoc d = doc_of({1, 2, 3, 4, 5, 6});
  Rng drop(1);
  Graph eval(false);
  Tensor a = toy.ext.forward(eval, toy.embed(eval, {&d}), {&d}, &drop).z.value();
  Graph plain;
  Tensor b = toy.ext.forward(plain, toy.embed(plain, {&d}), {&d}, nullptr).z.value();
  EXPECT_TRUE(bit_identical(a, b));
  Graph train;
  Tensor c = toy.ext.forward(train, toy.embed(train, {&d}), {&d}, &drop).z.value();
  std::size_t zeros = 0;
  for (double v : c.data()) zeros += v == 0.0;
  EXPECT_GT(zeros, 0u);
}

}  // namespace
}  // namespace dann
