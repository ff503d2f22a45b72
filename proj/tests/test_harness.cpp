#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "occludrop/occludrop.hpp"
#include "oracles.hpp"

using namespace occludrop;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("occludrop_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

/// Small but trainable configuration shared by the harness tests.
Config tiny_config() {
  Config c;
  for (const char* kv : {"model.image_size=16", "model.width_base=4", "model.embedding_dim=16", "data.ids=6",
                         "data.images_per_id=10", "optim.epochs=3", "optim.batch_size=12", "eval.batch_size=32",
                         "run.precision=64", "run.deterministic=true"}) {
    c.apply_override(kv);
  }
  return c;
}

}  // namespace

// ---- metrics ----

TEST(TarAtFar, SeparatedScoresGiveFullTar) {
  EvalPairSet set;
  for (int i = 0; i < 10; ++i) set.add(0.9 + i * 0.001, true);
  for (int i = 0; i < 100; ++i) set.add(-0.5 + i * 0.001, false);
  for (const auto& r : tar_at_far(set, {0.5, 0.1, 0.01})) {
    EXPECT_EQ(r.tar, 1.0);
    EXPECT_LE(r.far, r.far_target);
  }
}

TEST(TarAtFar, MatchesExhaustiveOracle) {
  for (std::uint64_t seed = 1; seed <= 40; ++seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(0.6, 0.2), im(0.1, 0.25);
    EvalPairSet set;
    const std::size_t total = 50 + seed * 11;  // up to 490 pairs
    for (std::size_t i = 0; i < total; ++i) {
      const bool same = i % 5 == 0;
      // coarse rounding produces ties between and within the two groups
      const double s = std::round((same ? g(rng) : im(rng)) * 40) / 40;
      set.add(s, same);
    }
    const std::vector<double> targets{0.5, 0.1, 0.05, 0.01};
    const auto got = tar_at_far(set, targets);
    for (std::size_t k = 0; k < targets.size(); ++k) {
      const auto ref = oracle::tar_at_far(set.genuine, set.impostor, targets[k]);
      EXPECT_EQ(got[k].tar, ref.tar) << "seed " << seed << " far " << targets[k];
      EXPECT_EQ(got[k].far, ref.far);
      EXPECT_EQ(got[k].threshold, ref.threshold);
    }
  }
}

TEST(TarAtFar, SwappedLabelsComplement) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> d(0, 1);
  EvalPairSet a, b;
  for (int i = 0; i < 100; ++i) {
    const double s = d(rng);
    a.add(s, i % 2 == 0);
    b.add(s, i % 2 != 0);
  }
  const auto ra = tar_at_far(a, {0.5})[0];
  const auto rb = tar_at_far(b, {0.5})[0];
  const auto oa = oracle::tar_at_far(a.genuine, a.impostor, 0.5);
  const auto ob = oracle::tar_at_far(b.genuine, b.impostor, 0.5);
  EXPECT_EQ(ra.tar, oa.tar);
  EXPECT_EQ(rb.tar, ob.tar);
  // with continuous scores and equal group sizes the median splits both groups evenly
  EXPECT_NEAR(rb.tar, 1.0 - ra.tar, 0.1);
}

TEST(TarAtFar, UnresolvableAndEmpty) {
  EvalPairSet set;
  set.add(0.9, true);
  for (int i = 0; i < 50; ++i) set.add(0.1, false);
  const auto r = tar_at_far(set, {1e-3})[0];
  EXPECT_FALSE(r.resolvable);
  EXPECT_EQ(r.required_impostors, 1000u);
  EXPECT_THROW(tar_at_far(EvalPairSet{}, {0.1}), ContractError);
  EXPECT_THROW(tar_at_far(set, {0.0}), ContractError);
}

TEST(Rank1, SelfMatchOneHotAndOracle) {
  Embeddings e{3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1}};
  EXPECT_EQ(rank1_identification(e, {0, 1, 2}, e, {0, 1, 2}), 1.0);
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> d(0, 1);
    const std::size_t ng = 20, np = 15, dim = 4;
    Embeddings g{ng, dim, {}}, p{np, dim, {}};
    for (std::size_t i = 0; i < ng * dim; ++i) g.values.push_back(std::round(d(rng) * 2) / 2);
    for (std::size_t i = 0; i < np * dim; ++i) p.values.push_back(std::round(d(rng) * 2) / 2);
    std::vector<std::size_t> gl(ng), pl(np);
    for (auto& v : gl) v = rng() % 5;
    for (auto& v : pl) v = rng() % 5;
    // avoid zero rows, whose cosine is undefined
    for (auto* m : {&g, &p})
      for (std::size_t r = 0; r < m->count; ++r) m->values[r * dim] += 0.25;
    EXPECT_EQ(rank1_identification(g, gl, p, pl), oracle::rank1(g.values, gl, p.values, pl, dim));
  }
  EXPECT_THROW(rank1_identification(Embeddings{0, 3, {}}, {}, e, {0, 1, 2}), ContractError);
}

// ---- data ----

TEST(OccludedSplit, EdgeFractionsAndPixelCount) {
  ImageSet clean;
  clean.size = 20;
  clean.push(std::vector<float>(400, 1.0f), 0);
  clean.push(std::vector<float>(400, 1.0f), 1);
  auto none = build_occluded_split(clean, OccludedTestSpec{0.0, 0.0, 0.5, 1});
  EXPECT_EQ(none.pixels, clean.pixels);
  auto full = build_occluded_split(clean, OccludedTestSpec{1.0, 1.0, 0.5, 1});
  for (float v : full.pixels) EXPECT_EQ(v, 0.5f);
  const OccludedTestSpec spec{0.3, 0.5, 0.5, 9};
  auto part = build_occluded_split(clean, spec);
  for (std::size_t i = 0; i < 2; ++i) {
    const Rect r = occluder_for(spec, 20, i);
    EXPECT_EQ(std::count(part.image(i), part.image(i) + 400, 0.5f), static_cast<long>(r.height * r.width));
    EXPECT_GE(r.height, 6u);
    EXPECT_LE(r.height, 10u);
  }
  EXPECT_THROW(build_occluded_split(clean, OccludedTestSpec{0.6, 0.4, 0.5, 1}), ContractError);
}

TEST(Synthetic, DeterministicAcrossThreadCounts) {
  SyntheticSpec spec;
  spec.ids = 4;
  spec.images_per_id = 5;
  spec.image_size = 16;
  spec.seed = 3;
  const auto a = make_synthetic_dataset(spec, 1), b = make_synthetic_dataset(spec, 3);
  EXPECT_EQ(a.train.pixels, b.train.pixels);
  EXPECT_EQ(a.test.labels, b.test.labels);
  EXPECT_EQ(a.train.count(), 16u);
  EXPECT_EQ(a.test.count(), 4u);
}

TEST(PngDirectory, RoundTripThroughGenerator) {
  const auto dir = scratch("png");
  std::vector<float> img(8 * 8);
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<float>(i) / 63.0f;
  for (int id = 0; id < 2; ++id) {
    fs::create_directories(dir / ("id_" + std::to_string(id)));
    for (int k = 0; k < 3; ++k) {
      write_png_gray((dir / ("id_" + std::to_string(id)) / ("img_" + std::to_string(k) + ".png")).string(), 8, 8,
                     img.data());
    }
  }
  const auto ds = load_directory_dataset(dir.string(), 8, 0.7);
  EXPECT_EQ(ds.num_ids, 2u);
  EXPECT_EQ(ds.train.count() + ds.test.count(), 6u);
  EXPECT_NEAR(ds.train.image(0)[63], 1.0f, 1.0f / 255);
  EXPECT_THROW(load_directory_dataset((dir / "missing").string(), 8, 0.7), DataError);
}

// ---- config ----

TEST(ConfigTest, LayersAndUnknownKeys) {
  Config c;
  EXPECT_EQ(c.get("loss.alpha"), "100");
  c.load_text("loss.alpha = 5  # comment\n\nlcd.stage=2\n", "file");
  c.apply_override("loss.alpha=7");
  EXPECT_EQ(c.get_double("loss.alpha"), 7.0);
  EXPECT_EQ(c.get_int("lcd.stage"), 2);
  try {
    c.set("loss.alpah", "1");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("loss.alpha"), std::string::npos);
    EXPECT_EQ(e.exit_code(), 2);
  }
  EXPECT_THROW(c.apply_override("novalue"), ConfigError);
  c.set("optim.epochs", "x");
  EXPECT_THROW(settings_from_config(c), ConfigError);
}

TEST(ConfigTest, SeedsDeriveFromBase) {
  Config a, b;
  b.set("seed.base", "2");
  EXPECT_NE(a.seed("init"), b.seed("init"));
  EXPECT_NE(a.seed("init"), a.seed("data"));
  b.set("seed.init", "99");
  EXPECT_EQ(b.seed("init"), 99u);
  EXPECT_NE(a.fingerprint(), b.fingerprint());
}

TEST(ConfigTest, InvalidGammaRangeRejected) {
  Config c = tiny_config();
  c.set("strategy.name", "lcd");
  c.set("lcd.gamma_min", "5");
  c.set("lcd.gamma_max", "2");
  EXPECT_THROW(settings_from_config(c), ConfigError);
}

// ---- checkpoint ----

TEST(CheckpointTest, RoundTripAndShapeMismatch) {
  const auto dir = scratch("ckpt");
  auto a = Tensor<double>::from({2, 3}, {1, 2, 3, 4, 5, 6});
  auto b = Tensor<float>::from({2}, {0.5f, -1.5f});
  save_checkpoint((dir / "a.bin").string(), 0xabcdu, std::vector<std::pair<std::string, Tensor<double>>>{{"a", a}});
  save_checkpoint((dir / "b.bin").string(), 7u, std::vector<std::pair<std::string, Tensor<float>>>{{"b", b}});
  const auto ca = load_checkpoint((dir / "a.bin").string());
  EXPECT_EQ(ca.config_fingerprint, 0xabcdu);
  auto target = Tensor<double>::zeros({2, 3});
  restore_checkpoint(ca, std::vector<std::pair<std::string, Tensor<double>>>{{"a", target}});
  EXPECT_EQ(std::vector<double>(target.values().begin(), target.values().end()),
            (std::vector<double>{1, 2, 3, 4, 5, 6}));
  const auto cb = load_checkpoint((dir / "b.bin").string());
  EXPECT_EQ(cb.entries[0].dtype, 4);
  EXPECT_EQ(cb.entries[0].values[1], -1.5);
  auto wrong = Tensor<double>::zeros({3, 2});
  EXPECT_THROW(restore_checkpoint(ca, std::vector<std::pair<std::string, Tensor<double>>>{{"a", wrong}}), DataError);
  EXPECT_THROW(restore_checkpoint(ca, std::vector<std::pair<std::string, Tensor<double>>>{{"zz", wrong}}), DataError);
  std::ofstream((dir / "bad.bin").string()) << "garbage";
  EXPECT_THROW(load_checkpoint((dir / "bad.bin").string()), DataError);
}

// ---- model and training ----

TEST(Backbone, EmbeddingShapeAndEvalDeterminism) {
  const auto s = settings_from_config(tiny_config());
  auto net = make_model<double>(s, 6);
  std::mt19937_64 rng(1);
  std::vector<double> px(3 * 16 * 16);
  for (auto& v : px) v = std::uniform_real_distribution<double>(0, 1)(rng);
  auto guard = net.no_grad();
  auto x = Tensor<double>::from({3, 1, 16, 16}, px);
  auto a = net.backbone.forward(x, ForwardOptions<double>{});
  auto b = net.backbone.forward(x, ForwardOptions<double>{});
  EXPECT_EQ(a.embedding.shape(), (Shape{3, 16}));
  EXPECT_TRUE(std::equal(a.embedding.values().begin(), a.embedding.values().end(), b.embedding.values().begin()));
}

TEST(Backbone, EmptyDropEqualsAttentionOnlyModel) {
  Config c = tiny_config();
  c.set("sam.enabled", "true");
  c.set("strategy.name", "lcd");
  c.set("lcd.gamma_min", "0");
  c.set("lcd.gamma_max", "0");
  Config plain = c;
  plain.set("strategy.name", "none");
  auto na = make_model<double>(settings_from_config(c), 6);
  auto nb = make_model<double>(settings_from_config(plain), 6);
  std::vector<double> px(4 * 256, 0.3);
  for (std::size_t i = 0; i < px.size(); ++i) px[i] += 0.001 * static_cast<double>(i % 17);
  auto x = Tensor<double>::from({4, 1, 16, 16}, px);
  std::mt19937_64 r1(5), r2(5);
  ForwardOptions<double> oa, ob;
  oa.training = ob.training = true;
  oa.rng = &r1;
  ob.rng = &r2;
  auto a = na.backbone.forward(x, oa);
  auto b = nb.backbone.forward(x, ob);
  EXPECT_TRUE(std::equal(a.embedding.values().begin(), a.embedding.values().end(), b.embedding.values().begin()));
}

TEST(Training, LossesDecreaseUnderPaperConstants) {
  Config c = tiny_config();
  c.set("strategy.name", "lcd");
  c.set("optim.epochs", "8");
  c.set("optim.lr", "0.01");
  const auto s = settings_from_config(c);
  const auto ds = load_dataset(s);
  auto net = make_model<double>(s, ds.num_ids);
  const auto rec = train(net, s, ds.train, "");
  ASSERT_GE(rec.steps.size(), 8u);
  auto mean_of = [&](std::size_t from, std::size_t to, auto field) {
    double acc = 0;
    for (std::size_t i = from; i < to; ++i) acc += field(rec.steps[i]);
    return acc / static_cast<double>(to - from);
  };
  const std::size_t q = rec.steps.size() / 4, n = rec.steps.size();
  EXPECT_LT(mean_of(n - q, n, [](const StepLog& l) { return l.id; }), mean_of(0, q, [](const StepLog& l) { return l.id; }));
  EXPECT_LT(mean_of(n - q, n, [](const StepLog& l) { return l.filter; }),
            mean_of(0, q, [](const StepLog& l) { return l.filter; }));
  EXPECT_LT(mean_of(n - q, n, [](const StepLog& l) { return l.response; }),
            mean_of(0, q, [](const StepLog& l) { return l.response; }));
}

TEST(Training, IdenticalSeedsGiveIdenticalRecords) {
  Config c = tiny_config();
  c.set("strategy.name", "lcd");
  const auto a = run_experiment(c), b = run_experiment(c);
  ASSERT_EQ(a.record.steps.size(), b.record.steps.size());
  for (std::size_t i = 0; i < a.record.steps.size(); ++i) EXPECT_EQ(a.record.steps[i].total, b.record.steps[i].total);
  EXPECT_EQ(a.eval.rank1_occluded, b.eval.rank1_occluded);
}

TEST(Training, ZeroWeightsMatchPlainBaseline) {
  Config base = tiny_config();
  base.set("loss.alpha", "0");
  base.set("loss.beta", "0");
  Config other = base;
  other.set("loss.epsilon", "1e-6");  // only used by the zero-weighted terms
  const auto a = run_experiment(base), b = run_experiment(other);
  for (std::size_t i = 0; i < a.record.steps.size(); ++i) EXPECT_EQ(a.record.steps[i].id, b.record.steps[i].id);
}

TEST(Mse, ZeroDropGivesZeroAndRepeatsExactly) {
  Config c = tiny_config();
  const auto s = settings_from_config(c);
  const auto ds = load_dataset(s);
  auto net = make_model<double>(s, ds.num_ids);
  const auto zero = mse_compensation(net, ds.test, s, GammaPolicy{0, 0, 0});
  EXPECT_EQ(zero.mean, 0.0);
  const auto a = mse_compensation(net, ds.test, s), b = mse_compensation(net, ds.test, s);
  EXPECT_EQ(a.mean, b.mean);
  EXPECT_GT(a.mean, 0.0);
}

TEST(Ablation, FourRowsWithFingerprints) {
  Config c = tiny_config();
  c.set("optim.epochs", "1");
  const auto rows = ablation_suite(c);
  ASSERT_EQ(rows.size(), 4u);
  std::set<std::uint64_t> fps;
  for (const auto& r : rows) {
    EXPECT_EQ(r.status, "ok");
    fps.insert(r.config_fingerprint);
  }
  EXPECT_EQ(fps.size(), 4u);
  EXPECT_EQ(rows[3].name, "cd_sr_sam");
}

TEST(Attention, ReportSeparatesDroppedChannels) {
  Config c = tiny_config();
  c.set("sam.enabled", "true");
  const auto s = settings_from_config(c);
  const auto ds = load_dataset(s);
  auto net = make_model<double>(s, ds.num_ids);
  const auto rep = sam_attention_report(net, ds.test, s);
  EXPECT_EQ(rep.clean.size(), s.model.stage_width(s.model.stage));
  EXPECT_LT(rep.spread_clean(), 0.1);
  std::size_t dropped = 0;
  for (auto n : rep.dropped_count) dropped += n;
  EXPECT_GT(dropped, 0u);
}
