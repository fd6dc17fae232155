#include <gtest/gtest.h>

#include <cmath>

#include "fixtures.hpp"
#include "stmixer/decoder.hpp"
#include "stmixer/gradcheck.hpp"

using namespace stmx;
using stmx::testing::random_space;
using stmx::testing::randomize;
using stmx::testing::small_config;

TEST(DecoderConfig, FullSizeDefaults) {
  const auto k = DecoderConfig::defaults(DetectorMode::kKeyframe);
  EXPECT_EQ(k.queries, 100u);
  EXPECT_EQ(k.dim, 256u);
  EXPECT_EQ(k.points, 32u);
  EXPECT_EQ(k.groups, 4u);
  EXPECT_EQ(k.out_points(), 4 * k.points);
  EXPECT_EQ(k.out_frames(), 4 * k.frames);
  EXPECT_EQ(k.modules, 6u);
  EXPECT_EQ(k.bank_rows, 5u);
  EXPECT_EQ(k.bank_window, 60u);
  EXPECT_EQ(k.cross_layers, 3u);
  EXPECT_EQ(DecoderConfig::defaults(DetectorMode::kTubelet).modules, 3u);
}

TEST(DecoderConfig, Validation) {
  auto c = small_config(DetectorMode::kKeyframe);
  c.groups = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_config(DetectorMode::kTubelet);
  c.classifier = ClassifierKind::kLongTerm;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_config(DetectorMode::kKeyframe);
  c.modules = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

class AsamModes : public ::testing::TestWithParam<DetectorMode> {};

TEST_P(AsamModes, OutputDimsEqualInputDims) {
  ParameterStore store;
  Rng rng(1);
  const auto cfg = small_config(GetParam());
  const auto dec = Decoder::create(store, cfg, rng);
  randomize(store, rng);
  const auto space = random_space(rng, 8, 2, 8);
  const QuerySet q = dec.init.make(cfg.mode, cfg.frames, space.frame_width(), space.frame_height());
  const QuerySet out = asam_forward(dec.modules[0], cfg, q, space);
  EXPECT_EQ(out.spatial.dims(), q.spatial.dims());
  EXPECT_EQ(out.positional.dims(), q.positional.dims());
  EXPECT_EQ(out.temporal.dims(), q.temporal.dims());
}

TEST_P(AsamModes, ZeroInitKeepsPositionalQueries) {
  ParameterStore store;
  Rng rng(2);
  const auto cfg = small_config(GetParam());
  const auto dec = Decoder::create(store, cfg, rng);
  const auto space = random_space(rng, 8, 2, 8);
  const QuerySet q = dec.init.make(cfg.mode, cfg.frames, space.frame_width(), space.frame_height());
  const QuerySet out = asam_forward(dec.modules[0], cfg, q, space);
  EXPECT_EQ(out.positional.value().vec(), q.positional.value().vec());
}

TEST_P(AsamModes, ZeroInitMixingIsResidualIdentity) {
  // With zero output transforms the mixed queries equal the attended queries.
  ParameterStore store;
  Rng rng(3);
  auto cfg = small_config(GetParam());
  cfg.modules = 1;
  const auto dec = Decoder::create(store, cfg, rng);
  const auto space = random_space(rng, 8, 2, 8);
  const QuerySet q = dec.init.make(cfg.mode, cfg.frames, space.frame_width(), space.frame_height());
  const QuerySet with_space = asam_forward(dec.modules[0], cfg, q, space);
  const auto other = random_space(rng, 8, 2, 8);
  const QuerySet with_other = asam_forward(dec.modules[0], cfg, q, other);
  EXPECT_EQ(with_space.spatial.value().vec(), with_other.spatial.value().vec());
  EXPECT_EQ(with_space.temporal.value().vec(), with_other.temporal.value().vec());
}

TEST_P(AsamModes, PermutingInstancesPermutesOutputs) {
  ParameterStore store;
  Rng rng(4);
  const auto cfg = small_config(GetParam());
  const auto dec = Decoder::create(store, cfg, rng);
  randomize(store, rng);
  const auto space = random_space(rng, 8, 2, 8);
  const DecoderOutput a = decoder_forward(dec, space);
  const std::vector<std::size_t> perm{2, 0, 3, 1};
  for (Parameter* p : {dec.init.spatial, dec.init.temporal}) {
    const Tensor old = p->value();
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t c = 0; c < 8; ++c) p->value().at({i, c}) = old.at({perm[i], c});
  }
  const DecoderOutput b = decoder_forward(dec, space);
  auto check = [&](const Var& va, const Var& vb) {
    const std::size_t row = va.size() / 4;
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t c = 0; c < row; ++c)
        EXPECT_NEAR(vb.value()[i * row + c], va.value()[perm[i] * row + c], 1e-12);
  };
  for (std::size_t m = 0; m < cfg.modules; ++m) {
    check(a.stages[m].boxes, b.stages[m].boxes);
    if (cfg.mode == DetectorMode::kKeyframe) {
      check(a.stages[m].human, b.stages[m].human);
      check(a.stages[m].action, b.stages[m].action);
    } else {
      check(a.stages[m].classes, b.stages[m].classes);
    }
  }
}

TEST_P(AsamModes, StageCountAndDeterminism) {
  const auto cfg = small_config(GetParam());
  auto run = [&] {
    ParameterStore store;
    Rng rng(5);
    const auto dec = Decoder::create(store, cfg, rng);
    randomize(store, rng);
    const auto space = random_space(rng, 8, 2, 8);
    return decoder_forward(dec, space);
  };
  const auto a = run(), b = run();
  ASSERT_EQ(a.stages.size(), cfg.modules);
  EXPECT_EQ(a.final().boxes.value().vec(), b.final().boxes.value().vec());
}

TEST_P(AsamModes, SingleModuleEqualsAsamPlusHeads) {
  ParameterStore store;
  Rng rng(6);
  auto cfg = small_config(GetParam());
  cfg.modules = 1;
  const auto dec = Decoder::create(store, cfg, rng);
  randomize(store, rng);
  const auto space = random_space(rng, 8, 2, 8);
  const auto out = decoder_forward(dec, space);
  const QuerySet q = asam_forward(dec.modules[0], cfg,
                                  dec.init.make(cfg.mode, cfg.frames, space.frame_width(), space.frame_height()), space);
  const auto heads = cfg.mode == DetectorMode::kKeyframe ? predict_heads_keyframe(dec.modules[0], cfg, q)
                                                         : predict_heads_tubelet(dec.modules[0], q);
  EXPECT_EQ(out.final().boxes.value().vec(), heads.boxes.value().vec());
}

INSTANTIATE_TEST_SUITE_P(Modes, AsamModes, ::testing::Values(DetectorMode::kKeyframe, DetectorMode::kTubelet),
                         [](const auto& info) { return mode_name(info.param); });

TEST(Heads, KeyframeShapesAndRanges) {
  ParameterStore store;
  Rng rng(7);
  const auto cfg = small_config(DetectorMode::kKeyframe);
  const auto dec = Decoder::create(store, cfg, rng);
  randomize(store, rng);
  const auto out = decoder_forward(dec, random_space(rng, 8, 2, 8)).final();
  EXPECT_EQ(out.boxes.dims(), (Shape{4, 4}));
  EXPECT_EQ(out.human.dims(), (Shape{4, 2}));
  EXPECT_EQ(out.action.dims(), (Shape{4, 3}));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(out.human.value()[2 * i] + out.human.value()[2 * i + 1], 1.0, 1e-9);
  for (double a : out.action.value().data()) {
    EXPECT_GT(a, 0.0);
    EXPECT_LT(a, 1.0);
  }
}

TEST(Heads, TubeletShapesAndSimplex) {
  ParameterStore store;
  Rng rng(8);
  const auto cfg = small_config(DetectorMode::kTubelet);
  const auto dec = Decoder::create(store, cfg, rng);
  randomize(store, rng, 1.0);
  const auto out = decoder_forward(dec, random_space(rng, 8, 2, 8)).final();
  EXPECT_EQ(out.boxes.dims(), (Shape{4, 2, 4}));
  EXPECT_EQ(out.classes.dims(), (Shape{4, 4}));
  for (std::size_t i = 0; i < 4; ++i) {
    double s = 0;
    for (std::size_t c = 0; c < 4; ++c) s += out.classes.value()[i * 4 + c];
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
}

TEST(Heads, WrongModeRejected) {
  ParameterStore sk, st;
  Rng rng(9);
  const auto kcfg = small_config(DetectorMode::kKeyframe);
  const auto dk = Decoder::create(sk, kcfg, rng);
  const QuerySet tq = dk.init.make(DetectorMode::kTubelet, 2, 32, 32);
  EXPECT_THROW(predict_heads_keyframe(dk.modules[0], kcfg, tq), ConfigError);
  const QuerySet kq = dk.init.make(DetectorMode::kKeyframe, 2, 32, 32);
  EXPECT_THROW(predict_heads_tubelet(dk.modules[0], kq), ConfigError);
  EXPECT_THROW(asam_forward(dk.modules[0], kcfg, tq, random_space(rng, 8, 2, 8)), ConfigError);
}

TEST(Heads, SingleFrameTubeletBoxesMatchKeyframeDecode) {
  ParameterStore store;
  Rng rng(10);
  auto cfg = small_config(DetectorMode::kTubelet);
  cfg.frames = 1;
  const auto dec = Decoder::create(store, cfg, rng);
  randomize(store, rng);
  const auto out = decoder_forward(dec, random_space(rng, 8, 1, 8)).final();
  ASSERT_EQ(out.boxes.dims(), (Shape{4, 1, 4}));
  const Tensor& pos = out.queries.positional.value();
  for (std::size_t i = 0; i < 4; ++i) {
    const Box b = decode_box({pos[4 * i], pos[4 * i + 1], pos[4 * i + 2], pos[4 * i + 3]});
    EXPECT_NEAR(out.boxes.value()[4 * i], b.x1, 1e-12);
    EXPECT_NEAR(out.boxes.value()[4 * i + 3], b.y2, 1e-12);
  }
}

TEST(Decoder, KeyframeCopiesPointsTubeletDoesNot) {
  ParameterStore ks, ts;
  Rng rng(11);
  const auto kc = small_config(DetectorMode::kKeyframe), tc = small_config(DetectorMode::kTubelet);
  const auto kd = Decoder::create(ks, kc, rng);
  const auto td = Decoder::create(ts, tc, rng);
  randomize(ks, rng);
  randomize(ts, rng);
  const QuerySet kq = kd.init.make(kc.mode, 2, 32, 32);
  QuerySet tq = td.init.make(tc.mode, 2, 32, 32);
  EXPECT_EQ(kq.length(), 1u);
  EXPECT_EQ(tq.length(), 2u);
  const Var kp = generate_points(kq, &kd.modules[0].offsets, kc.sampling_spec());
  const std::size_t half = kp.size() / 2 / 4;
  for (std::size_t n = 0; n < 4; ++n)
    for (std::size_t i = 0; i < half; ++i) EXPECT_EQ(kp.value()[n * 2 * half + i], kp.value()[n * 2 * half + half + i]);
  tq.spatial = constant(rng.normal_tensor({4, 2, 8}, 1.0));
  const Var tp = generate_points(tq, &td.modules[0].offsets, tc.sampling_spec());
  EXPECT_NE(tp.value()[0], tp.value()[half]);
}

TEST(QueryBank, WindowRowsAndBoundaryPadding) {
  QueryBank bank;
  bank.rows = 5;
  bank.row_dim = 2;
  for (int i = 0; i < 3; ++i) bank.clips.push_back(Tensor::full({5, 2}, i + 1.0));
  EXPECT_EQ(bank.window(1, 60).dim(0), 300u);
  QueryBank one;
  one.rows = 1;
  one.row_dim = 2;
  one.clips.push_back(Tensor({1, 2}, {3, 4}));
  EXPECT_EQ(one.window(0, 2).vec(), (std::vector<double>{0, 0, 3, 4}));
  EXPECT_EQ(bank.window(2, 4).at({0, 0}), 1.0);   // clip 0
  EXPECT_EQ(bank.window(2, 4).at({15, 0}), 0.0);  // clip 3 is out of range
}

TEST(QueryBank, TopKByHumanScoreWithTiesAndPadding) {
  DetectionOutput out;
  out.human = constant(Tensor({3, 2}, {0.2, 0.8, 0.9, 0.1, 0.2, 0.8}));
  out.queries.mode = DetectorMode::kKeyframe;
  out.queries.spatial = constant(Tensor({3, 1, 1}, {10, 11, 12}));
  out.queries.temporal = constant(Tensor({3, 1}, {20, 21, 22}));
  const Tensor rows = select_bank_rows(out, 5);
  EXPECT_EQ(rows.vec(), (std::vector<double>{11, 21, 10, 20, 12, 22, 0, 0, 0, 0}));
}

TEST(QueryBank, BuildFromVideo) {
  ParameterStore store;
  Rng rng(12);
  const auto cfg = small_config(DetectorMode::kKeyframe);
  const auto dec = Decoder::create(store, cfg, rng);
  const auto bank = build_query_bank(dec, {random_space(rng, 8, 2, 8)}, 3);
  ASSERT_EQ(bank.clips.size(), 1u);
  EXPECT_EQ(bank.clips[0].dims(), (Shape{3, 16}));
}

TEST(LongTerm, ZeroBankReducesToConstantContext) {
  ParameterStore store;
  Rng rng(13);
  const auto lt = LongTermClassifier::create(store, "lt", 4, 2, 3, 5, rng);
  const Var s = constant(rng.normal_tensor({3, 8}, 1.0));
  const Var logits = long_term_classify(lt, s, Tensor({6, 8}));
  ASSERT_EQ(logits.dims(), (Shape{3, 5}));
  const auto& last = lt.layers.back();
  const Var c = last.out_proj(constant(last.v_proj.bias->value().reshaped({1, 8})));
  const Var expected = lt.head(concat({s, repeat_new_axis(reshape(c, {8}), 0, 3)}, 1));
  EXPECT_LT(max_abs_diff(logits.value(), expected.value()), 1e-12);
}

TEST(LongTerm, DecoderNeedsBank) {
  ParameterStore store;
  Rng rng(14);
  auto cfg = small_config(DetectorMode::kKeyframe);
  cfg.classifier = ClassifierKind::kLongTerm;
  cfg.bank_rows = 2;
  cfg.bank_window = 2;
  const auto dec = Decoder::create(store, cfg, rng);
  const auto space = random_space(rng, 8, 2, 8);
  EXPECT_THROW(decoder_forward(dec, space), ConfigError);
  const Tensor window = rng.normal_tensor({4, 16}, 1.0);
  const auto out = decoder_forward(dec, space, &window);
  EXPECT_EQ(out.final().action.dims(), (Shape{4, 3}));
  EXPECT_EQ(dec.modules[0].long_term->layers.size(), 3u);
}

TEST(LongTerm, GradientsDoNotReachBank) {
  ParameterStore store;
  Rng rng(15);
  const auto lt = LongTermClassifier::create(store, "lt", 2, 2, 2, 3, rng);
  Var s(rng.normal_tensor({2, 4}, 1.0), true);
  const Tensor window = rng.normal_tensor({5, 4}, 1.0);
  const Var w = constant(rng.normal_tensor({2, 3}, 1.0));
  auto f = [&] { return sum(mul(long_term_classify(lt, s, window), w)); };
  std::vector<GradTarget> targets{{"s", s}};
  for (auto& p : store.all()) targets.push_back({p.name(), p.var()});
  EXPECT_TRUE(check_gradients(f, targets).passed());
}

TEST(Decoder, EndToEndGradientsSmall) {
  for (auto mode : {DetectorMode::kKeyframe, DetectorMode::kTubelet}) {
    ParameterStore store;
    Rng rng(16);
    auto cfg = small_config(mode);
    cfg.queries = 2;
    cfg.dim = 4;
    cfg.heads = 1;
    const auto dec = Decoder::create(store, cfg, rng);
    randomize(store, rng, 0.3);
    const auto space = random_space(rng, 4, 2, 4);
    const Tensor wb = rng.normal_tensor(mode == DetectorMode::kKeyframe ? Shape{2, 4} : Shape{2, 2, 4}, 0.05);
    const Tensor wc = rng.normal_tensor(mode == DetectorMode::kKeyframe ? Shape{2, 3} : Shape{2, 4}, 1.0);
    auto f = [&] {
      const auto out = decoder_forward(dec, space);
      std::vector<Var> terms;
      for (const auto& st : out.stages) {
        terms.push_back(sum(mul(st.boxes, constant(wb))));
        terms.push_back(sum(mul(mode == DetectorMode::kKeyframe ? st.action : st.classes, constant(wc))));
      }
      return sum_of(terms);
    };
    const auto report = check_gradients(f, store);
    EXPECT_TRUE(report.passed()) << mode_name(mode) << " " << report.max_error << " of " << report.checked;
  }
}
