#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include "nirsfb/dsp.hpp"
#include "nirsfb/subject_sim.hpp"

using namespace nirsfb;

namespace {

SubjectParams quiet() {
  SubjectParams p;
  p.noise_sigma = 0.0;
  p.hrv_jitter_bpm = 0.0;
  p.induction = 0.0;
  p.fatigue_rate = 0.0;
  p.learning_rate = 0.0;
  return p;
}

template <typename F>
ErrorCode code_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected an nirsfb::Error";
  return ErrorCode::Io;
}

}  // namespace

TEST(SubjectModel, ConstantStreamWithStochasticTermsOff) {
  auto p = quiet();
  p.cardiac_amp_hbo = p.cardiac_amp_hhb = 0.0;
  SubjectModel m(p, 10.0);
  SampleClock clock;
  const auto first = m.step(clock, BlockKind::Rest, false);
  for (int i = 0; i < 500; ++i) {
    clock.advance();
    const auto f = m.step(clock, BlockKind::Rest, false);
    for (std::size_t c = 0; c < kChannelCount; ++c) {
      EXPECT_EQ(f[c].intensity, first[c].intensity);
      EXPECT_EQ(f[c].t_index, clock.t_index);
    }
  }
}

TEST(SubjectModel, CardiacPeriodAndRecoveredRate) {
  SubjectModel m(quiet(), 10.0);
  SampleClock clock;
  HeartRateTracker hr(PeakDetectorConfig{});
  std::vector<double> bpm;
  for (int i = 0; i < 1200; ++i) {
    m.step(clock, BlockKind::Rest, false);
    const double hbo = m.commanded()[0].hbo;
    // the analytic wave: period 60/72 s, i.e. 50/6 samples
    ASSERT_NEAR(hbo, 0.3 * std::sin(2.0 * std::numbers::pi * static_cast<double>(i) * 6.0 / 50.0), 1e-9);
    if (auto u = hr.push(hbo, clock.t_index); u.hrv) bpm.push_back(u.hrv->bpm);
    clock.advance();
  }
  ASSERT_GT(bpm.size(), 100u);
  double mean = 0.0;
  for (double b : bpm) mean += b;
  mean /= static_cast<double>(bpm.size());
  EXPECT_NEAR(mean, 72.0, 2.0);
}

TEST(SubjectModel, FullResponsivenessEndsStressWithinASecond) {
  auto p = quiet();
  p.initial_stress = 1;
  p.responsiveness = 1.0;
  p.spontaneous_recovery = 0.0;
  SubjectModel m(p, 10.0);
  ASSERT_EQ(m.truth_label(), 1);
  SampleClock clock;
  for (int i = 0; i < 10; ++i) {
    m.step(clock, BlockKind::Calculation, true);
    clock.advance();
  }
  EXPECT_EQ(m.truth_label(), 0);
}

TEST(SubjectModel, FreshModelRestsAndForcedInductionStresses) {
  auto p = quiet();
  p.induction = 1.0;
  p.spontaneous_recovery = 0.0;
  SubjectModel m(p, 10.0);
  EXPECT_EQ(m.truth_label(), 0);
  SampleClock clock;
  for (int i = 0; i < 10; ++i) {
    m.step(clock, BlockKind::Calculation, false);
    clock.advance();
  }
  EXPECT_EQ(m.truth_label(), 1);
}

TEST(SubjectModel, ScriptedProbabilitiesReproduceScript) {
  auto p = quiet();
  p.induction = 1.0;
  p.recovery = 1.0;
  p.spontaneous_recovery = 0.0;
  p.responsiveness = 0.0;
  SubjectModel m(p, 10.0);
  SampleClock clock;
  const std::vector<std::pair<BlockKind, int>> script{{BlockKind::Rest, 37},  {BlockKind::Calculation, 50},
                                                      {BlockKind::Rest, 20},  {BlockKind::SpecialTest, 15},
                                                      {BlockKind::Rest, 100}, {BlockKind::Calculation, 3}};
  for (const auto& [kind, n] : script) {
    for (int i = 0; i < n; ++i) {
      m.step(clock, kind, i % 2 == 0);
      ASSERT_EQ(m.truth_label(), is_task(kind) ? 1 : 0) << to_string(kind) << " " << i;
      clock.advance();
    }
  }
}

TEST(SubjectModel, DeterministicForSeedAndFeedback) {
  SubjectParams p;
  p.rng_seed = 77;
  auto run = [&](std::uint64_t seed) {
    auto q = p;
    q.rng_seed = seed;
    SubjectModel m(q, 10.0);
    SampleClock clock;
    std::vector<OpticalFrame> out;
    for (int i = 0; i < 2000; ++i) {
      const auto kind = (i / 100) % 2 ? BlockKind::Calculation : BlockKind::Rest;
      for (const auto& f : m.step(clock, kind, (i / 7) % 3 == 0)) out.push_back(f);
      clock.advance();
    }
    return out;
  };
  EXPECT_EQ(run(77), run(77));
  EXPECT_NE(run(77), run(78));
}

TEST(SubjectModel, ForwardMapInvertsToCommandedConcentrations) {
  SubjectParams p;
  p.noise_sigma = 0.0;
  p.induction = 0.5;
  SubjectModel m(p, 10.0);
  CalibrationBaseline b;
  b.i0 = p.source_intensity;
  b.ambient = p.ambient;
  const HemoConverter conv(p.optics, b);
  SampleClock clock;
  for (int i = 0; i < 3000; ++i) {
    const auto frames = m.step(clock, i % 200 < 100 ? BlockKind::Rest : BlockKind::Calculation, false);
    for (std::size_t c = 0; c < kChannelCount; ++c) {
      const auto s = conv.convert(frames[c]);
      ASSERT_NEAR(s.hbo, m.commanded()[c].hbo, 1e-9);
      ASSERT_NEAR(s.hhb, m.commanded()[c].hhb, 1e-9);
    }
    clock.advance();
  }
}

TEST(SubjectModel, DarkFramesCarryAmbient) {
  SubjectModel m(SubjectParams{}, 10.0);
  const auto d = m.dark_frames(SampleClock{10.0, 4});
  EXPECT_TRUE(d[0].led_off);
  EXPECT_EQ(d[1].t_index, 4u);
  EXPECT_EQ(d[1].intensity, SubjectParams{}.ambient[1]);
}

TEST(SubjectModel, InductionGrowsWithFatigueAndShrinksWithVibration) {
  SubjectParams p = quiet();
  p.induction = 0.2;
  p.fatigue_rate = 0.5;
  p.learning_rate = 0.05;
  p.spontaneous_recovery = 1.0;
  SubjectModel m(p, 10.0);
  EXPECT_EQ(m.effective_induction(BlockKind::Rest), 0.0);
  EXPECT_DOUBLE_EQ(m.effective_induction(BlockKind::Calculation), 0.2);
  EXPECT_DOUBLE_EQ(m.effective_induction(BlockKind::SpecialTest), 0.3);
  SampleClock clock;
  for (int i = 0; i < 600; ++i) {
    m.step(clock, BlockKind::Calculation, false);
    clock.advance();
  }
  EXPECT_NEAR(m.effective_induction(BlockKind::Calculation), 0.2 * 1.5, 1e-9);
  for (int i = 0; i < 100; ++i) {
    m.step(clock, BlockKind::Rest, true);
    clock.advance();
  }
  EXPECT_NEAR(m.effective_induction(BlockKind::Calculation), 0.3 * std::exp(-0.05 * 10.0), 1e-9);
}

TEST(SubjectParams, Validation) {
  auto bad = SubjectParams{};
  bad.induction = 1.5;
  EXPECT_EQ(code_of([&] { SubjectModel(bad, 10.0); }), ErrorCode::InvalidConfig);
  bad = {};
  bad.base_heart_rate = 200.0;
  EXPECT_EQ(code_of([&] { SubjectModel(bad, 10.0); }), ErrorCode::InvalidConfig);
  // 72 + 12 + 2 bpm needs more than 2.87 Hz
  EXPECT_EQ(code_of([] { SubjectModel(SubjectParams{}, 2.5); }), ErrorCode::InvalidConfig);
  bad = {};
  bad.ambient[0][0] = 5000.0;
  EXPECT_EQ(code_of([&] { SubjectModel(bad, 10.0); }), ErrorCode::InvalidConfig);
}

TEST(SubjectParams, FromConfig) {
  const auto p = SubjectParams::from_config(KeyValueConfig::parse(
      "subject.base_heart_rate = 65\nsubject.induction = 0.1\nsubject.seed = 99\nsubject.ambient = 1, 2, 3, 4\n"));
  EXPECT_DOUBLE_EQ(p.base_heart_rate, 65.0);
  EXPECT_DOUBLE_EQ(p.induction, 0.1);
  EXPECT_EQ(p.rng_seed, 99u);
  EXPECT_DOUBLE_EQ(p.ambient[1][1], 4.0);
  EXPECT_EQ(code_of([] { SubjectParams::from_config(KeyValueConfig::parse("subject.ambient = 1, 2\n")); }),
            ErrorCode::InvalidConfig);
}

TEST(PerSampleProbability, CompoundsToPerSecond) {
  const double p = per_sample_probability(0.3, 10.0);
  EXPECT_NEAR(1.0 - std::pow(1.0 - p, 10.0), 0.3, 1e-12);
  EXPECT_EQ(per_sample_probability(1.0, 10.0), 1.0);
  EXPECT_EQ(per_sample_probability(0.0, 10.0), 0.0);
}
