#include <gtest/gtest.h>

#include <boost/multiprecision/cpp_bin_float.hpp>
#include <random>
#include <vector>

#include "nirsfb/hemodynamics.hpp"

using namespace nirsfb;
using Precise = boost::multiprecision::cpp_bin_float_50;

namespace {

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

BeerLambertParams random_params(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> eps(0.05, 0.5), path(10.0, 40.0), dpf(4.0, 8.0);
  BeerLambertParams p;
  do {
    p.extinction = {{{eps(rng), eps(rng)}, {eps(rng), eps(rng)}}};
  } while (std::abs(p.determinant()) < 1e-3);
  p.pathlength_mm = path(rng);
  p.dpf = {dpf(rng), dpf(rng)};
  return p;
}

}  // namespace

TEST(Absorbance, IdentityAndDecade) {
  EXPECT_EQ(absorbance(1234.5, 1234.5, 0.0), 0.0);
  EXPECT_DOUBLE_EQ(absorbance(100.0, 1000.0, 0.0), 1.0);
  // decade measured above an ambient floor
  EXPECT_DOUBLE_EQ(absorbance(15.0, 105.0, 5.0), 1.0);
}

TEST(Absorbance, MatchesExtendedPrecisionLog) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> g_dist(0.0, 50.0), span(1.0, 5000.0);
  for (int i = 0; i < 2000; ++i) {
    const double g = g_dist(rng);
    const double i0 = g + span(rng);
    const double in = g + span(rng);
    const Precise ref = boost::multiprecision::log10((Precise(i0) - Precise(g)) / (Precise(in) - Precise(g)));
    EXPECT_NEAR(absorbance(in, i0, g), ref.convert_to<double>(), 1e-12);
  }
}

TEST(Absorbance, MonotoneInIntensityAndBaseline) {
  double prev = std::numeric_limits<double>::infinity();
  for (double i = 10.0; i < 2000.0; i += 37.0) {
    const double a = absorbance(i, 1000.0, 5.0);
    EXPECT_LT(a, prev);
    prev = a;
  }
  prev = -std::numeric_limits<double>::infinity();
  for (double i0 = 10.0; i0 < 2000.0; i0 += 37.0) {
    const double a = absorbance(500.0, i0, 5.0);
    EXPECT_GT(a, prev);
    prev = a;
  }
}

TEST(Absorbance, RejectsIntensityAtOrBelowAmbient) {
  EXPECT_EQ(code_of([] { absorbance(5.0, 100.0, 5.0); }), ErrorCode::NonPositiveIntensity);
  EXPECT_EQ(code_of([] { absorbance(50.0, 4.0, 5.0); }), ErrorCode::NonPositiveIntensity);
}

TEST(InvertBeerLambert, ZeroAttenuationGivesZeroChange) {
  const auto c = invert_beer_lambert({0.0, 0.0}, BeerLambertParams{});
  EXPECT_EQ(c.hbo, 0.0);
  EXPECT_EQ(c.hhb, 0.0);
}

TEST(InvertBeerLambert, RecoversKnownPair) {
  const BeerLambertParams p;
  const auto c = invert_beer_lambert(forward_beer_lambert({1.0, -0.5}, p), p);
  EXPECT_NEAR(c.hbo, 1.0, 1e-9);
  EXPECT_NEAR(c.hhb, -0.5, 1e-9);
}

TEST(InvertBeerLambert, IdenticalRowsAreSingular) {
  BeerLambertParams p;
  p.extinction = {{{0.2, 0.3}, {0.2, 0.3}}};
  EXPECT_EQ(code_of([&] { invert_beer_lambert({0.1, 0.1}, p); }), ErrorCode::SingularMatrix);
  EXPECT_TRUE(std::isinf(p.condition_number()));
}

TEST(InvertBeerLambert, RoundTripOverRandomParamsAndConcentrations) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> conc(-5.0, 5.0);
  for (int i = 0; i < 2000; ++i) {
    const auto p = random_params(rng);
    const ConcentrationPair c{conc(rng), conc(rng)};
    const auto back = invert_beer_lambert(forward_beer_lambert(c, p), p);
    EXPECT_NEAR(back.hbo, c.hbo, 1e-9);
    EXPECT_NEAR(back.hhb, c.hhb, 1e-9);
  }
}

TEST(InvertBeerLambert, IsLinear) {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> a(-0.05, 0.05), s(-10.0, 10.0);
  const BeerLambertParams p;
  for (int i = 0; i < 500; ++i) {
    const AttenuationPair da{a(rng), a(rng)};
    const double k = s(rng);
    const auto base = invert_beer_lambert(da, p);
    const auto scaled = invert_beer_lambert({k * da[0], k * da[1]}, p);
    EXPECT_NEAR(scaled.hbo, k * base.hbo, 1e-9);
    EXPECT_NEAR(scaled.hhb, k * base.hhb, 1e-9);
  }
}

TEST(BeerLambertParams, ConditionNumberOfDefaultsIsModest) {
  const BeerLambertParams p;
  EXPECT_GT(p.condition_number(), 1.0);
  EXPECT_LT(p.condition_number(), 20.0);
}

namespace {
std::vector<OpticalFrame> constant_window(std::size_t ticks, double value) {
  std::vector<OpticalFrame> frames;
  for (std::size_t t = 0; t < ticks; ++t) {
    frames.push_back({t, Channel::Deep, {value, value}, false});
    frames.push_back({t, Channel::Superficial, {value, value}, false});
  }
  return frames;
}
}  // namespace

TEST(Calibrate, ConstantStreamWithoutDarkFrames) {
  const auto frames = constant_window(50, 1000.0);
  const auto b = calibrate(frames, 5.0, 10.0);
  for (std::size_t c = 0; c < kChannelCount; ++c) {
    for (std::size_t w = 0; w < kWavelengthCount; ++w) {
      EXPECT_DOUBLE_EQ(b.i0[c][w], 1000.0);
      EXPECT_EQ(b.ambient[c][w], 0.0);
    }
  }
}

TEST(Calibrate, NoisyStreamGivesSampleMean) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> noise(-10.0, 10.0);
  std::vector<OpticalFrame> frames;
  double deep_sum = 0.0;
  for (std::uint64_t t = 0; t < 50; ++t) {
    const double v = 1000.0 + noise(rng);
    deep_sum += v;
    frames.push_back({t, Channel::Deep, {v, 900.0}, false});
    frames.push_back({t, Channel::Superficial, {800.0, 700.0}, false});
  }
  const auto b = calibrate(frames, 5.0, 10.0);
  EXPECT_NEAR(b.i0[0][0], deep_sum / 50.0, 1e-12);
  EXPECT_DOUBLE_EQ(b.i0[0][1], 900.0);
}

TEST(Calibrate, DarkFramesSetAmbient) {
  auto frames = constant_window(50, 1000.0);
  frames.push_back({50, Channel::Deep, {4.0, 6.0}, true});
  frames.push_back({50, Channel::Superficial, {2.0, 2.0}, true});
  const auto b = calibrate(frames, 5.0, 10.0);
  EXPECT_DOUBLE_EQ(b.ambient[0][0], 4.0);
  EXPECT_DOUBLE_EQ(b.ambient[0][1], 6.0);
  EXPECT_DOUBLE_EQ(b.ambient[1][0], 2.0);
  EXPECT_DOUBLE_EQ(b.i0[0][0], 1000.0);
}

TEST(Calibrate, Errors) {
  EXPECT_EQ(code_of([] { calibrate({}, 5.0, 10.0); }), ErrorCode::EmptyWindow);
  const auto short_window = constant_window(20, 1000.0);
  EXPECT_EQ(code_of([&] { calibrate(short_window, 5.0, 10.0); }), ErrorCode::EmptyWindow);
  auto bad = constant_window(50, 1000.0);
  bad[3].intensity[1] = 0.0;
  EXPECT_EQ(code_of([&] { calibrate(bad, 5.0, 10.0); }), ErrorCode::NonPositiveIntensity);
}

TEST(HemoConverter, RecoversConcentrationsFromSyntheticIntensities) {
  const BeerLambertParams p;
  CalibrationBaseline b;
  b.i0 = {{{2000.0, 1800.0}, {2400.0, 2200.0}}};
  b.ambient = {{{5.0, 5.0}, {5.0, 5.0}}};
  const HemoConverter conv(p, b);
  const ConcentrationPair c{0.8, -0.3};
  const auto da = forward_beer_lambert(c, p);
  const OpticalFrame f{7, Channel::Superficial,
                       {intensity_from_attenuation(da[0], 2400.0, 5.0), intensity_from_attenuation(da[1], 2200.0, 5.0)}};
  const auto s = conv.convert(f);
  EXPECT_EQ(s.t_index, 7u);
  EXPECT_EQ(s.channel, Channel::Superficial);
  EXPECT_NEAR(s.hbo, 0.8, 1e-9);
  EXPECT_NEAR(s.hhb, -0.3, 1e-9);
}
