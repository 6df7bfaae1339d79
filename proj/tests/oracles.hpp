#pragma once

// Direct recomputations used as references by the unit tests and the
// acceptance binary. Everything here works on whole buffers with two-pass
// arithmetic and shares no code with the streaming implementation.

#include <cmath>
#include <complex>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <vector>

#include "nirsfb/features.hpp"

namespace oracle {

inline double window_mean(const std::vector<double>& x, std::size_t end, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = end + 1 - n; i <= end; ++i) s += x[i];
  return s / static_cast<double>(n);
}

inline double window_pstd(const std::vector<double>& x, std::size_t end, std::size_t n) {
  const double m = window_mean(x, end, n);
  double s = 0.0;
  for (std::size_t i = end + 1 - n; i <= end; ++i) s += (x[i] - m) * (x[i] - m);
  return std::sqrt(s / static_cast<double>(n));
}

// least squares slope of y against 0..n-1
inline double ls_slope(const std::vector<double>& y, std::size_t end, std::size_t n) {
  const double xm = (static_cast<double>(n) - 1.0) / 2.0;
  const double ym = window_mean(y, end, n);
  double num = 0.0, den = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    const double dx = static_cast<double>(k) - xm;
    num += dx * (y[end + 1 - n + k] - ym);
    den += dx * dx;
  }
  return num / den;
}

// Batch restatement of the peak rules. Returns indices into x.
inline std::vector<std::size_t> offline_peaks(const std::vector<double>& x, const nirsfb::PeakDetectorConfig& cfg) {
  std::vector<std::size_t> out;
  std::optional<std::size_t> last;
  for (std::size_t i = 1; i + 1 < x.size(); ++i) {
    if (i + 1 < cfg.stats_window) continue;
    const double m = window_mean(x, i, cfg.stats_window);
    const double sd = window_pstd(x, i, cfg.stats_window);
    const double theta =
        cfg.policy == nirsfb::ThresholdPolicy::Adaptive ? m + cfg.threshold_k * sd : cfg.fixed_threshold;
    const bool local_max = x[i] > x[i - 1] && x[i] >= x[i + 1];
    const bool above = x[i] > theta && x[i] - m >= cfg.sigma_factor * sd;
    if (!local_max || !above) continue;
    if (last && static_cast<double>(i - *last) < cfg.refractory_samples() - 1e-9) continue;
    last = i;
    out.push_back(i);
  }
  return out;
}

inline double goertzel_power(const std::vector<double>& x, double f, double fs) {
  std::complex<double> acc{0.0, 0.0};
  const double w = 2.0 * std::numbers::pi * f / fs;
  for (std::size_t n = 0; n < x.size(); ++n) acc += x[n] * std::polar(1.0, -w * static_cast<double>(n));
  return std::norm(acc) / static_cast<double>(x.size() * x.size());
}

// Expected feature vectors for a contiguous recording starting at t = 0.
// streams are indexed like the feature layout: deep HBO, deep HHB,
// superficial HBO, superficial HHB.
inline std::vector<nirsfb::FeatureVector> brute_features(const std::array<std::vector<double>, 4>& streams,
                                                         const nirsfb::FeatureExtractorConfig& cfg) {
  using namespace nirsfb;
  const std::size_t len = streams[0].size();
  const std::size_t s1 = cfg.stage1_n, n = cfg.window.n;
  const std::size_t maw = cfg.window.ma_window(), slw = cfg.window.slope_window();
  const double nan = std::numeric_limits<double>::quiet_NaN();

  std::vector<FeatureVector> out(len);
  for (std::size_t t = 0; t < len; ++t) out[t].t_index = t;

  std::vector<double> hrv_stage1;
  for (std::size_t s = 0; s < 4; ++s) {
    const auto& x = streams[s];
    std::vector<double> st1(len, nan), st2(len, nan), slope(len, nan);
    for (std::size_t t = s1 - 1; t < len; ++t) st1[t] = window_mean(x, t, s1);
    const std::size_t first2 = s1 - 1 + n - 1;
    for (std::size_t t = first2; t < len; ++t) {
      st2[t] = window_mean(st1, t, n);
      slope[t] = ls_slope(st1, t, n);
    }
    for (std::size_t t = 0; t < len; ++t) {
      auto& v = out[t];
      const std::size_t base = s * kFeaturesPerStream;
      if (t + 1 >= first2 + maw) {
        v.valid[base] = v.valid[base + 1] = true;
        v.values[base] = window_mean(st2, t, maw);
        v.values[base + 1] = window_pstd(st2, t, maw);
      }
      if (t + 1 >= first2 + slw) {
        v.valid[base + 2] = v.valid[base + 3] = true;
        v.values[base + 2] = window_mean(slope, t, slw);
        v.values[base + 3] = window_pstd(slope, t, slw);
      }
    }
    if (s == stream_index(cfg.hrv_channel, cfg.hrv_signal)) {
      hrv_stage1.assign(st1.begin() + static_cast<std::ptrdiff_t>(s1 - 1), st1.end());
    }
  }

  // beats on the stage-1 heart stream, then rates between consecutive beats
  const auto peaks = offline_peaks(hrv_stage1, cfg.peaks);
  std::vector<HrvSample> rates;
  for (std::size_t k = 1; k < peaks.size(); ++k) {
    rates.push_back({peaks[k] + s1 - 1, 60.0 * cfg.fs / static_cast<double>(peaks[k] - peaks[k - 1])});
  }
  const double span = cfg.window.x3_window_s * cfg.fs;
  std::size_t seen = 0;
  for (std::size_t t = 0; t < len; ++t) {
    // a beat at p is confirmed while pushing p + 1
    while (seen < rates.size() && rates[seen].t_index + 1 <= t) ++seen;
    if (seen == 0) continue;
    const auto& latest = rates[seen - 1];
    double sum = 0.0, mx = -std::numeric_limits<double>::infinity();
    std::vector<double> members;
    // rates are time ordered, so walk back until the first one out of range
    for (std::size_t k = seen; k-- > 0;) {
      if (!(static_cast<double>(latest.t_index - rates[k].t_index) < span)) break;
      members.push_back(rates[k].bpm);
    }
    for (double b : members) {
      sum += b;
      mx = std::max(mx, b);
    }
    const double mean = sum / static_cast<double>(members.size());
    double ss = 0.0;
    for (double b : members) ss += (b - mean) * (b - mean);
    auto& v = out[t];
    v.values[kHrvOffset + 0] = mean;
    v.values[kHrvOffset + 1] = std::sqrt(ss / static_cast<double>(members.size()));
    v.values[kHrvOffset + 2] = mx;
    v.values[kHrvOffset + 3] = latest.bpm;
    for (std::size_t i = kHrvOffset; i < kFeatureCount; ++i) v.valid[i] = true;
  }
  return out;
}

}  // namespace oracle
