#pragma once

// The 20-dimensional real-time feature space.
//
// Layout (fixed; persisted models depend on it):
//   for channel in {deep, superficial}:
//     for signal in {HBO, HHB}:
//       mean_ma, std_ma, mean_slope, std_slope
//   mean_hrv, std_hrv, max_hrv, inst_hrv
//
// Per stream, the stage-1 output (denoised, cardiac intact) feeds both a
// stage-2 moving average and a least-squares slope estimator, each with
// window N. mean/std of the stage-2 output use the last (1 + x1) N values,
// mean/std of the slope use the last (2 + x2) N values. With x1 = x2 + 1
// both windows are 3N long and both aggregates become valid on the same
// sample.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <deque>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "nirsfb/config.hpp"
#include "nirsfb/dsp.hpp"
#include "nirsfb/error.hpp"
#include "nirsfb/hemodynamics.hpp"

namespace nirsfb {

inline constexpr std::size_t kFeatureCount = 20;
inline constexpr std::size_t kStreamCount = 4;
inline constexpr std::size_t kFeaturesPerStream = 4;
inline constexpr std::size_t kHrvOffset = kStreamCount * kFeaturesPerStream;

enum class Signal : std::uint8_t { Hbo = 0, Hhb = 1 };

enum class StreamFeature : std::uint8_t { MeanMa = 0, StdMa = 1, MeanSlope = 2, StdSlope = 3 };

enum class HrvFeature : std::uint8_t { Mean = 0, Std = 1, Max = 2, Instantaneous = 3 };

constexpr std::size_t stream_index(Channel c, Signal s) noexcept {
  return index_of(c) * 2 + static_cast<std::size_t>(s);
}

constexpr std::size_t feature_index(Channel c, Signal s, StreamFeature f) noexcept {
  return stream_index(c, s) * kFeaturesPerStream + static_cast<std::size_t>(f);
}

constexpr std::size_t feature_index(HrvFeature f) noexcept { return kHrvOffset + static_cast<std::size_t>(f); }

inline const std::array<std::string, kFeatureCount>& feature_names() {
  static const std::array<std::string, kFeatureCount> names = [] {
    std::array<std::string, kFeatureCount> out;
    const char* channels[] = {"deep", "superficial"};
    const char* signals[] = {"hbo", "hhb"};
    const char* stats[] = {"mean_ma", "std_ma", "mean_slope", "std_slope"};
    std::size_t i = 0;
    for (auto* c : channels)
      for (auto* s : signals)
        for (auto* f : stats) out[i++] = std::string(c) + "." + s + "." + f;
    out[i++] = "mean_hrv";
    out[i++] = "std_hrv";
    out[i++] = "max_hrv";
    out[i++] = "inst_hrv";
    return out;
  }();
  return names;
}

struct FeatureWindowConfig {
  std::size_t n = 10;
  std::size_t x1 = 2;
  std::size_t x2 = 1;
  double x3_window_s = 10.0;

  [[nodiscard]] std::size_t ma_window() const noexcept { return (1 + x1) * n; }
  [[nodiscard]] std::size_t slope_window() const noexcept { return (2 + x2) * n; }

  void validate() const {
    if (n < 2) throw Error(ErrorCode::InvalidConfig, "feature window n must be at least 2");
    if (x2 < 1) throw Error(ErrorCode::InvalidConfig, "x2 must be at least 1");
    if (x1 != x2 + 1) throw Error(ErrorCode::InvalidConfig, "x1 must equal x2 + 1 so feature delays align");
    if (!(x3_window_s > 0.0)) throw Error(ErrorCode::InvalidConfig, "x3 window must be positive");
  }
};

// Window statistics over explicit buffers. These are the reference forms of
// the aggregates; the streaming extractor maintains the same quantities
// incrementally.

namespace detail {
inline std::span<const double> tail(std::span<const double> values, std::size_t window) {
  if (values.size() < window) throw Error(ErrorCode::NotWarm, "window not yet filled");
  return values.subspan(values.size() - window);
}

inline double mean_of(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline double pstd_of(std::span<const double> v) {
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size()));
}
}  // namespace detail

inline double mean_ma(std::span<const double> ma_outputs, const FeatureWindowConfig& cfg) {
  return detail::mean_of(detail::tail(ma_outputs, cfg.ma_window()));
}
inline double std_ma(std::span<const double> ma_outputs, const FeatureWindowConfig& cfg) {
  return detail::pstd_of(detail::tail(ma_outputs, cfg.ma_window()));
}
inline double mean_slope(std::span<const double> slopes, const FeatureWindowConfig& cfg) {
  return detail::mean_of(detail::tail(slopes, cfg.slope_window()));
}
inline double std_slope(std::span<const double> slopes, const FeatureWindowConfig& cfg) {
  return detail::pstd_of(detail::tail(slopes, cfg.slope_window()));
}

struct HrvFeatures {
  double mean = 0.0;
  double std = 0.0;
  double max = 0.0;
  double inst = 0.0;
};

/// Aggregates over the heart-rate samples in `recent` (caller has already
/// restricted them to the trailing span); `inst` is the latest sample.
inline HrvFeatures hrv_features(std::span<const HrvSample> recent, const HrvSample& latest) {
  if (recent.empty()) throw Error(ErrorCode::NotWarm, "no heart-rate samples in span");
  HrvFeatures f;
  double sum = 0.0;
  f.max = recent.front().bpm;
  for (const auto& h : recent) {
    sum += h.bpm;
    f.max = std::max(f.max, h.bpm);
  }
  const double n = static_cast<double>(recent.size());
  f.mean = sum / n;
  double ss = 0.0;
  for (const auto& h : recent) ss += (h.bpm - f.mean) * (h.bpm - f.mean);
  f.std = std::sqrt(ss / n);
  f.inst = latest.bpm;
  return f;
}

struct FeatureVector {
  std::uint64_t t_index = 0;
  std::array<double, kFeatureCount> values{};
  std::array<bool, kFeatureCount> valid{};

  [[nodiscard]] bool fully_valid() const noexcept {
    return std::all_of(valid.begin(), valid.end(), [](bool v) { return v; });
  }
  [[nodiscard]] bool time_domain_valid() const noexcept {
    return std::all_of(valid.begin(), valid.begin() + kHrvOffset, [](bool v) { return v; });
  }
};

/// One row of the training-set file.
struct LabeledVector {
  FeatureVector vector;
  std::optional<int> label;
};

inline nlohmann::json to_json(const LabeledVector& row) {
  nlohmann::json j;
  j["t_index"] = row.vector.t_index;
  if (row.label) j["label"] = *row.label;
  auto feats = nlohmann::json::array();
  auto valid = nlohmann::json::array();
  for (std::size_t i = 0; i < kFeatureCount; ++i) {
    if (row.vector.valid[i]) {
      feats.push_back(row.vector.values[i]);
    } else {
      feats.push_back(nullptr);
    }
    valid.push_back(row.vector.valid[i]);
  }
  j["features"] = std::move(feats);
  j["valid"] = std::move(valid);
  return j;
}

inline LabeledVector labeled_vector_from_json(const nlohmann::json& j) {
  LabeledVector row;
  try {
    row.vector.t_index = j.at("t_index").get<std::uint64_t>();
    if (j.contains("label") && !j["label"].is_null()) row.label = j["label"].get<int>();
    const auto& feats = j.at("features");
    const auto& valid = j.at("valid");
    if (feats.size() != kFeatureCount || valid.size() != kFeatureCount) {
      throw Error(ErrorCode::InvalidField, "feature record must hold 20 features and 20 flags");
    }
    for (std::size_t i = 0; i < kFeatureCount; ++i) {
      row.vector.valid[i] = valid[i].get<bool>();
      row.vector.values[i] = feats[i].is_null() ? 0.0 : feats[i].get<double>();
      if (row.vector.valid[i] && feats[i].is_null()) {
        throw Error(ErrorCode::InvalidField, "valid feature has no value");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidField, std::string("malformed feature record: ") + e.what());
  }
  return row;
}

/// Stage-1 filter, stage-2 filter, slope and window aggregates for one
/// (channel, signal) stream.
class StreamFeatureChain {
 public:
  StreamFeatureChain(const FeatureWindowConfig& cfg, std::size_t stage1_n)
      : stage1_(stage1_n), stage2_(cfg.n), slope_(cfg.n), ma_window_(cfg.ma_window()), slope_window_(cfg.slope_window()) {}

  struct Output {
    std::optional<double> stage1;
    std::optional<double> stage2;
    std::optional<double> slope;
  };

  Output push(double x) {
    Output o;
    o.stage1 = stage1_.push(x);
    if (!o.stage1) return o;
    o.stage2 = stage2_.push(*o.stage1);
    o.slope = slope_.push(*o.stage1);
    if (o.stage2) ma_window_.push(*o.stage2);
    if (o.slope) slope_window_.push(*o.slope);
    return o;
  }

  void write(std::span<double, kFeaturesPerStream> values, std::span<bool, kFeaturesPerStream> valid) const {
    valid[0] = valid[1] = ma_window_.full();
    valid[2] = valid[3] = slope_window_.full();
    values[0] = valid[0] ? ma_window_.mean() : 0.0;
    values[1] = valid[1] ? ma_window_.stddev() : 0.0;
    values[2] = valid[2] ? slope_window_.mean() : 0.0;
    values[3] = valid[3] ? slope_window_.stddev() : 0.0;
  }

 private:
  MovingAverage stage1_;
  MovingAverage stage2_;
  SlopeEstimator slope_;
  SlidingWindow ma_window_;
  SlidingWindow slope_window_;
};

struct FeatureExtractorConfig {
  double fs = 10.0;
  std::size_t stage1_n = 3;
  FeatureWindowConfig window{};
  PeakDetectorConfig peaks{};
  Channel hrv_channel = Channel::Deep;
  Signal hrv_signal = Signal::Hbo;

  /// Samples of filter warm-up ahead of the aggregation windows: the stage-1
  /// and stage-2 filters each hold back (window - 1) samples.
  [[nodiscard]] std::uint64_t filter_latency() const noexcept { return (stage1_n - 1) + (window.n - 1); }

  /// Aggregation window length shared by the time-domain features (3N when x2 = 1).
  [[nodiscard]] std::uint64_t aggregation_delay() const noexcept { return window.ma_window(); }

  /// Number of samples after which all 16 time-domain features are valid.
  [[nodiscard]] std::uint64_t time_domain_warmup_samples() const noexcept {
    return aggregation_delay() + filter_latency();
  }

  void validate() const {
    if (stage1_n < 1) throw Error(ErrorCode::InvalidConfig, "stage-1 window must be at least 1");
    window.validate();
    peaks.validate();
  }

  static FeatureExtractorConfig from_config(const KeyValueConfig& cfg, double fs) {
    FeatureExtractorConfig c;
    c.fs = fs;
    c.stage1_n = static_cast<std::size_t>(cfg.get_int("dsp.stage1_n", static_cast<std::int64_t>(c.stage1_n)));
    c.window.n = static_cast<std::size_t>(cfg.get_int("features.n", static_cast<std::int64_t>(c.window.n)));
    c.window.x1 = static_cast<std::size_t>(cfg.get_int("features.x1", static_cast<std::int64_t>(c.window.x1)));
    c.window.x2 = static_cast<std::size_t>(cfg.get_int("features.x2", static_cast<std::int64_t>(c.window.x2)));
    c.window.x3_window_s = cfg.get_double("features.x3_window_s", c.window.x3_window_s);
    c.peaks = PeakDetectorConfig::from_config(cfg, fs);
    const auto ch = cfg.get_string("features.hrv_channel", "deep");
    if (ch == "deep") {
      c.hrv_channel = Channel::Deep;
    } else if (ch == "superficial") {
      c.hrv_channel = Channel::Superficial;
    } else {
      throw Error(ErrorCode::InvalidConfig, "features.hrv_channel must be deep or superficial");
    }
    const auto sig = cfg.get_string("features.hrv_signal", "hbo");
    if (sig == "hbo") {
      c.hrv_signal = Signal::Hbo;
    } else if (sig == "hhb") {
      c.hrv_signal = Signal::Hhb;
    } else {
      throw Error(ErrorCode::InvalidConfig, "features.hrv_signal must be hbo or hhb");
    }
    c.validate();
    return c;
  }
};

/// Consumes one HemoSample per channel per tick and emits a FeatureVector
/// for that tick. HRV features are recomputed at each detected beat and held
/// until the next one. The moving-average and slope windows run over the
/// samples actually received, so a recording pause just joins the two
/// stretches; beat detection restarts after a pause.
class FeatureExtractor {
 public:
  explicit FeatureExtractor(FeatureExtractorConfig cfg)
      : cfg_(cfg),
        chains_{StreamFeatureChain(cfg.window, cfg.stage1_n), StreamFeatureChain(cfg.window, cfg.stage1_n),
                StreamFeatureChain(cfg.window, cfg.stage1_n), StreamFeatureChain(cfg.window, cfg.stage1_n)},
        heart_(cfg.peaks) {
    cfg_.validate();
  }

  FeatureVector push(const HemoSample& deep, const HemoSample& superficial) {
    if (deep.channel != Channel::Deep || superficial.channel != Channel::Superficial) {
      throw Error(ErrorCode::InvalidField, "feature extractor expects (deep, superficial) samples");
    }
    if (deep.t_index != superficial.t_index) {
      throw Error(ErrorCode::InvalidField, "channel samples must share a t_index");
    }
    const auto t = deep.t_index;
    if (last_t_ && t <= *last_t_) throw Error(ErrorCode::InvalidField, "feature extractor input must have increasing t_index");
    if (last_t_ && t != *last_t_ + 1) {
      // recording gap: a beat interval across it would be meaningless, so
      // restart beat detection; the last HRV values stay held
      heart_.reset();
      recent_.clear();
      ++gaps_;
    }
    last_t_ = t;
    const std::array<const HemoSample*, kChannelCount> by_channel{&deep, &superficial};

    FeatureVector v;
    v.t_index = t;
    for (std::size_t c = 0; c < kChannelCount; ++c) {
      for (std::size_t s = 0; s < 2; ++s) {
        const double x = s == 0 ? by_channel[c]->hbo : by_channel[c]->hhb;
        const auto idx = c * 2 + s;
        const auto out = chains_[idx].push(x);
        if (idx == stream_index(cfg_.hrv_channel, cfg_.hrv_signal)) {
          last_stage1_ = out.stage1;
          if (out.stage1) feed_heart(*out.stage1, t);
        }
        chains_[idx].write(std::span<double, kFeaturesPerStream>(v.values.data() + idx * kFeaturesPerStream, kFeaturesPerStream),
                           std::span<bool, kFeaturesPerStream>(v.valid.data() + idx * kFeaturesPerStream, kFeaturesPerStream));
      }
    }

    if (hrv_) {
      v.values[feature_index(HrvFeature::Mean)] = hrv_->mean;
      v.values[feature_index(HrvFeature::Std)] = hrv_->std;
      v.values[feature_index(HrvFeature::Max)] = hrv_->max;
      v.values[feature_index(HrvFeature::Instantaneous)] = hrv_->inst;
      for (std::size_t i = kHrvOffset; i < kFeatureCount; ++i) v.valid[i] = true;
    }
    return v;
  }

  [[nodiscard]] const FeatureExtractorConfig& config() const noexcept { return cfg_; }
  [[nodiscard]] const std::deque<HrvSample>& recent_hrv() const noexcept { return recent_; }
  [[nodiscard]] const std::vector<PeakEvent>& peaks() const noexcept { return peaks_; }
  /// Stage-1 output of the HRV source stream for the last tick (detector input).
  [[nodiscard]] std::optional<double> last_stage1() const noexcept { return last_stage1_; }
  /// Number of t_index discontinuities seen (recording pauses).
  [[nodiscard]] std::uint64_t gaps() const noexcept { return gaps_; }

 private:
  void feed_heart(double x, std::uint64_t t) {
    const auto u = heart_.push(x, t);
    if (u.peak) peaks_.push_back(*u.peak);
    if (!u.hrv) return;
    recent_.push_back(*u.hrv);
    const double span = cfg_.window.x3_window_s * cfg_.fs;
    while (!recent_.empty() && static_cast<double>(u.hrv->t_index - recent_.front().t_index) >= span) {
      recent_.pop_front();
    }
    std::vector<HrvSample> window(recent_.begin(), recent_.end());
    hrv_ = hrv_features(window, *u.hrv);
  }

  FeatureExtractorConfig cfg_;
  std::array<StreamFeatureChain, kStreamCount> chains_;
  HeartRateTracker heart_;
  std::deque<HrvSample> recent_;
  std::vector<PeakEvent> peaks_;
  std::optional<HrvFeatures> hrv_;
  std::optional<double> last_stage1_;
  std::optional<std::uint64_t> last_t_;
  std::uint64_t gaps_ = 0;
};

}  // namespace nirsfb
