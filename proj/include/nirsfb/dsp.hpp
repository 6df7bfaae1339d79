#pragma once

// Causal streaming filters for the per-sample chain:
//   raw -> stage-1 moving average -> online peak detector -> heart rate
//                                 -> stage-2 moving average / slope -> features
// Every object here is a single-stream state machine; nothing is shared.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "nirsfb/config.hpp"
#include "nirsfb/error.hpp"

namespace nirsfb {

/// Fixed-capacity trailing window with O(1) mean and population variance.
/// Sums are kept relative to a shift point and re-derived from the buffer
/// every time the ring wraps, so they never drift.
class SlidingWindow {
 public:
  explicit SlidingWindow(std::size_t capacity) : buf_(capacity) {
    if (capacity == 0) throw Error(ErrorCode::InvalidConfig, "window capacity must be at least 1");
  }

  void push(double x) {
    const auto cap = buf_.size();
    if (count_ == cap) {
      const double old = buf_[head_] - shift_;
      sum_ -= old;
      sum_sq_ -= old * old;
    } else {
      ++count_;
    }
    buf_[head_] = x;
    const double d = x - shift_;
    sum_ += d;
    sum_sq_ += d * d;
    head_ = (head_ + 1) % cap;
    if (head_ == 0) refresh();
  }

  [[nodiscard]] bool full() const noexcept { return count_ == buf_.size(); }
  [[nodiscard]] std::size_t size() const noexcept { return count_; }
  [[nodiscard]] std::size_t capacity() const noexcept { return buf_.size(); }

  [[nodiscard]] double mean() const noexcept {
    return count_ ? shift_ + sum_ / static_cast<double>(count_) : 0.0;
  }

  [[nodiscard]] double variance() const noexcept {
    if (count_ == 0) return 0.0;
    const double n = static_cast<double>(count_);
    const double m = sum_ / n;
    return std::max(0.0, sum_sq_ / n - m * m);
  }

  [[nodiscard]] double stddev() const noexcept { return std::sqrt(variance()); }

  [[nodiscard]] double max() const noexcept {
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < count_; ++i) best = std::max(best, buf_[i]);
    return best;
  }

  /// Buffered values, oldest first.
  [[nodiscard]] std::vector<double> values() const {
    std::vector<double> out;
    out.reserve(count_);
    const auto cap = buf_.size();
    const std::size_t start = count_ == cap ? head_ : 0;
    for (std::size_t i = 0; i < count_; ++i) out.push_back(buf_[(start + i) % cap]);
    return out;
  }

  void reset() noexcept {
    count_ = head_ = 0;
    sum_ = sum_sq_ = shift_ = 0.0;
  }

 private:
  void refresh() noexcept {
    double raw = 0.0;
    for (std::size_t i = 0; i < count_; ++i) raw += buf_[i];
    shift_ = raw / static_cast<double>(count_);
    sum_ = sum_sq_ = 0.0;
    for (std::size_t i = 0; i < count_; ++i) {
      const double d = buf_[i] - shift_;
      sum_ += d;
      sum_sq_ += d * d;
    }
  }

  std::vector<double> buf_;
  std::size_t count_ = 0;
  std::size_t head_ = 0;
  double shift_ = 0.0;
  double sum_ = 0.0;
  double sum_sq_ = 0.0;
};

/// Causal N-point moving average; silent until N inputs have been seen.
class MovingAverage {
 public:
  explicit MovingAverage(std::size_t window_n) : window_(window_n) {}

  std::optional<double> push(double x) {
    window_.push(x);
    if (!window_.full()) return std::nullopt;
    return window_.mean();
  }

  [[nodiscard]] std::size_t window_n() const noexcept { return window_.capacity(); }
  [[nodiscard]] bool warm() const noexcept { return window_.full(); }
  void reset() noexcept { window_.reset(); }

 private:
  SlidingWindow window_;
};

/// Least-squares slope (units per sample) of the last N inputs against
/// their sample positions.
class SlopeEstimator {
 public:
  explicit SlopeEstimator(std::size_t window_n) : buf_(window_n) {
    if (window_n < 2) throw Error(ErrorCode::InvalidConfig, "slope window needs at least 2 samples");
    const double n = static_cast<double>(window_n);
    x_mean_ = (n - 1.0) / 2.0;
    sxx_ = n * (n * n - 1.0) / 12.0;
  }

  std::optional<double> push(double y) {
    const auto cap = buf_.size();
    if (count_ == cap) {
      // slide: every remaining sample moves one position to the left
      const double oldest = buf_[head_];
      weighted_ = weighted_ - (sum_ - oldest) + static_cast<double>(cap - 1) * y;
      sum_ = sum_ - oldest + y;
    } else {
      weighted_ += static_cast<double>(count_) * y;
      sum_ += y;
      ++count_;
    }
    buf_[head_] = y;
    head_ = (head_ + 1) % cap;
    if (head_ == 0 && count_ == cap) refresh();
    if (count_ < cap) return std::nullopt;
    return (weighted_ - x_mean_ * sum_) / sxx_;
  }

  [[nodiscard]] std::size_t window_n() const noexcept { return buf_.size(); }
  void reset() noexcept {
    count_ = head_ = 0;
    sum_ = weighted_ = 0.0;
  }

 private:
  void refresh() noexcept {
    // head_ == 0 here, so buf_ is already in chronological order
    sum_ = weighted_ = 0.0;
    for (std::size_t k = 0; k < buf_.size(); ++k) {
      sum_ += buf_[k];
      weighted_ += static_cast<double>(k) * buf_[k];
    }
  }

  std::vector<double> buf_;
  std::size_t count_ = 0;
  std::size_t head_ = 0;
  double sum_ = 0.0;
  double weighted_ = 0.0;
  double x_mean_ = 0.0;
  double sxx_ = 0.0;
};

enum class ThresholdPolicy : std::uint8_t { Adaptive, Fixed };

struct PeakDetectorConfig {
  double fs = 10.0;
  std::size_t stats_window = 30;  // 3 s at 10 Hz
  double refractory_s = 0.25;
  double sigma_factor = 1.1;
  ThresholdPolicy policy = ThresholdPolicy::Adaptive;
  double threshold_k = 0.5;        // adaptive: theta = running mean + k * running std
  double fixed_threshold = 0.0;    // fixed: theta in signal units

  [[nodiscard]] double refractory_samples() const noexcept { return refractory_s * fs; }

  void validate() const {
    if (!(fs > 0.0)) throw Error(ErrorCode::InvalidConfig, "fs must be positive");
    if (stats_window < 2) throw Error(ErrorCode::InvalidConfig, "peak stats window needs at least 2 samples");
    if (!(refractory_s >= 0.0)) throw Error(ErrorCode::InvalidConfig, "refractory period must be non-negative");
  }

  static PeakDetectorConfig from_config(const KeyValueConfig& cfg, double fs) {
    PeakDetectorConfig p;
    p.fs = fs;
    p.stats_window = static_cast<std::size_t>(
        std::lround(cfg.get_double("dsp.peak_stats_window_s", 3.0) * fs));
    p.refractory_s = cfg.get_double("dsp.refractory_s", p.refractory_s);
    p.sigma_factor = cfg.get_double("dsp.peak_sigma_factor", p.sigma_factor);
    const auto policy = cfg.get_string("dsp.threshold_policy", "adaptive");
    if (policy == "adaptive") {
      p.policy = ThresholdPolicy::Adaptive;
    } else if (policy == "fixed") {
      p.policy = ThresholdPolicy::Fixed;
    } else {
      throw Error(ErrorCode::InvalidConfig, "dsp.threshold_policy must be adaptive or fixed");
    }
    p.threshold_k = cfg.get_double("dsp.threshold_k", p.threshold_k);
    p.fixed_threshold = cfg.get_double("dsp.fixed_threshold", p.fixed_threshold);
    p.validate();
    return p;
  }
};

struct PeakEvent {
  std::uint64_t t_index = 0;
  double value = 0.0;

  friend bool operator==(const PeakEvent&, const PeakEvent&) = default;
};

/// Online peak detector. A sample is a peak when it
///   (a) exceeds the threshold theta,
///   (b) sits at least sigma_factor running standard deviations above the
///       running mean,
///   (c) is a local maximum (rises from the previous sample, not exceeded by
///       the next one), and
///   (d) is at least refractory_s after the previous emitted peak.
/// Candidates failing (d) are dropped. Condition (c) needs the following
/// sample, so a peak at t is reported by the push of t + 1.
class PeakDetector {
 public:
  static constexpr std::uint64_t kConfirmationLatency = 1;

  explicit PeakDetector(PeakDetectorConfig cfg) : cfg_(cfg), stats_(cfg.stats_window) { cfg_.validate(); }

  std::optional<PeakEvent> push(double x, std::uint64_t t_index) {
    if (have_prev_ && t_index <= prev_t_) {
      throw Error(ErrorCode::InvalidField, "peak detector input must have increasing t_index");
    }
    std::optional<PeakEvent> out;
    if (have_prev_ && have_prev2_ && prev_warm_) {
      const double c = prev_;
      const double theta =
          cfg_.policy == ThresholdPolicy::Adaptive ? prev_mean_ + cfg_.threshold_k * prev_std_ : cfg_.fixed_threshold;
      const bool local_max = c > prev2_ && c >= x;
      const bool above = c > theta && (c - prev_mean_) >= cfg_.sigma_factor * prev_std_;
      if (local_max && above) {
        const bool clear = !last_peak_ ||
                           static_cast<double>(prev_t_ - *last_peak_) >= cfg_.refractory_samples() - 1e-9;
        if (clear) {
          last_peak_ = prev_t_;
          out = PeakEvent{prev_t_, c};
        }
      }
    }

    stats_.push(x);
    prev2_ = prev_;
    have_prev2_ = have_prev_;
    prev_ = x;
    prev_t_ = t_index;
    have_prev_ = true;
    prev_mean_ = stats_.mean();
    prev_std_ = stats_.stddev();
    prev_warm_ = stats_.full();
    return out;
  }

  [[nodiscard]] std::optional<std::uint64_t> last_peak_index() const noexcept { return last_peak_; }
  [[nodiscard]] const PeakDetectorConfig& config() const noexcept { return cfg_; }

  void reset() {
    stats_.reset();
    have_prev_ = have_prev2_ = prev_warm_ = false;
    last_peak_.reset();
  }

 private:
  PeakDetectorConfig cfg_;
  SlidingWindow stats_;
  bool have_prev_ = false;
  bool have_prev2_ = false;
  bool prev_warm_ = false;
  double prev_ = 0.0;
  double prev2_ = 0.0;
  std::uint64_t prev_t_ = 0;
  double prev_mean_ = 0.0;
  double prev_std_ = 0.0;
  std::optional<std::uint64_t> last_peak_;
};

struct HrvSample {
  std::uint64_t t_index = 0;  // of the later peak
  double bpm = 0.0;

  friend bool operator==(const HrvSample&, const HrvSample&) = default;
};

/// Instantaneous heart rate from two consecutive peaks.
inline HrvSample hrv_from_peaks(const PeakEvent& prev, const PeakEvent& cur, double fs) {
  if (cur.t_index <= prev.t_index) {
    throw Error(ErrorCode::NonIncreasingPeaks, "peak indices must be strictly increasing");
  }
  return {cur.t_index, 60.0 * fs / static_cast<double>(cur.t_index - prev.t_index)};
}

/// Peak detector plus beat-to-beat heart rate.
class HeartRateTracker {
 public:
  explicit HeartRateTracker(PeakDetectorConfig cfg) : detector_(cfg) {}

  struct Update {
    std::optional<PeakEvent> peak;
    std::optional<HrvSample> hrv;
  };

  Update push(double x, std::uint64_t t_index) {
    Update u;
    u.peak = detector_.push(x, t_index);
    if (u.peak) {
      if (last_) u.hrv = hrv_from_peaks(*last_, *u.peak, detector_.config().fs);
      last_ = u.peak;
    }
    return u;
  }

  [[nodiscard]] const PeakDetector& detector() const noexcept { return detector_; }
  void reset() {
    detector_.reset();
    last_.reset();
  }

 private:
  PeakDetector detector_;
  std::optional<PeakEvent> last_;
};

}  // namespace nirsfb
