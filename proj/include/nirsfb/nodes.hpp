#pragma once

// The three node roles. Each owns its transports and talks to the others
// only through datagrams:
//
//   recorder --DataFrame/CalibReport--> server --Stress--> actuator
//   recorder <------Init/Command------- server
//
// Nodes can be stepped by hand (poll/tick, used by the deterministic
// in-process simulation) or driven by their own event loops (run).

#include <array>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <stop_token>
#include <thread>
#include <vector>

#include "nirsfb/classifier.hpp"
#include "nirsfb/error.hpp"
#include "nirsfb/features.hpp"
#include "nirsfb/hemodynamics.hpp"
#include "nirsfb/jsonl.hpp"
#include "nirsfb/subject_sim.hpp"
#include "nirsfb/transport.hpp"
#include "nirsfb/wire.hpp"

namespace nirsfb {

/// Fixed-capacity FIFO. When full, pushing evicts the oldest element.
template <typename T>
class BoundedQueue {
 public:
  explicit BoundedQueue(std::size_t capacity) : capacity_(capacity) {
    if (capacity_ == 0) throw Error(ErrorCode::InvalidConfig, "queue capacity must be positive");
  }

  /// Returns true if an element was evicted to make room.
  bool push(T value) {
    bool evicted = false;
    {
      std::lock_guard lock(mutex_);
      if (items_.size() == capacity_) {
        items_.pop_front();
        ++dropped_;
        evicted = true;
      }
      items_.push_back(std::move(value));
    }
    cv_.notify_one();
    return evicted;
  }

  std::optional<T> try_pop() {
    std::lock_guard lock(mutex_);
    return pop_locked();
  }

  std::optional<T> pop_for(std::chrono::microseconds timeout) {
    std::unique_lock lock(mutex_);
    cv_.wait_for(lock, timeout, [&] { return !items_.empty() || closed_; });
    return pop_locked();
  }

  void close() {
    {
      std::lock_guard lock(mutex_);
      closed_ = true;
    }
    cv_.notify_all();
  }

  [[nodiscard]] std::size_t size() const {
    std::lock_guard lock(mutex_);
    return items_.size();
  }
  [[nodiscard]] std::uint64_t dropped() const {
    std::lock_guard lock(mutex_);
    return dropped_;
  }

 private:
  std::optional<T> pop_locked() {
    if (items_.empty()) return std::nullopt;
    T v = std::move(items_.front());
    items_.pop_front();
    return v;
  }

  std::size_t capacity_;
  mutable std::mutex mutex_;
  std::condition_variable cv_;
  std::deque<T> items_;
  std::uint64_t dropped_ = 0;
  bool closed_ = false;
};

/// Anything that can produce one frame per channel per tick.
class FrameSource {
 public:
  virtual ~FrameSource() = default;
  virtual std::array<OpticalFrame, kChannelCount> lit(const SampleClock& clock) = 0;
  virtual std::array<OpticalFrame, kChannelCount> dark(const SampleClock& clock) = 0;
};

enum class RecorderState : std::uint8_t { Idle, Ready, Running, Paused, Stopped };

class RecorderNode {
 public:
  RecorderNode(FrameSource& source, Transport& data_out, double fs, double dark_s = 1.0)
      : source_(source), out_(data_out), clock_{fs, 0}, dark_s_(dark_s) {}

  /// Applies an Init or Command packet. Init runs the calibration window
  /// synchronously (consuming sample ticks) and reports the baseline.
  void handle(const wire::Packet& p) {
    if (const auto* init = std::get_if<wire::InitPacket>(&p)) {
      if (init->channel_count != kChannelCount) {
        throw Error(ErrorCode::ProtocolViolation, "recorder supports exactly two channels");
      }
      calibrate(init->calib_duration_s);
      return;
    }
    const auto* cmd = std::get_if<wire::CommandPacket>(&p);
    if (!cmd) throw Error(ErrorCode::ProtocolViolation, "recorder accepts only Init and Command packets");
    switch (cmd->command) {
      case wire::CommandKind::Run:
        if (state_ == RecorderState::Idle || state_ == RecorderState::Stopped) {
          throw Error(ErrorCode::ProtocolViolation, "run before init");
        }
        state_ = RecorderState::Running;
        break;
      case wire::CommandKind::Pause:
        if (state_ == RecorderState::Idle || state_ == RecorderState::Stopped) {
          throw Error(ErrorCode::ProtocolViolation, "pause before init");
        }
        state_ = RecorderState::Paused;
        break;
      case wire::CommandKind::Stop:
        state_ = RecorderState::Stopped;
        break;
    }
  }

  /// Drains pending control datagrams. Malformed datagrams are counted and
  /// skipped; protocol violations propagate.
  std::size_t poll_control(Transport& control) {
    std::size_t n = 0;
    while (auto d = control.receive(std::chrono::milliseconds(0))) {
      wire::Packet p;
      try {
        p = wire::decode(*d);
      } catch (const Error&) {
        ++decode_errors_;
        continue;
      }
      handle(p);
      ++n;
    }
    return n;
  }

  /// Advances one sample. Frames are transmitted only while running; while
  /// ready or paused the source still advances so sample time stays exact.
  std::size_t tick() {
    if (state_ == RecorderState::Idle || state_ == RecorderState::Stopped) return 0;
    const auto frames = source_.lit(clock_);
    std::size_t sent = 0;
    if (state_ == RecorderState::Running) {
      for (const auto& f : frames) {
        out_.send(wire::encode(wire::DataFramePacket{f.t_index, f.channel, f.intensity}));
        ++sent;
      }
    }
    clock_.advance();
    return sent;
  }

  [[nodiscard]] RecorderState state() const noexcept { return state_; }
  [[nodiscard]] const SampleClock& clock() const noexcept { return clock_; }
  [[nodiscard]] const std::optional<CalibrationBaseline>& baseline() const noexcept { return baseline_; }
  [[nodiscard]] std::uint64_t decode_errors() const noexcept { return decode_errors_; }

 private:
  void calibrate(double duration_s) {
    if (!(duration_s > 0.0)) throw Error(ErrorCode::ProtocolViolation, "calibration duration must be positive");
    std::vector<OpticalFrame> window;
    const auto dark_ticks = static_cast<std::size_t>(std::llround(dark_s_ * clock_.fs));
    const auto lit_ticks = static_cast<std::size_t>(std::ceil(duration_s * clock_.fs - 1e-9));
    for (std::size_t i = 0; i < dark_ticks; ++i) {
      for (const auto& f : source_.dark(clock_)) window.push_back(f);
      clock_.advance();
    }
    for (std::size_t i = 0; i < lit_ticks; ++i) {
      for (const auto& f : source_.lit(clock_)) window.push_back(f);
      clock_.advance();
    }
    baseline_ = nirsfb::calibrate(window, duration_s, clock_.fs);
    out_.send(wire::encode(wire::CalibReportPacket{*baseline_}));
    state_ = RecorderState::Ready;
  }

  FrameSource& source_;
  Transport& out_;
  SampleClock clock_;
  double dark_s_;
  RecorderState state_ = RecorderState::Idle;
  std::optional<CalibrationBaseline> baseline_;
  std::uint64_t decode_errors_ = 0;
};

struct ServerConfig {
  double fs = 10.0;
  BeerLambertParams optics{};
  FeatureExtractorConfig features{};
  bool send_stress = true;
  std::size_t queue_capacity = 256;
};

struct ServerStats {
  std::uint64_t datagrams = 0;
  std::uint64_t decode_errors = 0;
  std::uint64_t uncalibrated_frames = 0;
  std::uint64_t stale_frames = 0;
  std::uint64_t incomplete_ticks = 0;
  std::uint64_t vectors = 0;
  std::uint64_t stress_packets = 0;
  std::uint64_t queue_drops = 0;
};

/// Processing server: optical frames in, stress packets out.
class ServerNode {
 public:
  using Predictor = std::function<std::optional<int>(const FeatureVector&)>;
  using VectorHook = std::function<void(const FeatureVector&, std::optional<int>)>;

  ServerNode(ServerConfig cfg, Transport& data_in, Transport* stress_out, Transport* control_out = nullptr)
      : cfg_(std::move(cfg)), in_(data_in), stress_out_(stress_out), control_out_(control_out) {
    cfg_.features.validate();
  }

  void set_model(std::shared_ptr<const StressModel> model) {
    if (!model) {
      predictor_ = nullptr;
      return;
    }
    predictor_ = [model](const FeatureVector& v) -> std::optional<int> {
      if (!v.fully_valid()) return std::nullopt;
      return model->predict(v);
    };
  }
  void set_predictor(Predictor p) { predictor_ = std::move(p); }
  void on_vector(VectorHook hook) { hook_ = std::move(hook); }
  void set_log(JsonlLog* log) { log_ = log; }
  void set_send_stress(bool on) { cfg_.send_stress = on; }

  void send_command(const wire::Packet& p) {
    if (!control_out_) throw Error(ErrorCode::TransportFailure, "server has no control link");
    control_out_->send(wire::encode(p));
  }

  /// Drains everything currently queued on the data link.
  std::size_t poll() {
    std::size_t n = 0;
    while (auto d = in_.receive(std::chrono::milliseconds(0))) {
      process(*d);
      ++n;
    }
    return n;
  }

  void process(std::span<const std::uint8_t> datagram) {
    ++stats_.datagrams;
    wire::Packet p;
    try {
      p = wire::decode(datagram);
    } catch (const Error&) {
      ++stats_.decode_errors;
      return;
    }
    if (const auto* report = std::get_if<wire::CalibReportPacket>(&p)) {
      converter_.emplace(cfg_.optics, report->baseline);
      extractor_.emplace(cfg_.features);
      pending_.reset();
      last_t_.reset();
      if (log_) log_->append({{"type", "calibration"}, {"i0", report->baseline.i0}, {"ambient", report->baseline.ambient}});
      return;
    }
    const auto* frame = std::get_if<wire::DataFramePacket>(&p);
    if (!frame) return;  // other packet types are not addressed to the server
    if (!converter_) {
      ++stats_.uncalibrated_frames;
      return;
    }
    if (last_t_ && frame->t_index <= *last_t_) {
      ++stats_.stale_frames;
      return;
    }
    if (pending_ && pending_->t_index != frame->t_index) {
      if (frame->t_index < pending_->t_index) {
        ++stats_.stale_frames;
        return;
      }
      ++stats_.incomplete_ticks;
      pending_.reset();
    }
    if (!pending_) pending_ = PendingTick{frame->t_index, {}};
    pending_->frames[index_of(frame->channel)] = *frame;
    if (pending_->frames[0] && pending_->frames[1]) {
      const auto tick = *pending_;
      pending_.reset();
      complete(tick);
    }
  }

  /// Event loop: a receiver thread feeds a bounded drop-oldest queue that
  /// this thread drains. `poll_period` bounds the wake-up interval and must
  /// be shorter than one sample period.
  void run(std::stop_token stop, std::chrono::microseconds poll_period) {
    if (!(std::chrono::duration<double>(poll_period).count() < 1.0 / cfg_.fs)) {
      throw Error(ErrorCode::InvalidConfig, "server must poll faster than the sampling rate");
    }
    BoundedQueue<Datagram> queue(cfg_.queue_capacity);
    std::jthread receiver([&](std::stop_token rx_stop) {
      while (!rx_stop.stop_requested()) {
        if (auto d = in_.receive(std::chrono::milliseconds(20))) queue.push(std::move(*d));
      }
      queue.close();
    });
    while (!stop.stop_requested()) {
      if (auto d = queue.pop_for(poll_period)) process(*d);
    }
    receiver.request_stop();
    receiver.join();
    while (auto d = queue.try_pop()) process(*d);
    stats_.queue_drops += queue.dropped();
  }

  [[nodiscard]] const ServerStats& stats() const noexcept { return stats_; }
  [[nodiscard]] bool calibrated() const noexcept { return converter_.has_value(); }
  [[nodiscard]] const FeatureExtractor* extractor() const noexcept { return extractor_ ? &*extractor_ : nullptr; }
  [[nodiscard]] const ServerConfig& config() const noexcept { return cfg_; }

 private:
  struct PendingTick {
    std::uint64_t t_index;
    std::array<std::optional<wire::DataFramePacket>, kChannelCount> frames;
  };

  void complete(const PendingTick& tick) {
    last_t_ = tick.t_index;
    std::array<HemoSample, kChannelCount> hemo{};
    for (std::size_t c = 0; c < kChannelCount; ++c) {
      const auto& f = *tick.frames[c];
      hemo[c] = converter_->convert(OpticalFrame{f.t_index, f.channel, f.intensity, false});
    }
    const auto v = extractor_->push(hemo[0], hemo[1]);
    ++stats_.vectors;
    std::optional<int> level;
    if (predictor_) level = predictor_(v);
    if (level && cfg_.send_stress && stress_out_) {
      stress_out_->send(wire::encode(wire::StressPacket{v.t_index, static_cast<std::uint8_t>(*level)}));
      ++stats_.stress_packets;
    }
    if (log_ && level) log_->append({{"type", "classification"}, {"t_index", v.t_index}, {"level", *level}});
    if (hook_) hook_(v, level);
  }

  ServerConfig cfg_;
  Transport& in_;
  Transport* stress_out_;
  Transport* control_out_;
  Predictor predictor_;
  VectorHook hook_;
  JsonlLog* log_ = nullptr;
  std::optional<HemoConverter> converter_;
  std::optional<FeatureExtractor> extractor_;
  std::optional<PendingTick> pending_;
  std::optional<std::uint64_t> last_t_;
  ServerStats stats_;
};

/// Vibration device.
class ActuatorNode {
 public:
  struct TraceEntry {
    std::uint64_t t_index;
    std::uint8_t level;
    bool vibration_on;
    friend bool operator==(const TraceEntry&, const TraceEntry&) = default;
  };

  using ApplyHook = std::function<void(const TraceEntry&)>;

  ActuatorNode(Transport& in, std::uint32_t debounce_m) : in_(in) { state_.debounce_m = debounce_m; }

  void apply(const wire::StressPacket& p) {
    wire::actuator_apply(state_, p);
    trace_.push_back({p.t_index, p.level, state_.vibration_on});
    if (on_apply_) on_apply_(trace_.back());
  }

  /// Called from whichever thread applies a packet.
  void set_on_apply(ApplyHook hook) { on_apply_ = std::move(hook); }

  /// Motor off and debounce history cleared; the staleness guard is kept.
  void reset() {
    state_.vibration_on = false;
    state_.opposite_run = 0;
  }

  std::size_t poll() {
    std::size_t n = 0;
    while (auto d = in_.receive(std::chrono::milliseconds(0))) {
      if (handle(*d)) ++n;
    }
    return n;
  }

  void run(std::stop_token stop) {
    while (!stop.stop_requested()) {
      if (auto d = in_.receive(std::chrono::milliseconds(20))) handle(*d);
    }
  }

  [[nodiscard]] bool vibration_on() const noexcept { return state_.vibration_on; }
  [[nodiscard]] const wire::ActuatorState& state() const noexcept { return state_; }
  [[nodiscard]] const std::vector<TraceEntry>& trace() const noexcept { return trace_; }
  [[nodiscard]] std::uint64_t decode_errors() const noexcept { return decode_errors_; }
  void clear_trace() { trace_.clear(); }

 private:
  bool handle(const Datagram& d) {
    try {
      const auto p = wire::decode(d);
      if (const auto* s = std::get_if<wire::StressPacket>(&p)) {
        apply(*s);
        return true;
      }
    } catch (const Error&) {
      ++decode_errors_;
    }
    return false;
  }

  Transport& in_;
  ApplyHook on_apply_;
  wire::ActuatorState state_;
  std::vector<TraceEntry> trace_;
  std::uint64_t decode_errors_ = 0;
};

}  // namespace nirsfb
