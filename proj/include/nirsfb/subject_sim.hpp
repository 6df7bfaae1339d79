#pragma once

// Synthetic fNIRS subject. A two-state Markov chain (rest / stressed) drives
// the hemodynamic level; a cardiac oscillation rides on both chromophores;
// the forward Beer-Lambert map turns concentrations into detector
// intensities. Vibration feedback shortens stress episodes and, through
// accumulated exposure, lowers the subject's susceptibility to induction.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <string_view>

#include "nirsfb/config.hpp"
#include "nirsfb/error.hpp"
#include "nirsfb/hemodynamics.hpp"

namespace nirsfb {

enum class BlockKind : std::uint8_t { Rest = 0, Calculation = 1, SpecialTest = 2 };

constexpr bool is_task(BlockKind k) noexcept { return k != BlockKind::Rest; }

constexpr std::string_view to_string(BlockKind k) noexcept {
  switch (k) {
    case BlockKind::Rest: return "rest";
    case BlockKind::Calculation: return "calculation";
    case BlockKind::SpecialTest: return "special_test";
  }
  return "unknown";
}

struct SampleClock {
  double fs = 10.0;
  std::uint64_t t_index = 0;

  void advance() noexcept { ++t_index; }
  [[nodiscard]] double seconds() const noexcept { return static_cast<double>(t_index) / fs; }
};

struct SubjectParams {
  int initial_stress = 0;
  double base_heart_rate = 72.0;  // bpm
  double hr_stress_delta = 12.0;  // bpm
  double hrv_jitter_bpm = 2.0;    // per-beat heart-rate jitter (uniform +/-)

  double hbo_rest_mean = 0.0;  // uM
  double hbo_stress_mean = 1.5;
  double hhb_rest_mean = 0.0;
  double hhb_stress_mean = -0.5;
  double hemo_tau_s = 1.0;           // first-order lag toward the state mean
  double superficial_gain = 0.4;     // fraction of the task response seen by the shallow channel
  double cardiac_amp_hbo = 0.3;      // uM
  double cardiac_amp_hhb = 0.1;      // uM
  double noise_sigma = 0.03;         // uM, additive on concentrations

  // per-second transition probabilities
  double induction = 0.35;            // rest -> stressed during task blocks
  double responsiveness = 0.6;        // stressed -> rest while vibration is on
  double recovery = 1.0;              // stressed -> rest during rest blocks
  double spontaneous_recovery = 0.05; // stressed -> rest during task blocks
  double special_test_gain = 1.5;     // induction multiplier in special test blocks

  // slow susceptibility drift
  double learning_rate = 0.01;  // per second of vibration exposure
  double fatigue_rate = 0.4;    // relative induction increase per minute of task

  ChannelWavelengthTable source_intensity{{{2000.0, 1800.0}, {2400.0, 2200.0}}};
  ChannelWavelengthTable ambient{{{5.0, 5.0}, {5.0, 5.0}}};
  BeerLambertParams optics{};

  std::uint64_t rng_seed = 1;

  [[nodiscard]] double max_heart_rate() const noexcept {
    return base_heart_rate + std::max(0.0, hr_stress_delta) + hrv_jitter_bpm;
  }

  void validate(double fs) const {
    auto prob = [](double p, const char* name) {
      if (!(p >= 0.0 && p <= 1.0)) throw Error(ErrorCode::InvalidConfig, std::string(name) + " must be in [0,1]");
    };
    prob(induction, "induction");
    prob(responsiveness, "responsiveness");
    prob(recovery, "recovery");
    prob(spontaneous_recovery, "spontaneous_recovery");
    if (!(base_heart_rate >= 40.0 && base_heart_rate <= 180.0)) {
      throw Error(ErrorCode::InvalidConfig, "base_heart_rate must be in [40, 180] bpm");
    }
    if (!(fs > 2.0 * max_heart_rate() / 60.0)) {
      throw Error(ErrorCode::InvalidConfig, "sampling rate too low to resolve the cardiac oscillation");
    }
    if (initial_stress != 0 && initial_stress != 1) throw Error(ErrorCode::InvalidConfig, "initial_stress is 0 or 1");
    if (!(noise_sigma >= 0.0) || !(hemo_tau_s >= 0.0) || !(hrv_jitter_bpm >= 0.0)) {
      throw Error(ErrorCode::InvalidConfig, "noise, tau and jitter must be non-negative");
    }
    if (!(learning_rate >= 0.0) || !(fatigue_rate >= 0.0) || !(special_test_gain >= 0.0)) {
      throw Error(ErrorCode::InvalidConfig, "learning, fatigue and special-test gain must be non-negative");
    }
    for (std::size_t c = 0; c < kChannelCount; ++c) {
      for (std::size_t w = 0; w < kWavelengthCount; ++w) {
        if (!(ambient[c][w] >= 0.0) || !(source_intensity[c][w] > ambient[c][w])) {
          throw Error(ErrorCode::InvalidConfig, "source intensity must exceed ambient");
        }
      }
    }
    optics.validate();
  }

  static SubjectParams from_config(const KeyValueConfig& cfg) {
    SubjectParams p;
    p.initial_stress = static_cast<int>(cfg.get_int("subject.initial_stress", p.initial_stress));
    p.base_heart_rate = cfg.get_double("subject.base_heart_rate", p.base_heart_rate);
    p.hr_stress_delta = cfg.get_double("subject.hr_stress_delta", p.hr_stress_delta);
    p.hrv_jitter_bpm = cfg.get_double("subject.hrv_jitter_bpm", p.hrv_jitter_bpm);
    p.hbo_rest_mean = cfg.get_double("subject.hbo_rest_mean", p.hbo_rest_mean);
    p.hbo_stress_mean = cfg.get_double("subject.hbo_stress_mean", p.hbo_stress_mean);
    p.hhb_rest_mean = cfg.get_double("subject.hhb_rest_mean", p.hhb_rest_mean);
    p.hhb_stress_mean = cfg.get_double("subject.hhb_stress_mean", p.hhb_stress_mean);
    p.hemo_tau_s = cfg.get_double("subject.hemo_tau_s", p.hemo_tau_s);
    p.superficial_gain = cfg.get_double("subject.superficial_gain", p.superficial_gain);
    p.cardiac_amp_hbo = cfg.get_double("subject.cardiac_amp_hbo", p.cardiac_amp_hbo);
    p.cardiac_amp_hhb = cfg.get_double("subject.cardiac_amp_hhb", p.cardiac_amp_hhb);
    p.noise_sigma = cfg.get_double("subject.noise_sigma", p.noise_sigma);
    p.induction = cfg.get_double("subject.induction", p.induction);
    p.responsiveness = cfg.get_double("subject.responsiveness", p.responsiveness);
    p.recovery = cfg.get_double("subject.recovery", p.recovery);
    p.spontaneous_recovery = cfg.get_double("subject.spontaneous_recovery", p.spontaneous_recovery);
    p.special_test_gain = cfg.get_double("subject.special_test_gain", p.special_test_gain);
    p.learning_rate = cfg.get_double("subject.learning_rate", p.learning_rate);
    p.fatigue_rate = cfg.get_double("subject.fatigue_rate", p.fatigue_rate);
    auto table = [&](const std::string& key, ChannelWavelengthTable fallback) {
      const auto v = cfg.get_doubles(key, {fallback[0][0], fallback[0][1], fallback[1][0], fallback[1][1]});
      if (v.size() != 4) throw Error(ErrorCode::InvalidConfig, key + " needs 4 values");
      return ChannelWavelengthTable{{{v[0], v[1]}, {v[2], v[3]}}};
    };
    p.source_intensity = table("subject.source_intensity", p.source_intensity);
    p.ambient = table("subject.ambient", p.ambient);
    p.optics = BeerLambertParams::from_config(cfg);
    p.rng_seed = static_cast<std::uint64_t>(cfg.get_int("subject.seed", static_cast<std::int64_t>(p.rng_seed)));
    return p;
  }
};

/// Converts a per-second event probability into a per-sample probability.
inline double per_sample_probability(double per_second, double fs) {
  if (per_second >= 1.0) return 1.0;
  if (per_second <= 0.0) return 0.0;
  return 1.0 - std::pow(1.0 - per_second, 1.0 / fs);
}

class SubjectModel {
 public:
  SubjectModel(SubjectParams params, double fs)
      : params_(params), fs_(fs), rng_(params.rng_seed), stress_(params.initial_stress) {
    params_.validate(fs_);
    level_ = target_for(stress_);
    heart_rate_ = current_target_rate();
  }

  /// Advances one sample and returns one frame per channel for `clock.t_index`.
  std::array<OpticalFrame, kChannelCount> step(const SampleClock& clock, BlockKind block, bool vibration_on) {
    update_state(block, vibration_on);

    const double dt = 1.0 / fs_;
    if (vibration_on) vibration_seconds_ += dt;
    if (is_task(block)) task_seconds_ += dt;

    const auto target = target_for(stress_);
    const double alpha = params_.hemo_tau_s > 0.0 ? 1.0 - std::exp(-dt / params_.hemo_tau_s) : 1.0;
    level_.hbo += (target.hbo - level_.hbo) * alpha;
    level_.hhb += (target.hhb - level_.hhb) * alpha;

    const double cardiac = std::sin(cardiac_phase_);
    cardiac_phase_ += 2.0 * std::numbers::pi * heart_rate_ / 60.0 * dt;
    if (cardiac_phase_ >= 2.0 * std::numbers::pi) {
      cardiac_phase_ -= 2.0 * std::numbers::pi;
      heart_rate_ = current_target_rate() + jitter();
    }

    std::array<OpticalFrame, kChannelCount> frames{};
    for (std::size_t c = 0; c < kChannelCount; ++c) {
      const double gain = c == index_of(Channel::Deep) ? 1.0 : params_.superficial_gain;
      ConcentrationPair conc{gain * level_.hbo + params_.cardiac_amp_hbo * cardiac,
                             gain * level_.hhb + params_.cardiac_amp_hhb * cardiac};
      if (params_.noise_sigma > 0.0) {
        conc.hbo += params_.noise_sigma * gaussian_(rng_);
        conc.hhb += params_.noise_sigma * gaussian_(rng_);
      }
      commanded_[c] = conc;
      frames[c] = make_frame(clock.t_index, static_cast<Channel>(c), conc);
    }
    return frames;
  }

  /// Sources-off frames: the detector sees only ambient light.
  [[nodiscard]] std::array<OpticalFrame, kChannelCount> dark_frames(const SampleClock& clock) const {
    std::array<OpticalFrame, kChannelCount> frames{};
    for (std::size_t c = 0; c < kChannelCount; ++c) {
      frames[c] = {clock.t_index, static_cast<Channel>(c), params_.ambient[c], true};
    }
    return frames;
  }

  [[nodiscard]] int truth_label() const noexcept { return stress_; }

  /// Concentrations used for the most recent frames, per channel.
  [[nodiscard]] const std::array<ConcentrationPair, kChannelCount>& commanded() const noexcept { return commanded_; }

  [[nodiscard]] double heart_rate() const noexcept { return heart_rate_; }
  [[nodiscard]] double effective_induction(BlockKind block) const noexcept {
    if (!is_task(block)) return 0.0;
    double p = params_.induction * (1.0 + params_.fatigue_rate * task_seconds_ / 60.0) *
               std::exp(-params_.learning_rate * vibration_seconds_);
    if (block == BlockKind::SpecialTest) p *= params_.special_test_gain;
    return std::clamp(p, 0.0, 1.0);
  }
  [[nodiscard]] const SubjectParams& params() const noexcept { return params_; }
  [[nodiscard]] double fs() const noexcept { return fs_; }

 private:
  void update_state(BlockKind block, bool vibration_on) {
    const double u = uniform_(rng_);
    if (stress_ == 1) {
      double stay = 1.0 - per_sample_probability(is_task(block) ? params_.spontaneous_recovery : params_.recovery, fs_);
      if (vibration_on) stay *= 1.0 - per_sample_probability(params_.responsiveness, fs_);
      if (u >= stay) stress_ = 0;
    } else {
      if (u < per_sample_probability(effective_induction(block), fs_)) stress_ = 1;
    }
  }

  [[nodiscard]] ConcentrationPair target_for(int stress) const noexcept {
    return stress ? ConcentrationPair{params_.hbo_stress_mean, params_.hhb_stress_mean}
                  : ConcentrationPair{params_.hbo_rest_mean, params_.hhb_rest_mean};
  }

  [[nodiscard]] double current_target_rate() const noexcept {
    return params_.base_heart_rate + (stress_ ? params_.hr_stress_delta : 0.0);
  }

  double jitter() {
    if (params_.hrv_jitter_bpm <= 0.0) return 0.0;
    return params_.hrv_jitter_bpm * (2.0 * uniform_(rng_) - 1.0);
  }

  [[nodiscard]] OpticalFrame make_frame(std::uint64_t t, Channel channel, ConcentrationPair conc) const {
    const auto c = index_of(channel);
    const auto da = forward_beer_lambert(conc, params_.optics);
    OpticalFrame f{t, channel, {}, false};
    for (std::size_t w = 0; w < kWavelengthCount; ++w) {
      f.intensity[w] = intensity_from_attenuation(da[w], params_.source_intensity[c][w], params_.ambient[c][w]);
    }
    return f;
  }

  SubjectParams params_;
  double fs_;
  std::mt19937_64 rng_;
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
  std::normal_distribution<double> gaussian_{0.0, 1.0};

  int stress_;
  ConcentrationPair level_{};
  double heart_rate_ = 72.0;
  double cardiac_phase_ = 0.0;
  double vibration_seconds_ = 0.0;
  double task_seconds_ = 0.0;
  std::array<ConcentrationPair, kChannelCount> commanded_{};
};

}  // namespace nirsfb
