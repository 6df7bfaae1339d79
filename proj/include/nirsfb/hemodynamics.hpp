#pragma once

// Modified Beer-Lambert conversion from dual-wavelength optical intensity to
// oxy/deoxy hemoglobin concentration changes.
//
// Sign convention: attenuation is log10((I0 - G) / (I - G)), so a drop in
// detected light is a positive attenuation. Concentrations are in uM,
// extinction coefficients in 1/(mM*mm), pathlength in mm.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>

#include "nirsfb/config.hpp"
#include "nirsfb/error.hpp"

namespace nirsfb {

inline constexpr std::size_t kChannelCount = 2;
inline constexpr std::size_t kWavelengthCount = 2;

enum class Channel : std::uint8_t { Deep = 0, Superficial = 1 };

constexpr std::size_t index_of(Channel c) noexcept { return static_cast<std::size_t>(c); }

constexpr std::string_view to_string(Channel c) noexcept {
  return c == Channel::Deep ? "deep" : "superficial";
}

/// One detector reading for one channel at one sample tick.
struct OpticalFrame {
  std::uint64_t t_index = 0;
  Channel channel = Channel::Deep;
  std::array<double, kWavelengthCount> intensity{};
  /// Dark frame (sources off) used to measure ambient light during calibration.
  bool led_off = false;

  friend bool operator==(const OpticalFrame&, const OpticalFrame&) = default;
};

/// Indexed [channel][wavelength].
using ChannelWavelengthTable = std::array<std::array<double, kWavelengthCount>, kChannelCount>;

/// Baseline intensity I0 and ambient offset G per (channel, wavelength).
/// `i0` is the raw mean of lit frames, so the ambient-free baseline is
/// `i0 - ambient`.
struct CalibrationBaseline {
  ChannelWavelengthTable i0{};
  ChannelWavelengthTable ambient{};

  void validate() const {
    for (std::size_t c = 0; c < kChannelCount; ++c) {
      for (std::size_t w = 0; w < kWavelengthCount; ++w) {
        if (!(ambient[c][w] >= 0.0) || !(i0[c][w] > ambient[c][w])) {
          throw Error(ErrorCode::NonPositiveIntensity, "baseline requires i0 > ambient >= 0");
        }
      }
    }
  }

  friend bool operator==(const CalibrationBaseline&, const CalibrationBaseline&) = default;
};

struct BeerLambertParams {
  /// extinction[wavelength][chromophore], chromophore 0 = HBO, 1 = HHB.
  std::array<std::array<double, 2>, kWavelengthCount> extinction{{{0.14865, 0.38437}, {0.25264, 0.17986}}};
  double pathlength_mm = 30.0;
  std::array<double, kWavelengthCount> dpf{6.0, 6.0};

  [[nodiscard]] double determinant() const noexcept {
    return extinction[0][0] * extinction[1][1] - extinction[0][1] * extinction[1][0];
  }

  /// 2-norm condition number of the extinction matrix.
  [[nodiscard]] double condition_number() const noexcept {
    const double a = extinction[0][0], b = extinction[0][1];
    const double c = extinction[1][0], d = extinction[1][1];
    const double frob2 = a * a + b * b + c * c + d * d;
    const double det = std::abs(a * d - b * c);
    if (det == 0.0) return std::numeric_limits<double>::infinity();
    // singular values of a 2x2: s1*s2 = |det|, s1^2 + s2^2 = ||A||_F^2
    const double disc = std::sqrt(std::max(0.0, frob2 * frob2 - 4.0 * det * det));
    const double s1 = std::sqrt((frob2 + disc) / 2.0);
    const double s2 = det / s1;
    return s1 / s2;
  }

  void validate() const {
    if (!(pathlength_mm > 0.0)) throw Error(ErrorCode::InvalidConfig, "pathlength must be positive");
    for (double f : dpf) {
      if (!(f > 0.0)) throw Error(ErrorCode::InvalidConfig, "dpf must be positive");
    }
  }

  static BeerLambertParams from_config(const KeyValueConfig& cfg) {
    BeerLambertParams p;
    const auto e = cfg.get_doubles("hemo.extinction",
                                   {p.extinction[0][0], p.extinction[0][1], p.extinction[1][0], p.extinction[1][1]});
    if (e.size() != 4) throw Error(ErrorCode::InvalidConfig, "hemo.extinction needs 4 values");
    p.extinction = {{{e[0], e[1]}, {e[2], e[3]}}};
    p.pathlength_mm = cfg.get_double("hemo.pathlength_mm", p.pathlength_mm);
    const auto dpf = cfg.get_doubles("hemo.dpf", {p.dpf[0], p.dpf[1]});
    if (dpf.size() != 2) throw Error(ErrorCode::InvalidConfig, "hemo.dpf needs 2 values");
    p.dpf = {dpf[0], dpf[1]};
    p.validate();
    return p;
  }
};

struct HemoSample {
  std::uint64_t t_index = 0;
  Channel channel = Channel::Deep;
  double hbo = 0.0;  // uM
  double hhb = 0.0;  // uM
};

struct ConcentrationPair {
  double hbo = 0.0;
  double hhb = 0.0;
};

using AttenuationPair = std::array<double, kWavelengthCount>;

inline constexpr double kSingularTolerance = 1e-12;
// extinction is per mM, concentrations are uM
inline constexpr double kMicroToMilli = 1e-3;

inline double absorbance(double i, double i0, double g) {
  if (!(i > g) || !(i0 > g)) {
    throw Error(ErrorCode::NonPositiveIntensity, "absorbance requires i > g and i0 > g");
  }
  return std::log10((i0 - g) / (i - g));
}

/// Attenuation change produced by a concentration change.
inline AttenuationPair forward_beer_lambert(ConcentrationPair c, const BeerLambertParams& params) {
  AttenuationPair out{};
  for (std::size_t w = 0; w < kWavelengthCount; ++w) {
    const double scale = params.pathlength_mm * params.dpf[w] * kMicroToMilli;
    out[w] = (params.extinction[w][0] * c.hbo + params.extinction[w][1] * c.hhb) * scale;
  }
  return out;
}

/// Solves the two-wavelength system for (dHBO, dHHB).
inline ConcentrationPair invert_beer_lambert(AttenuationPair da, const BeerLambertParams& params) {
  const double det = params.determinant();
  if (!(std::abs(det) >= kSingularTolerance)) {
    throw Error(ErrorCode::SingularMatrix, "extinction matrix determinant below tolerance");
  }
  // divide out the per-wavelength optical length first, then apply the
  // inverse of the extinction matrix
  const double b0 = da[0] / (params.pathlength_mm * params.dpf[0] * kMicroToMilli);
  const double b1 = da[1] / (params.pathlength_mm * params.dpf[1] * kMicroToMilli);
  const auto& e = params.extinction;
  return {(e[1][1] * b0 - e[0][1] * b1) / det, (e[0][0] * b1 - e[1][0] * b0) / det};
}

/// Detector intensity that yields attenuation `a` against baseline (i0, g).
inline double intensity_from_attenuation(double a, double i0, double g) {
  return g + (i0 - g) * std::pow(10.0, -a);
}

/// Baseline from a rest window. Lit frames give i0; dark frames (if any)
/// give the ambient offset. Each channel needs at least
/// `duration_s * fs` lit frames.
inline CalibrationBaseline calibrate(std::span<const OpticalFrame> frames, double duration_s, double fs) {
  if (frames.empty()) throw Error(ErrorCode::EmptyWindow, "calibration window is empty");

  ChannelWavelengthTable lit_sum{}, dark_sum{};
  std::array<std::size_t, kChannelCount> lit_n{}, dark_n{};
  for (const auto& f : frames) {
    const auto c = index_of(f.channel);
    if (c >= kChannelCount) throw Error(ErrorCode::InvalidField, "unknown channel in calibration window");
    for (std::size_t w = 0; w < kWavelengthCount; ++w) {
      if (f.led_off) {
        if (!(f.intensity[w] >= 0.0)) throw Error(ErrorCode::NonPositiveIntensity, "negative dark intensity");
        dark_sum[c][w] += f.intensity[w];
      } else {
        if (!(f.intensity[w] > 0.0)) throw Error(ErrorCode::NonPositiveIntensity, "non-positive intensity");
        lit_sum[c][w] += f.intensity[w];
      }
    }
    ++(f.led_off ? dark_n : lit_n)[c];
  }

  const auto required = static_cast<std::size_t>(std::ceil(duration_s * fs - 1e-9));
  CalibrationBaseline out;
  for (std::size_t c = 0; c < kChannelCount; ++c) {
    if (lit_n[c] == 0 || lit_n[c] < required) {
      throw Error(ErrorCode::EmptyWindow, "calibration window shorter than requested duration on channel " +
                                              std::string(to_string(static_cast<Channel>(c))));
    }
    for (std::size_t w = 0; w < kWavelengthCount; ++w) {
      out.i0[c][w] = lit_sum[c][w] / static_cast<double>(lit_n[c]);
      out.ambient[c][w] = dark_n[c] ? dark_sum[c][w] / static_cast<double>(dark_n[c]) : 0.0;
    }
  }
  out.validate();
  return out;
}

/// Frame-by-frame conversion against a fixed baseline.
class HemoConverter {
 public:
  HemoConverter(BeerLambertParams params, CalibrationBaseline baseline)
      : params_(params), baseline_(baseline) {
    params_.validate();
    baseline_.validate();
    if (!(std::abs(params_.determinant()) >= kSingularTolerance)) {
      throw Error(ErrorCode::SingularMatrix, "extinction matrix determinant below tolerance");
    }
  }

  [[nodiscard]] HemoSample convert(const OpticalFrame& frame) const {
    const auto c = index_of(frame.channel);
    AttenuationPair da{};
    for (std::size_t w = 0; w < kWavelengthCount; ++w) {
      da[w] = absorbance(frame.intensity[w], baseline_.i0[c][w], baseline_.ambient[c][w]);
    }
    const auto conc = invert_beer_lambert(da, params_);
    return {frame.t_index, frame.channel, conc.hbo, conc.hhb};
  }

  [[nodiscard]] const BeerLambertParams& params() const noexcept { return params_; }
  [[nodiscard]] const CalibrationBaseline& baseline() const noexcept { return baseline_; }

 private:
  BeerLambertParams params_;
  CalibrationBaseline baseline_;
};

}  // namespace nirsfb
