#pragma once

// Experiment protocol. A session owns one simulated subject and the three
// nodes, wired over an in-process datagram bus, and steps them one sample
// tick at a time:
//
//   calibration -> training phase -> test phases 1..4
//
// Each phase starts with an Init (the recorder recalibrates, the server
// resets its feature state). Training labels every vector by its block
// kind; test phases stream predictions and, with feedback on, the actuator
// state flows back into the subject. Report numbers are derived from the
// group and answer records, so they can be recomputed from the log.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iterator>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "nirsfb/classifier.hpp"
#include "nirsfb/config.hpp"
#include "nirsfb/error.hpp"
#include "nirsfb/features.hpp"
#include "nirsfb/jsonl.hpp"
#include "nirsfb/nodes.hpp"
#include "nirsfb/subject_sim.hpp"
#include "nirsfb/transport.hpp"
#include "nirsfb/wire.hpp"

namespace nirsfb {

struct BlockSpec {
  BlockKind kind = BlockKind::Rest;
  double duration_s = 10.0;    // rest blocks
  std::size_t item_count = 0;  // task blocks
  double per_item_s = 2.0;
  bool recording_paused_after = false;

  static BlockSpec rest(double seconds) { return {BlockKind::Rest, seconds, 0, 0.0, false}; }
  static BlockSpec task(BlockKind kind, std::size_t items, double per_item_s, bool paused_after = true) {
    return {kind, 0.0, items, per_item_s, paused_after};
  }

  [[nodiscard]] double seconds() const noexcept {
    return is_task(kind) ? static_cast<double>(item_count) * per_item_s : duration_s;
  }
  [[nodiscard]] std::size_t item_samples(double fs) const noexcept {
    return static_cast<std::size_t>(std::llround(per_item_s * fs));
  }
  [[nodiscard]] std::size_t samples(double fs) const noexcept {
    return is_task(kind) ? item_count * item_samples(fs) : static_cast<std::size_t>(std::llround(duration_s * fs));
  }
  void validate(double fs) const {
    if (is_task(kind)) {
      if (item_count == 0 || !(per_item_s > 0.0)) throw Error(ErrorCode::InvalidConfig, "task block needs items and item time");
      if (item_samples(fs) == 0) throw Error(ErrorCode::InvalidConfig, "item shorter than one sample");
    } else if (!(duration_s > 0.0) || samples(fs) == 0) {
      throw Error(ErrorCode::InvalidConfig, "rest block duration must be positive");
    }
  }
};

struct PhaseSpec {
  std::vector<BlockSpec> blocks;

  [[nodiscard]] std::size_t samples(double fs) const {
    std::size_t n = 0;
    for (const auto& b : blocks) n += b.samples(fs);
    return n;
  }
  void validate(double fs) const {
    if (blocks.empty()) throw Error(ErrorCode::InvalidConfig, "phase has no blocks");
    for (const auto& b : blocks) b.validate(fs);
  }
};

/// Block script shared by the training and test phases: a rest block before
/// each calculation block.
struct ProtocolConfig {
  double rest_s = 10.0;
  std::vector<std::size_t> item_counts{10, 15, 20, 25};
  double train_item_s = 2.0;
  double test_item_s = 2.0;
  double test_fast_item_s = 1.5;
  std::size_t test_fast_blocks = 2;
  std::size_t test_phases = 4;

  [[nodiscard]] PhaseSpec training_phase() const {
    PhaseSpec p;
    for (auto n : item_counts) {
      p.blocks.push_back(BlockSpec::rest(rest_s));
      p.blocks.push_back(BlockSpec::task(BlockKind::Calculation, n, train_item_s));
    }
    return p;
  }
  /// Test phase; `special` swaps every calculation block for the
  /// special-test variant (experimental).
  [[nodiscard]] PhaseSpec test_phase(bool special) const {
    PhaseSpec p;
    std::size_t k = 0;
    for (auto n : item_counts) {
      p.blocks.push_back(BlockSpec::rest(rest_s));
      const double item_s = k++ < test_fast_blocks ? test_fast_item_s : test_item_s;
      p.blocks.push_back(BlockSpec::task(special ? BlockKind::SpecialTest : BlockKind::Calculation, n, item_s));
    }
    return p;
  }
};

/// Probability of a correct answer given the stressed fraction of the item:
/// 1 / (1 + exp(-(bias - slope * fraction))).
struct AnswerModel {
  double bias = 2.5;
  double slope = 3.0;
  [[nodiscard]] double p_correct(double stressed_fraction) const noexcept {
    return 1.0 / (1.0 + std::exp(-(bias - slope * stressed_fraction)));
  }
};

enum class PredictorKind : std::uint8_t { Knn, Oracle };

struct DetectionConfig {
  std::size_t repetitions = 5;
  double flip_rate = 0.0;  // planted symmetric group-label noise
  double margin_s = 0.0;   // groups starting this soon after a block change are not scored
};

struct SessionConfig {
  double fs = 10.0;
  SubjectParams subject{};
  FeatureExtractorConfig features{};
  FitConfig fit{};
  std::uint32_t debounce_m = 3;
  double calib_duration_s = 5.0;
  double dark_s = 1.0;
  double pause_s = 5.0;
  double gap_s = 5.0;
  ProtocolConfig protocol{};
  bool biofeedback = true;
  std::uint64_t seed = 1;
  AnswerModel answers{};
  PredictorKind predictor = PredictorKind::Knn;
  bool special_test = true;
  DetectionConfig detection{};

  void validate() const {
    if (!(fs > 0.0)) throw Error(ErrorCode::InvalidConfig, "fs must be positive");
    subject.validate(fs);
    features.validate();
    if (features.fs != fs || features.peaks.fs != fs) throw Error(ErrorCode::InvalidConfig, "feature fs differs from session fs");
    if (debounce_m == 0) throw Error(ErrorCode::InvalidConfig, "debounce m must be at least 1");
    if (!(calib_duration_s > 0.0) || !(dark_s >= 0.0) || !(pause_s >= 0.0) || !(gap_s >= 0.0)) {
      throw Error(ErrorCode::InvalidConfig, "session timings must be non-negative");
    }
    if (protocol.item_counts.empty()) throw Error(ErrorCode::InvalidConfig, "phase list is empty");
    if (protocol.test_phases == 0) throw Error(ErrorCode::InvalidConfig, "need at least one test phase");
    protocol.training_phase().validate(fs);
    protocol.test_phase(false).validate(fs);
    if (!(detection.flip_rate >= 0.0 && detection.flip_rate <= 1.0)) {
      throw Error(ErrorCode::InvalidConfig, "flip rate must be in [0,1]");
    }
    if (!(detection.margin_s >= 0.0)) throw Error(ErrorCode::InvalidConfig, "detection margin must be non-negative");
  }

  static SessionConfig from_config(const KeyValueConfig& cfg) {
    SessionConfig s;
    s.fs = cfg.get_double("session.fs", s.fs);
    s.subject = SubjectParams::from_config(cfg);
    s.features = FeatureExtractorConfig::from_config(cfg, s.fs);
    s.fit = FitConfig::from_config(cfg);
    s.debounce_m = static_cast<std::uint32_t>(cfg.get_int("actuator.debounce_m", s.debounce_m));
    s.calib_duration_s = cfg.get_double("session.calib_duration_s", s.calib_duration_s);
    s.dark_s = cfg.get_double("session.dark_s", s.dark_s);
    s.pause_s = cfg.get_double("session.pause_s", s.pause_s);
    s.gap_s = cfg.get_double("session.gap_s", s.gap_s);
    s.protocol.rest_s = cfg.get_double("protocol.rest_s", s.protocol.rest_s);
    std::vector<double> counts;
    for (auto n : s.protocol.item_counts) counts.push_back(static_cast<double>(n));
    counts = cfg.get_doubles("protocol.item_counts", counts);
    s.protocol.item_counts.clear();
    for (double c : counts) {
      if (!(c >= 1.0) || c != std::floor(c)) throw Error(ErrorCode::InvalidConfig, "protocol.item_counts must be positive integers");
      s.protocol.item_counts.push_back(static_cast<std::size_t>(c));
    }
    s.protocol.train_item_s = cfg.get_double("protocol.train_item_s", s.protocol.train_item_s);
    s.protocol.test_item_s = cfg.get_double("protocol.test_item_s", s.protocol.test_item_s);
    s.protocol.test_fast_item_s = cfg.get_double("protocol.test_fast_item_s", s.protocol.test_fast_item_s);
    s.protocol.test_fast_blocks =
        static_cast<std::size_t>(cfg.get_int("protocol.test_fast_blocks", static_cast<std::int64_t>(s.protocol.test_fast_blocks)));
    s.protocol.test_phases =
        static_cast<std::size_t>(cfg.get_int("protocol.test_phases", static_cast<std::int64_t>(s.protocol.test_phases)));
    s.biofeedback = cfg.get_bool("session.biofeedback", s.biofeedback);
    s.seed = static_cast<std::uint64_t>(cfg.get_int("session.seed", static_cast<std::int64_t>(s.seed)));
    s.answers.bias = cfg.get_double("answers.bias", s.answers.bias);
    s.answers.slope = cfg.get_double("answers.slope", s.answers.slope);
    const auto pred = cfg.get_string("session.predictor", "knn");
    if (pred == "knn") {
      s.predictor = PredictorKind::Knn;
    } else if (pred == "oracle") {
      s.predictor = PredictorKind::Oracle;
    } else {
      throw Error(ErrorCode::InvalidConfig, "session.predictor must be knn or oracle");
    }
    s.special_test = cfg.get_bool("session.special_test", s.special_test);
    s.detection.repetitions =
        static_cast<std::size_t>(cfg.get_int("detect.repetitions", static_cast<std::int64_t>(s.detection.repetitions)));
    s.detection.flip_rate = cfg.get_double("detect.flip_rate", s.detection.flip_rate);
    s.detection.margin_s = cfg.get_double("detect.margin_s", s.detection.margin_s);
    s.validate();
    return s;
  }
};

enum class PhaseRole : std::uint8_t { Training, Test, Scoring };

constexpr std::string_view to_string(PhaseRole r) noexcept {
  switch (r) {
    case PhaseRole::Training: return "training";
    case PhaseRole::Test: return "test";
    case PhaseRole::Scoring: return "scoring";
  }
  return "unknown";
}

/// One recorded sample tick.
struct TickRecord {
  std::uint64_t t_index = 0;
  std::size_t block = 0;
  BlockKind kind = BlockKind::Rest;
  int truth = 0;  // latent state that generated the sample
  std::optional<int> prediction;
  bool vibration_on = false;
  std::optional<FeatureVector> vector;
};

struct GroupRecord {
  std::size_t index = 0;
  std::uint64_t first_t = 0;
  std::size_t block = 0;  // block holding most of the group's samples
  int label = 0;          // majority of the ten predictions
  std::size_t task_samples = 0;
  int script_truth = 0;  // majority of block-kind labels
  int latent_truth = 0;  // majority of latent labels
  [[nodiscard]] bool is_task_group() const noexcept { return 2 * task_samples >= kGroupSize; }
};

struct PhaseResult {
  std::size_t phase = 0;
  std::string name;
  PhaseRole role = PhaseRole::Test;
  bool special = false;
  double stressed_fraction = 0.0;  // mean group label over task groups
  std::size_t task_groups = 0;
  double answer_accuracy = 0.0;
  std::size_t answers = 0;
  std::size_t correct_answers = 0;
  double latent_stressed_fraction = 0.0;  // over task-block samples
  std::vector<GroupRecord> groups;
  std::vector<double> block_stressed_fraction;  // per task block, from groups
  std::size_t valid_predictions = 0;
  std::size_t vibration_samples = 0;
};

struct TrainingResult {
  std::vector<LabeledVector> rows;
  StressModel model;
  PhaseResult phase;
};

/// Relative change of the stressed fraction from phase i to phase j, in percent.
inline double stress_reduction(double si, double sj) {
  if (!(si > 0.0)) throw Error(ErrorCode::UndefinedBaseline, "stress reduction needs a non-zero baseline fraction");
  return (si - sj) / si * 100.0;
}

/// Accuracy change from phase i to phase j, in percentage points.
inline double accuracy_enhancement(double ai, double aj) { return (aj - ai) * 100.0; }

struct TableRow {
  std::string label;
  std::optional<double> stress_reduction_pct;
  double accuracy_enhancement_pp = 0.0;
};

/// Consecutive transitions between test phases plus the first-to-last total.
inline std::vector<TableRow> result_table(const std::vector<double>& stressed, const std::vector<double>& accuracy) {
  if (stressed.size() != accuracy.size()) throw Error(ErrorCode::InvalidField, "phase vectors differ in length");
  std::vector<TableRow> rows;
  auto row = [&](std::size_t i, std::size_t j, std::string label) {
    TableRow r;
    r.label = std::move(label);
    if (stressed[i] > 0.0) r.stress_reduction_pct = stress_reduction(stressed[i], stressed[j]);
    r.accuracy_enhancement_pp = accuracy_enhancement(accuracy[i], accuracy[j]);
    rows.push_back(std::move(r));
  };
  for (std::size_t j = 1; j < stressed.size(); ++j) {
    row(j - 1, j, "Test" + std::to_string(j + 1) + "-Test" + std::to_string(j));
  }
  if (stressed.size() >= 2) row(0, stressed.size() - 1, "Total");
  return rows;
}

/// Largest sample-time delay from the first stress packet of a debounced run
/// to the tick at which the actuator switched.
struct LatencyStats {
  std::uint64_t switches = 0;
  std::uint64_t max_samples = 0;
  double mean_samples = 0.0;
};

struct SessionResult {
  std::uint64_t seed = 0;
  bool biofeedback = false;
  TrainingResult training;
  std::vector<PhaseResult> tests;
  LatencyStats latency;
  std::uint64_t total_samples = 0;

  [[nodiscard]] std::vector<double> stressed_fractions() const {
    std::vector<double> out;
    for (const auto& p : tests) out.push_back(p.stressed_fraction);
    return out;
  }
  [[nodiscard]] std::vector<double> answer_accuracies() const {
    std::vector<double> out;
    for (const auto& p : tests) out.push_back(p.answer_accuracy);
    return out;
  }
  [[nodiscard]] std::vector<TableRow> table() const { return result_table(stressed_fractions(), answer_accuracies()); }
  /// First-to-last test phase stress reduction; empty when phase 1 had no stress.
  [[nodiscard]] std::optional<double> total_stress_reduction() const {
    if (tests.size() < 2 || !(tests.front().stressed_fraction > 0.0)) return std::nullopt;
    return stress_reduction(tests.front().stressed_fraction, tests.back().stressed_fraction);
  }
};

struct DetectionResult {
  ConfusionMatrix cm;
  Metrics metrics;
  std::size_t scored_groups = 0;
  std::size_t skipped_groups = 0;
  double training_loo_accuracy = 0.0;
};

namespace detail {

inline int majority_with_ties_to_stress(std::span<const int> labels) { return group_majority(labels); }

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream)};
  std::uint64_t out = 0;
  std::array<std::uint32_t, 2> words{};
  seq.generate(words.begin(), words.end());
  out = (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
  return out;
}

}  // namespace detail

class Session {
 public:
  static constexpr std::uint16_t kDataPort = 1;
  static constexpr std::uint16_t kControlPort = 2;
  static constexpr std::uint16_t kStressPort = 3;

  explicit Session(SessionConfig cfg, JsonlLog* log = nullptr)
      : cfg_(validated(std::move(cfg))),
        bus_(std::make_shared<LoopbackBus>()),
        recorder_tx_(bus_, 0, kDataPort),
        server_rx_(bus_, kDataPort, kControlPort),
        recorder_control_(bus_, kControlPort, 0),
        stress_tx_(bus_, 0, kStressPort),
        actuator_rx_(bus_, kStressPort, 0),
        subject_(subject_params(cfg_), cfg_.fs),
        source_(*this),
        recorder_(source_, recorder_tx_, cfg_.fs, cfg_.dark_s),
        server_(server_config(cfg_), server_rx_, &stress_tx_, &server_rx_),
        actuator_(actuator_rx_, cfg_.debounce_m),
        log_(log),
        answer_rng_(detail::mix_seed(cfg_.seed, 1)),
        flip_rng_(detail::mix_seed(cfg_.seed, 2)) {
    server_.on_vector([this](const FeatureVector& v, std::optional<int> pred) {
      last_vector_ = v;
      last_prediction_ = pred;
    });
    actuator_.set_on_apply([this](const ActuatorNode::TraceEntry& e) { track_latency(e); });
    if (log_) {
      log_->append({{"type", "session"},
                    {"seed", cfg_.seed},
                    {"biofeedback", cfg_.biofeedback},
                    {"fs", cfg_.fs},
                    {"debounce_m", cfg_.debounce_m},
                    {"predictor", cfg_.predictor == PredictorKind::Knn ? "knn" : "oracle"}});
    }
  }

  Session(const Session&) = delete;
  Session& operator=(const Session&) = delete;

  /// Calibration followed by the training phase; fits the classifier.
  TrainingResult run_training_phase() {
    TrainingResult out;
    rows_ = &out.rows;
    out.phase = run_phase(cfg_.protocol.training_phase(), PhaseRole::Training, "training", nullptr);
    rows_ = nullptr;
    out.model = fit(out.rows, cfg_.fit);
    return out;
  }

  /// One live test phase with the given model (unused with the oracle predictor).
  PhaseResult run_test_phase(std::size_t index, const StressModel* model, bool special = false) {
    if (cfg_.predictor == PredictorKind::Knn && model == nullptr) {
      throw Error(ErrorCode::ModelMissing, "test phase needs a fitted model");
    }
    const auto spec = cfg_.protocol.test_phase(special);
    return run_phase(spec, PhaseRole::Test, "test" + std::to_string(index), model, special);
  }

  /// Training phase scored against the block script with a fixed model.
  PhaseResult run_scoring_phase(std::size_t repetition, const StressModel* model) {
    if (cfg_.predictor == PredictorKind::Knn && model == nullptr) {
      throw Error(ErrorCode::ModelMissing, "scoring needs a fitted model");
    }
    return run_phase(cfg_.protocol.training_phase(), PhaseRole::Scoring, "repetition" + std::to_string(repetition), model);
  }

  /// Full protocol: training, then the configured number of test phases. A
  /// phase answered without mistakes sends the next one to the special test.
  SessionResult run(std::optional<StressModel> pretrained = std::nullopt) {
    SessionResult r;
    r.seed = cfg_.seed;
    r.biofeedback = cfg_.biofeedback;
    if (pretrained) {
      r.training.model = std::move(*pretrained);
    } else {
      r.training = run_training_phase();
    }
    bool special = false;
    for (std::size_t i = 1; i <= cfg_.protocol.test_phases; ++i) {
      auto p = run_test_phase(i, &r.training.model, special);
      special = cfg_.special_test && p.answers > 0 && p.correct_answers == p.answers;
      r.tests.push_back(std::move(p));
    }
    r.latency = latency_;
    r.total_samples = recorder_.clock().t_index;
    if (log_) {
      auto rows = nlohmann::json::array();
      for (const auto& row : r.table()) rows.push_back(table_row_json(row));
      log_->append({{"type", "summary"},
                    {"table", rows},
                    {"latency_max_samples", latency_.max_samples},
                    {"total_samples", r.total_samples}});
    }
    return r;
  }

  /// Fits on the first training repetition and scores the remaining ones at
  /// group granularity against the block script.
  DetectionResult run_detection_eval() {
    if (cfg_.detection.repetitions < 2) throw Error(ErrorCode::InvalidConfig, "detection needs at least two repetitions");
    DetectionResult d;
    const auto training = run_training_phase();
    d.training_loo_accuracy = training.model.knn.leave_one_out_accuracy();
    const auto margin = static_cast<std::uint64_t>(std::llround(cfg_.detection.margin_s * cfg_.fs));
    std::bernoulli_distribution flip(cfg_.detection.flip_rate);
    for (std::size_t rep = 2; rep <= cfg_.detection.repetitions; ++rep) {
      const auto phase = run_scoring_phase(rep, &training.model);
      for (const auto& g : phase.groups) {
        if (g.first_t < block_start_of(g.first_t) + margin) {
          ++d.skipped_groups;
          continue;
        }
        int predicted = g.label;
        if (cfg_.detection.flip_rate > 0.0 && flip(flip_rng_)) predicted = 1 - predicted;
        d.cm.add(g.script_truth, predicted);
        ++d.scored_groups;
        if (log_) {
          log_->append({{"type", "detection"},
                        {"phase", phase.phase},
                        {"group", g.index},
                        {"truth", g.script_truth},
                        {"predicted", predicted}});
        }
      }
    }
    d.metrics = metrics(d.cm);
    return d;
  }

  /// Sends Init and lets the recorder calibrate; the server picks up the
  /// report on the next poll.
  void calibrate() {
    block_ = BlockKind::Rest;
    server_.send_command(wire::InitPacket{static_cast<std::uint8_t>(kChannelCount), cfg_.calib_duration_s});
    recorder_.poll_control(recorder_control_);
    server_.poll();
    actuator_.poll();
    if (!server_.calibrated()) throw Error(ErrorCode::ProtocolViolation, "server did not receive a calibration report");
    if (log_) {
      const auto& b = *recorder_.baseline();
      log_->append({{"type", "calibration"}, {"t_index", recorder_.clock().t_index}, {"i0", b.i0}, {"ambient", b.ambient}});
    }
  }

  [[nodiscard]] const SessionConfig& config() const noexcept { return cfg_; }
  [[nodiscard]] const SubjectModel& subject() const noexcept { return subject_; }
  [[nodiscard]] const RecorderNode& recorder() const noexcept { return recorder_; }
  [[nodiscard]] const ServerNode& server() const noexcept { return server_; }
  [[nodiscard]] const ActuatorNode& actuator() const noexcept { return actuator_; }
  [[nodiscard]] const LatencyStats& latency() const noexcept { return latency_; }
  /// Called for every recorded tick of every phase.
  void set_tick_hook(std::function<void(const TickRecord&)> hook) { tick_hook_ = std::move(hook); }
  /// Ticks of the most recent phase.
  [[nodiscard]] const std::vector<TickRecord>& last_ticks() const noexcept { return ticks_; }

 private:
  class SubjectSource final : public FrameSource {
   public:
    explicit SubjectSource(Session& s) : s_(s) {}
    std::array<OpticalFrame, kChannelCount> lit(const SampleClock& clock) override {
      return s_.subject_.step(clock, s_.block_, s_.actuator_.vibration_on());
    }
    std::array<OpticalFrame, kChannelCount> dark(const SampleClock& clock) override {
      return s_.subject_.dark_frames(clock);
    }

   private:
    Session& s_;
  };

  static SessionConfig validated(SessionConfig c) {
    c.validate();
    return c;
  }
  static SubjectParams subject_params(const SessionConfig& c) {
    auto p = c.subject;
    p.rng_seed = c.seed;
    return p;
  }
  static ServerConfig server_config(const SessionConfig& c) {
    ServerConfig s;
    s.fs = c.fs;
    s.optics = c.subject.optics;
    s.features = c.features;
    s.send_stress = c.biofeedback;
    return s;
  }

  static nlohmann::json table_row_json(const TableRow& row) {
    nlohmann::json j{{"label", row.label}, {"accuracy_enhancement_pp", row.accuracy_enhancement_pp}};
    j["stress_reduction_pct"] = row.stress_reduction_pct ? nlohmann::json(*row.stress_reduction_pct) : nlohmann::json(nullptr);
    return j;
  }

  void command(wire::CommandKind k) {
    server_.send_command(wire::CommandPacket{k});
    recorder_.poll_control(recorder_control_);
  }

  /// One sample: recorder emits, server classifies, actuator reacts.
  void tick(bool recorded) {
    const auto t = recorder_.clock().t_index;
    last_vector_.reset();
    last_prediction_.reset();
    current_t_ = t;
    recorder_.tick();
    current_truth_ = subject_.truth_label();
    server_.poll();
    actuator_.poll();
    if (!recorded) return;
    TickRecord rec{t, block_index_, block_, current_truth_, std::nullopt, actuator_.vibration_on(), std::nullopt};
    if (last_vector_ && last_vector_->t_index == t) {
      rec.prediction = last_prediction_;
      rec.vector = last_vector_;
      if (rows_) {
        rows_->push_back({*last_vector_, is_task(block_) ? 1 : 0});
      }
    }
    ticks_.push_back(rec);
    if (tick_hook_) tick_hook_(rec);
    if (log_) {
      log_->append({{"type", "tick"},
                    {"phase", phase_index_},
                    {"t", t},
                    {"block", block_index_},
                    {"kind", to_string(block_)},
                    {"truth", current_truth_},
                    {"pred", rec.prediction ? nlohmann::json(*rec.prediction) : nlohmann::json(nullptr)},
                    {"vib", rec.vibration_on}});
    }
  }

  void idle_ticks(double seconds) {
    block_ = BlockKind::Rest;
    const auto n = static_cast<std::size_t>(std::llround(seconds * cfg_.fs));
    for (std::size_t i = 0; i < n; ++i) tick(false);
  }

  void install_predictor(PhaseRole role, const StressModel* model) {
    if (role == PhaseRole::Training) {
      server_.set_predictor(nullptr);
      server_.set_send_stress(false);
      return;
    }
    server_.set_send_stress(role == PhaseRole::Test && cfg_.biofeedback);
    if (cfg_.predictor == PredictorKind::Oracle) {
      server_.set_predictor([this](const FeatureVector& v) -> std::optional<int> {
        if (!v.fully_valid()) return std::nullopt;
        return current_truth_;
      });
    } else {
      server_.set_predictor([model](const FeatureVector& v) -> std::optional<int> {
        if (!v.fully_valid()) return std::nullopt;
        return model->predict(v);
      });
    }
  }

  PhaseResult run_phase(const PhaseSpec& spec, PhaseRole role, const std::string& name, const StressModel* model,
                        bool special = false) {
    spec.validate(cfg_.fs);
    ++phase_index_;
    ticks_.clear();
    block_starts_.clear();
    if (log_) {
      log_->append({{"type", "phase_begin"},
                    {"phase", phase_index_},
                    {"name", name},
                    {"role", to_string(role)},
                    {"special", special}});
    }
    install_predictor(role, model);
    calibrate();
    for (std::size_t b = 0; b < spec.blocks.size(); ++b) {
      const auto& block = spec.blocks[b];
      block_index_ = b;
      block_ = block.kind;
      block_starts_[recorder_.clock().t_index] = b;
      if (log_) {
        log_->append({{"type", "block"},
                      {"phase", phase_index_},
                      {"block", b},
                      {"kind", to_string(block.kind)},
                      {"t_start", recorder_.clock().t_index},
                      {"samples", block.samples(cfg_.fs)},
                      {"items", block.item_count},
                      {"per_item_s", block.per_item_s}});
      }
      command(wire::CommandKind::Run);
      const auto n = block.samples(cfg_.fs);
      for (std::size_t i = 0; i < n; ++i) tick(true);
      if (block.recording_paused_after) {
        command(wire::CommandKind::Pause);
        idle_ticks(cfg_.pause_s);
      }
    }
    command(wire::CommandKind::Pause);
    actuator_.reset();
    last_vibration_ = false;
    PhaseResult result = summarize(spec, role, name, special);
    idle_ticks(cfg_.gap_s);
    return result;
  }

  PhaseResult summarize(const PhaseSpec& spec, PhaseRole role, const std::string& name, bool special) {
    PhaseResult r;
    r.phase = phase_index_;
    r.name = name;
    r.role = role;
    r.special = special;

    std::vector<const TickRecord*> predicted;
    std::size_t task_ticks = 0, task_stressed = 0;
    for (const auto& t : ticks_) {
      if (t.prediction) predicted.push_back(&t);
      if (is_task(t.kind)) {
        ++task_ticks;
        task_stressed += static_cast<std::size_t>(t.truth);
      }
      r.vibration_samples += t.vibration_on ? 1 : 0;
    }
    r.valid_predictions = predicted.size();
    r.latent_stressed_fraction = task_ticks ? static_cast<double>(task_stressed) / static_cast<double>(task_ticks) : 0.0;

    // groups of ten consecutive predictions; a trailing partial group is dropped
    std::map<std::size_t, std::pair<std::size_t, std::size_t>> per_block;  // block -> (ones, groups)
    std::size_t task_ones = 0;
    for (std::size_t g = 0; g + kGroupSize <= predicted.size(); g += kGroupSize) {
      std::array<int, kGroupSize> preds{}, script{}, latent{};
      std::map<std::size_t, std::size_t> block_count;
      GroupRecord rec;
      rec.index = g / kGroupSize;
      rec.first_t = predicted[g]->t_index;
      for (std::size_t i = 0; i < kGroupSize; ++i) {
        const auto* t = predicted[g + i];
        preds[i] = *t->prediction;
        script[i] = is_task(t->kind) ? 1 : 0;
        latent[i] = t->truth;
        rec.task_samples += static_cast<std::size_t>(script[i]);
        ++block_count[t->block];
      }
      rec.label = group_majority(preds);
      rec.script_truth = detail::majority_with_ties_to_stress(script);
      rec.latent_truth = detail::majority_with_ties_to_stress(latent);
      rec.block = std::max_element(block_count.begin(), block_count.end(), [](const auto& a, const auto& b) {
                    return a.second < b.second;
                  })->first;
      if (rec.is_task_group()) {
        ++r.task_groups;
        task_ones += static_cast<std::size_t>(rec.label);
        if (is_task(spec.blocks[rec.block].kind)) {
          auto& pb = per_block[rec.block];
          pb.first += static_cast<std::size_t>(rec.label);
          ++pb.second;
        }
      }
      if (log_) {
        log_->append({{"type", "group"},
                      {"phase", phase_index_},
                      {"group", rec.index},
                      {"first_t", rec.first_t},
                      {"block", rec.block},
                      {"label", rec.label},
                      {"task_samples", rec.task_samples},
                      {"script_truth", rec.script_truth},
                      {"latent_truth", rec.latent_truth}});
      }
      r.groups.push_back(rec);
    }
    r.stressed_fraction = r.task_groups ? static_cast<double>(task_ones) / static_cast<double>(r.task_groups) : 0.0;
    for (std::size_t b = 0; b < spec.blocks.size(); ++b) {
      if (!is_task(spec.blocks[b].kind)) continue;
      const auto it = per_block.find(b);
      r.block_stressed_fraction.push_back(it == per_block.end() || it->second.second == 0
                                              ? 0.0
                                              : static_cast<double>(it->second.first) / static_cast<double>(it->second.second));
    }

    if (role == PhaseRole::Test) score_answers(spec, r);

    if (log_) {
      log_->append({{"type", "phase_end"},
                    {"phase", r.phase},
                    {"name", r.name},
                    {"role", to_string(role)},
                    {"stressed_fraction", r.stressed_fraction},
                    {"task_groups", r.task_groups},
                    {"answer_accuracy", r.answer_accuracy},
                    {"answers", r.answers},
                    {"latent_stressed_fraction", r.latent_stressed_fraction},
                    {"vibration_samples", r.vibration_samples}});
    }
    return r;
  }

  /// One simulated answer per item; the chance of a correct answer falls
  /// with the latent stressed fraction over the item's samples.
  void score_answers(const PhaseSpec& spec, PhaseResult& r) {
    std::map<std::size_t, std::vector<int>> truth_by_block;
    for (const auto& t : ticks_) truth_by_block[t.block].push_back(t.truth);
    for (std::size_t b = 0; b < spec.blocks.size(); ++b) {
      const auto& block = spec.blocks[b];
      if (!is_task(block.kind)) continue;
      const auto& truth = truth_by_block[b];
      const auto per_item = block.item_samples(cfg_.fs);
      for (std::size_t item = 0; item < block.item_count; ++item) {
        std::size_t stressed = 0;
        for (std::size_t i = item * per_item; i < (item + 1) * per_item && i < truth.size(); ++i) {
          stressed += static_cast<std::size_t>(truth[i]);
        }
        const double frac = static_cast<double>(stressed) / static_cast<double>(per_item);
        const bool correct = std::bernoulli_distribution(cfg_.answers.p_correct(frac))(answer_rng_);
        ++r.answers;
        r.correct_answers += correct ? 1 : 0;
        if (log_) {
          log_->append({{"type", "answer"},
                        {"phase", r.phase},
                        {"block", b},
                        {"item", item},
                        {"stressed_fraction", frac},
                        {"correct", correct}});
        }
      }
    }
    r.answer_accuracy = r.answers ? static_cast<double>(r.correct_answers) / static_cast<double>(r.answers) : 0.0;
  }

  // A switch needs m consecutive opposite levels; the one that completes
  // the run arrived (current_t - t_index) samples after its sample, and the
  // device deliberately held for the m - 1 samples before it.
  void track_latency(const ActuatorNode::TraceEntry& e) {
    if (e.vibration_on == last_vibration_) return;
    last_vibration_ = e.vibration_on;
    const auto transit = current_t_ >= e.t_index ? current_t_ - e.t_index : 0;
    const auto delay = transit + (cfg_.debounce_m - 1);
    latency_.mean_samples = (latency_.mean_samples * static_cast<double>(latency_.switches) + static_cast<double>(delay)) /
                            static_cast<double>(latency_.switches + 1);
    ++latency_.switches;
    latency_.max_samples = std::max(latency_.max_samples, delay);
  }

  [[nodiscard]] std::uint64_t block_start_of(std::uint64_t t) const {
    auto it = block_starts_.upper_bound(t);
    if (it == block_starts_.begin()) return 0;
    return std::prev(it)->first;
  }

  SessionConfig cfg_;
  std::shared_ptr<LoopbackBus> bus_;
  LoopbackTransport recorder_tx_;
  LoopbackTransport server_rx_;
  LoopbackTransport recorder_control_;
  LoopbackTransport stress_tx_;
  LoopbackTransport actuator_rx_;
  SubjectModel subject_;
  SubjectSource source_;
  RecorderNode recorder_;
  ServerNode server_;
  ActuatorNode actuator_;
  JsonlLog* log_;
  std::mt19937_64 answer_rng_;
  std::mt19937_64 flip_rng_;

  BlockKind block_ = BlockKind::Rest;
  std::size_t block_index_ = 0;
  std::size_t phase_index_ = 0;
  std::uint64_t current_t_ = 0;
  int current_truth_ = 0;
  std::optional<FeatureVector> last_vector_;
  std::optional<int> last_prediction_;
  std::vector<LabeledVector>* rows_ = nullptr;
  std::function<void(const TickRecord&)> tick_hook_;
  std::vector<TickRecord> ticks_;
  std::map<std::uint64_t, std::size_t> block_starts_;
  bool last_vibration_ = false;
  LatencyStats latency_;
};

// ---- log replay ----------------------------------------------------------

struct LoggedPhase {
  std::size_t phase = 0;
  std::string name;
  std::string role;
  std::size_t task_groups = 0;
  std::size_t task_ones = 0;
  std::size_t answers = 0;
  std::size_t correct = 0;
  [[nodiscard]] double stressed_fraction() const {
    return task_groups ? static_cast<double>(task_ones) / static_cast<double>(task_groups) : 0.0;
  }
  [[nodiscard]] double answer_accuracy() const {
    return answers ? static_cast<double>(correct) / static_cast<double>(answers) : 0.0;
  }
};

/// Recomputes per-phase numbers from group and answer records alone.
inline std::vector<LoggedPhase> replay_phases(const std::vector<nlohmann::json>& records) {
  std::map<std::size_t, LoggedPhase> phases;
  try {
    for (const auto& r : records) {
      const auto type = r.at("type").get<std::string>();
      if (type == "phase_begin") {
        auto& p = phases[r.at("phase").get<std::size_t>()];
        p.phase = r.at("phase").get<std::size_t>();
        p.name = r.at("name").get<std::string>();
        p.role = r.at("role").get<std::string>();
      } else if (type == "group") {
        auto& p = phases[r.at("phase").get<std::size_t>()];
        if (2 * r.at("task_samples").get<std::size_t>() >= kGroupSize) {
          ++p.task_groups;
          p.task_ones += r.at("label").get<int>() == 1 ? 1 : 0;
        }
      } else if (type == "answer") {
        auto& p = phases[r.at("phase").get<std::size_t>()];
        ++p.answers;
        p.correct += r.at("correct").get<bool>() ? 1 : 0;
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidField, std::string("malformed session record: ") + e.what());
  }
  std::vector<LoggedPhase> out;
  for (auto& [_, p] : phases) out.push_back(std::move(p));
  return out;
}

/// Table rows for the test phases found in a session log.
inline std::vector<TableRow> replay_table(const std::vector<nlohmann::json>& records) {
  std::vector<double> stressed, accuracy;
  for (const auto& p : replay_phases(records)) {
    if (p.role != "test") continue;
    stressed.push_back(p.stressed_fraction());
    accuracy.push_back(p.answer_accuracy());
  }
  return result_table(stressed, accuracy);
}

inline std::string results_csv(const std::vector<TableRow>& rows, std::optional<bool> biofeedback = std::nullopt) {
  std::ostringstream out;
  out.precision(10);
  out << "phase,biofeedback,stress_reduction_pct,performance_enhancement_pp\n";
  for (const auto& r : rows) {
    out << r.label << ',' << (biofeedback ? (*biofeedback ? "on" : "off") : "") << ',';
    if (r.stress_reduction_pct) out << *r.stress_reduction_pct;
    out << ',' << r.accuracy_enhancement_pp << '\n';
  }
  return out.str();
}

inline std::string phases_csv(const std::vector<LoggedPhase>& phases) {
  std::ostringstream out;
  out.precision(10);
  out << "phase,name,role,task_groups,stressed_fraction,answers,answer_accuracy\n";
  for (const auto& p : phases) {
    out << p.phase << ',' << p.name << ',' << p.role << ',' << p.task_groups << ',' << p.stressed_fraction() << ','
        << p.answers << ',' << p.answer_accuracy() << '\n';
  }
  return out.str();
}

}  // namespace nirsfb
