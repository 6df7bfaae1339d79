#include <chrono>
#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <thread>

#include "CLI11.hpp"
#include "nirsfb/session.hpp"

namespace fs = std::filesystem;
using namespace nirsfb;

namespace {

volatile std::sig_atomic_t g_stop = 0;
void on_signal(int) { g_stop = 1; }

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
};

SessionConfig load_config(const Common& c) {
  auto kv = c.config.empty() ? KeyValueConfig{} : KeyValueConfig::load(c.config);
  auto cfg = SessionConfig::from_config(kv);
  if (c.seed) cfg.seed = *c.seed;
  return cfg;
}

fs::path out_dir(const Common& c) {
  fs::path p(c.out);
  fs::create_directories(p);
  return p;
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream f(p);
  if (!f) throw Error(ErrorCode::Io, "cannot write " + p.string());
  f << text;
}

// one session per log file
std::string fresh_log(const fs::path& dir) {
  const auto p = dir / "session.jsonl";
  fs::remove(p);
  return p.string();
}

StressModel load_model(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error(ErrorCode::Io, "cannot read " + path);
  try {
    return stress_model_from_json(nlohmann::json::parse(f));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidField, path + ": " + e.what());
  }
}

std::string fmt(const std::optional<double>& v) { return v ? std::to_string(*v) : "undefined"; }

void print_table(const std::vector<TableRow>& rows) {
  std::cout << "phase               stress_reduction_%  performance_pp\n";
  for (const auto& r : rows) {
    std::printf("%-19s %18s %15.2f\n", r.label.c_str(),
                r.stress_reduction_pct ? std::to_string(*r.stress_reduction_pct).c_str() : "undefined",
                r.accuracy_enhancement_pp);
  }
}

int cmd_calibrate(const Common& c) {
  const auto dir = out_dir(c);
  JsonlLog log(fresh_log(dir));
  Session s(load_config(c), &log);
  s.calibrate();
  const auto& b = *s.recorder().baseline();
  nlohmann::json j{{"i0", b.i0}, {"ambient", b.ambient}, {"t_index", s.recorder().clock().t_index}};
  write_file(dir / "calibration.json", j.dump(2) + "\n");
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_train(const Common& c) {
  const auto dir = out_dir(c);
  JsonlLog log(fresh_log(dir));
  Session s(load_config(c), &log);
  const auto tr = s.run_training_phase();
  std::ofstream feats(dir / "features.jsonl");
  for (const auto& row : tr.rows) feats << to_json(row).dump() << '\n';
  write_file(dir / "model.json", to_json(tr.model).dump() + "\n");
  std::cout << "rows " << tr.rows.size() << ", fitted on " << tr.model.knn.labels().size() << ", retained dim "
            << tr.model.pca.retained_dim() << ", leave-one-out " << tr.model.knn.leave_one_out_accuracy() << "\n";
  return 0;
}

int cmd_run(const Common& c, const std::string& feedback, const std::string& model_path) {
  auto cfg = load_config(c);
  cfg.biofeedback = feedback == "on";
  const auto dir = out_dir(c);
  JsonlLog log(fresh_log(dir), false);
  std::ofstream feats(dir / "features.jsonl");
  Session s(cfg, &log);
  s.set_tick_hook([&](const TickRecord& t) {
    if (t.vector) feats << to_json(LabeledVector{*t.vector, is_task(t.kind) ? 1 : 0}).dump() << '\n';
  });
  std::optional<StressModel> pretrained;
  if (!model_path.empty()) pretrained = load_model(model_path);
  const auto r = s.run(std::move(pretrained));
  log.flush();
  if (model_path.empty()) write_file(dir / "model.json", to_json(r.training.model).dump() + "\n");
  write_file(dir / "results.csv", results_csv(r.table(), cfg.biofeedback));
  write_file(dir / "phases.csv", phases_csv(replay_phases(read_jsonl((dir / "session.jsonl").string()))));
  for (const auto& p : r.tests) {
    std::printf("%s%s stressed %.3f accuracy %.3f (%zu answers)\n", p.name.c_str(), p.special ? " [special]" : "",
                p.stressed_fraction, p.answer_accuracy, p.answers);
  }
  print_table(r.table());
  std::cout << "latency max " << r.latency.max_samples << " samples, " << r.total_samples << " samples total\n";
  return 0;
}

int cmd_detect(const Common& c) {
  const auto dir = out_dir(c);
  JsonlLog log(fresh_log(dir), false);
  Session s(load_config(c), &log);
  const auto d = s.run_detection_eval();
  nlohmann::json j{{"tp", d.cm.tp},
                   {"fp", d.cm.fp},
                   {"tn", d.cm.tn},
                   {"fn", d.cm.fn},
                   {"scored_groups", d.scored_groups},
                   {"skipped_groups", d.skipped_groups},
                   {"training_loo_accuracy", d.training_loo_accuracy}};
  auto put = [&](const char* k, const std::optional<double>& v) { j[k] = v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  put("accuracy", d.metrics.accuracy);
  put("precision", d.metrics.precision);
  put("recall", d.metrics.recall);
  write_file(dir / "detection.json", j.dump(2) + "\n");
  std::cout << "tp " << d.cm.tp << " fn " << d.cm.fn << " fp " << d.cm.fp << " tn " << d.cm.tn << "\n"
            << "accuracy " << fmt(d.metrics.accuracy) << " precision " << fmt(d.metrics.precision) << " recall "
            << fmt(d.metrics.recall) << "\n";
  return 0;
}

int cmd_report(const Common& c, const std::string& in) {
  const fs::path src = in.empty() ? fs::path(c.out) : fs::path(in);
  const auto records = read_jsonl((src / "session.jsonl").string());
  std::optional<bool> feedback;
  for (const auto& r : records) {
    if (r.value("type", "") == "session") feedback = r.at("biofeedback").get<bool>();
  }
  const auto rows = replay_table(records);
  const auto dir = out_dir(c);
  write_file(dir / "results.csv", results_csv(rows, feedback));
  write_file(dir / "phases.csv", phases_csv(replay_phases(records)));
  print_table(rows);
  return 0;
}

struct Ports {
  std::string host = "127.0.0.1";
  std::uint16_t data = 9001;
  std::uint16_t control = 9000;
  std::uint16_t stress = 9002;
  double duration_s = 60.0;
};

class SimSource final : public FrameSource {
 public:
  SimSource(const SubjectParams& p, double fs, double rest_s, double task_s)
      : model_(p, fs), rest_(static_cast<std::uint64_t>(rest_s * fs)), task_(static_cast<std::uint64_t>(task_s * fs)) {}
  std::array<OpticalFrame, kChannelCount> lit(const SampleClock& clock) override {
    const auto k = clock.t_index % (rest_ + task_) < rest_ ? BlockKind::Rest : BlockKind::Calculation;
    return model_.step(clock, k, false);
  }
  std::array<OpticalFrame, kChannelCount> dark(const SampleClock& clock) override { return model_.dark_frames(clock); }

 private:
  SubjectModel model_;
  std::uint64_t rest_, task_;
};

int serve_recorder(const SessionConfig& cfg, const Ports& p) {
  auto params = cfg.subject;
  params.rng_seed = cfg.seed;
  SimSource source(params, cfg.fs, cfg.protocol.rest_s, 20.0);
  UdpTransport link(p.control, p.host, p.data);
  RecorderNode rec(source, link, cfg.fs, cfg.dark_s);
  const auto period = std::chrono::duration<double>(1.0 / cfg.fs);
  auto next = std::chrono::steady_clock::now();
  const auto end = next + std::chrono::duration<double>(p.duration_s);
  while (!g_stop && std::chrono::steady_clock::now() < end && rec.state() != RecorderState::Stopped) {
    try {
      rec.poll_control(link);
    } catch (const Error& e) {
      std::cerr << "recorder: " << e.what() << "\n";
    }
    rec.tick();
    next += std::chrono::duration_cast<std::chrono::steady_clock::duration>(period);
    std::this_thread::sleep_until(next);
  }
  std::cout << "recorder: " << rec.clock().t_index << " samples, " << rec.decode_errors() << " bad datagrams\n";
  return 0;
}

int serve_server(const SessionConfig& cfg, const Ports& p, const std::string& model_path, const fs::path& dir) {
  UdpTransport link(p.data, p.host, p.control);
  UdpTransport stress(0, p.host, p.stress);
  ServerConfig sc;
  sc.fs = cfg.fs;
  sc.optics = cfg.subject.optics;
  sc.features = cfg.features;
  sc.send_stress = cfg.biofeedback;
  ServerNode server(sc, link, &stress, &link);
  JsonlLog log(fresh_log(dir), false);
  server.set_log(&log);
  if (!model_path.empty()) server.set_model(std::make_shared<const StressModel>(load_model(model_path)));
  const wire::InitPacket init{static_cast<std::uint8_t>(kChannelCount), cfg.calib_duration_s};
  const auto end = std::chrono::steady_clock::now() + std::chrono::duration<double>(p.duration_s);
  auto next_init = std::chrono::steady_clock::now();
  bool running = false;
  while (!g_stop && std::chrono::steady_clock::now() < end) {
    // the recorder may come up later; keep asking until it reports
    if (!server.calibrated() && std::chrono::steady_clock::now() >= next_init) {
      server.send_command(init);
      next_init += std::chrono::seconds(1);
    }
    server.poll();
    if (!running && server.calibrated()) {
      server.send_command(wire::CommandPacket{wire::CommandKind::Run});
      running = true;
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(5));
  }
  server.send_command(wire::CommandPacket{wire::CommandKind::Stop});
  const auto& st = server.stats();
  std::cout << "server: " << st.vectors << " vectors, " << st.stress_packets << " stress packets, " << st.decode_errors
            << " decode errors\n";
  return 0;
}

int serve_actuator(const SessionConfig& cfg, const Ports& p, const fs::path& dir) {
  UdpTransport in(p.stress, p.host, 0);
  ActuatorNode act(in, cfg.debounce_m);
  std::ofstream trace(dir / "actuator.jsonl");
  act.set_on_apply([&](const ActuatorNode::TraceEntry& e) {
    trace << nlohmann::json{{"t", e.t_index}, {"level", e.level}, {"vib", e.vibration_on}}.dump() << '\n';
  });
  const auto end = std::chrono::steady_clock::now() + std::chrono::duration<double>(p.duration_s);
  while (!g_stop && std::chrono::steady_clock::now() < end) {
    if (auto d = in.receive(std::chrono::milliseconds(20))) {
      try {
        const auto pkt = wire::decode(*d);
        if (const auto* s = std::get_if<wire::StressPacket>(&pkt)) act.apply(*s);
      } catch (const Error& e) {
        std::cerr << "actuator: " << e.what() << "\n";
      }
    }
  }
  std::cout << "actuator: " << act.trace().size() << " packets applied\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Closed-loop fNIRS stress biofeedback simulator"};
  app.require_subcommand(1);
  Common common;
  app.add_option("--config", common.config, "key = value configuration file")->check(CLI::ExistingFile);
  app.add_option("--seed", common.seed, "session seed");
  app.add_option("--out", common.out, "output directory");

  auto* calibrate = app.add_subcommand("calibrate", "dark and lit calibration window only");
  auto* train = app.add_subcommand("train", "calibration and training phase; writes model.json");
  auto* run = app.add_subcommand("run", "training plus test phases");
  std::string feedback = "on", model_path;
  run->add_option("--feedback", feedback, "vibration feedback")->check(CLI::IsMember({"on", "off"}));
  run->add_option("--model", model_path, "skip training and use this model")->check(CLI::ExistingFile);
  auto* detect = app.add_subcommand("detect-eval", "offline detection accuracy over repeated training phases");
  auto* report = app.add_subcommand("report", "rebuild results.csv from session.jsonl");
  std::string report_in;
  report->add_option("--in", report_in, "directory holding session.jsonl (default: --out)");
  auto* serve = app.add_subcommand("serve", "run one node over UDP");
  std::string role;
  Ports ports;
  std::string serve_model;
  serve->add_option("--role", role)->required()->check(CLI::IsMember({"recorder", "server", "actuator"}));
  serve->add_option("--host", ports.host, "peer host");
  serve->add_option("--data-port", ports.data);
  serve->add_option("--control-port", ports.control);
  serve->add_option("--stress-port", ports.stress);
  serve->add_option("--duration", ports.duration_s, "seconds to run");
  serve->add_option("--model", serve_model, "model.json for the server role")->check(CLI::ExistingFile);

  for (auto* sub : {calibrate, train, run, detect, report, serve}) {
    sub->add_option("--config", common.config)->check(CLI::ExistingFile);
    sub->add_option("--seed", common.seed);
    sub->add_option("--out", common.out);
  }

  CLI11_PARSE(app, argc, argv);
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  try {
    if (*calibrate) return cmd_calibrate(common);
    if (*train) return cmd_train(common);
    if (*run) return cmd_run(common, feedback, model_path);
    if (*detect) return cmd_detect(common);
    if (*report) return cmd_report(common, report_in);
    if (*serve) {
      const auto cfg = load_config(common);
      // addresses come from net.* keys unless given on the command line
      const auto kv = common.config.empty() ? KeyValueConfig{} : KeyValueConfig::load(common.config);
      auto port = [&](const char* flag, const char* key, std::uint16_t& v) {
        if (serve->count(flag) == 0) v = static_cast<std::uint16_t>(kv.get_int(key, v));
      };
      if (serve->count("--host") == 0) ports.host = kv.get_string("net.host", ports.host);
      port("--data-port", "net.data_port", ports.data);
      port("--control-port", "net.control_port", ports.control);
      port("--stress-port", "net.stress_port", ports.stress);
      if (role == "recorder") return serve_recorder(cfg, ports);
      const auto dir = out_dir(common);
      if (role == "server") return serve_server(cfg, ports, serve_model, dir);
      return serve_actuator(cfg, ports, dir);
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
