#pragma once

// Per-subject stress classifier: z-score standardization, PCA conditioning
// and k-nearest-neighbour voting, plus the 10-sample group vote and
// confusion-matrix metrics used to score it.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "nirsfb/config.hpp"
#include "nirsfb/error.hpp"
#include "nirsfb/features.hpp"

namespace nirsfb {

inline constexpr int kModelSchemaVersion = 1;
inline constexpr std::size_t kGroupSize = 10;

/// Per-feature z-scoring. Features with (near) zero training variance are
/// dropped; `retained` lists the surviving feature indices in order.
struct StandardizationStats {
  std::vector<double> mean;
  std::vector<double> std;
  std::vector<std::size_t> retained;

  static constexpr double kMinStd = 1e-12;

  static StandardizationStats fit(const Eigen::MatrixXd& rows) {
    if (rows.rows() == 0) throw Error(ErrorCode::InsufficientData, "no rows to standardize");
    StandardizationStats s;
    const auto d = static_cast<std::size_t>(rows.cols());
    s.mean.resize(d);
    s.std.resize(d);
    for (std::size_t j = 0; j < d; ++j) {
      const auto col = rows.col(static_cast<Eigen::Index>(j));
      s.mean[j] = col.mean();
      s.std[j] = std::sqrt((col.array() - s.mean[j]).square().mean());
      if (s.std[j] > kMinStd) s.retained.push_back(j);
    }
    if (s.retained.empty()) throw Error(ErrorCode::DegenerateVariance, "every feature is constant");
    return s;
  }

  [[nodiscard]] Eigen::VectorXd transform(std::span<const double> x) const {
    Eigen::VectorXd out(static_cast<Eigen::Index>(retained.size()));
    for (std::size_t i = 0; i < retained.size(); ++i) {
      const auto j = retained[i];
      out(static_cast<Eigen::Index>(i)) = (x[j] - mean[j]) / std[j];
    }
    return out;
  }
};

struct PcaModel {
  Eigen::VectorXd mean;
  Eigen::MatrixXd components;  // k x d, orthonormal rows, by decreasing variance
  std::vector<double> explained_variance_ratio;  // all d ratios, non-increasing

  [[nodiscard]] std::size_t retained_dim() const noexcept { return static_cast<std::size_t>(components.rows()); }

  /// Keeps the smallest number of leading components whose cumulative
  /// explained variance reaches `retention`; retention >= 1 keeps every one.
  static PcaModel fit(const Eigen::MatrixXd& rows, double retention) {
    if (rows.rows() < 2) throw Error(ErrorCode::InsufficientData, "PCA needs at least two rows");
    if (!(retention > 0.0)) throw Error(ErrorCode::InvalidConfig, "variance retention must be positive");
    PcaModel p;
    p.mean = rows.colwise().mean().transpose();
    const Eigen::MatrixXd centered = rows.rowwise() - p.mean.transpose();
    const Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(rows.rows());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
    if (eig.info() != Eigen::Success) throw Error(ErrorCode::DegenerateVariance, "eigen decomposition failed");

    const auto d = cov.rows();
    // Eigen returns ascending eigenvalues
    std::vector<double> values(static_cast<std::size_t>(d));
    double total = 0.0;
    for (Eigen::Index i = 0; i < d; ++i) {
      values[static_cast<std::size_t>(i)] = std::max(0.0, eig.eigenvalues()(d - 1 - i));
      total += values[static_cast<std::size_t>(i)];
    }
    if (!(total > 0.0)) throw Error(ErrorCode::DegenerateVariance, "zero total variance");

    p.explained_variance_ratio.resize(values.size());
    std::size_t keep = static_cast<std::size_t>(d);
    double cumulative = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
      p.explained_variance_ratio[i] = values[i] / total;
      cumulative += p.explained_variance_ratio[i];
      if (retention < 1.0 && keep == static_cast<std::size_t>(d) && cumulative >= retention - 1e-12) keep = i + 1;
    }

    p.components.resize(static_cast<Eigen::Index>(keep), d);
    for (std::size_t i = 0; i < keep; ++i) {
      p.components.row(static_cast<Eigen::Index>(i)) = eig.eigenvectors().col(d - 1 - static_cast<Eigen::Index>(i)).transpose();
    }
    return p;
  }

  [[nodiscard]] Eigen::VectorXd project(const Eigen::VectorXd& x) const { return components * (x - mean); }

  [[nodiscard]] Eigen::VectorXd reconstruct(const Eigen::VectorXd& projected) const {
    return mean + components.transpose() * projected;
  }
};

class KnnModel {
 public:
  KnnModel() = default;
  KnnModel(Eigen::MatrixXd points, std::vector<int> labels, std::size_t k)
      : points_(std::move(points)), labels_(std::move(labels)), k_(k) {
    if (k_ % 2 == 0 || k_ == 0) throw Error(ErrorCode::InvalidConfig, "k must be odd");
    if (static_cast<std::size_t>(points_.rows()) != labels_.size()) {
      throw Error(ErrorCode::InvalidConfig, "one label per training point");
    }
    if (k_ > labels_.size()) throw Error(ErrorCode::InsufficientData, "k exceeds training size");
  }

  /// Indices of the k nearest training points, nearest first; equal
  /// distances resolve to the lower training index.
  [[nodiscard]] std::vector<std::size_t> neighbors(const Eigen::VectorXd& q, std::optional<std::size_t> exclude = {}) const {
    std::vector<std::pair<double, std::size_t>> dist;
    dist.reserve(labels_.size());
    for (Eigen::Index i = 0; i < points_.rows(); ++i) {
      const auto idx = static_cast<std::size_t>(i);
      if (exclude && *exclude == idx) continue;
      dist.emplace_back((points_.row(i).transpose() - q).squaredNorm(), idx);
    }
    const auto take = std::min(k_, dist.size());
    std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(take), dist.end());
    std::vector<std::size_t> out;
    out.reserve(take);
    for (std::size_t i = 0; i < take; ++i) out.push_back(dist[i].second);
    return out;
  }

  [[nodiscard]] int predict(const Eigen::VectorXd& q) const { return vote(neighbors(q)); }

  /// Fraction of training points classified correctly by their other points.
  [[nodiscard]] double leave_one_out_accuracy() const {
    if (labels_.size() <= k_) throw Error(ErrorCode::InsufficientData, "leave-one-out needs more than k points");
    std::size_t correct = 0;
    for (Eigen::Index i = 0; i < points_.rows(); ++i) {
      const auto idx = static_cast<std::size_t>(i);
      if (vote(neighbors(points_.row(i).transpose(), idx)) == labels_[idx]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(labels_.size());
  }

  [[nodiscard]] std::size_t k() const noexcept { return k_; }
  [[nodiscard]] const Eigen::MatrixXd& points() const noexcept { return points_; }
  [[nodiscard]] const std::vector<int>& labels() const noexcept { return labels_; }

 private:
  [[nodiscard]] int vote(const std::vector<std::size_t>& idx) const {
    std::size_t ones = 0;
    for (auto i : idx) ones += labels_[i] == 1;
    return 2 * ones > idx.size() ? 1 : 0;
  }

  Eigen::MatrixXd points_;
  std::vector<int> labels_;
  std::size_t k_ = 5;
};

struct FitConfig {
  std::size_t k = 5;
  double variance_retention = 0.95;

  static FitConfig from_config(const KeyValueConfig& cfg) {
    FitConfig f;
    f.k = static_cast<std::size_t>(cfg.get_int("classifier.k", static_cast<std::int64_t>(f.k)));
    f.variance_retention = cfg.get_double("classifier.variance_retention", f.variance_retention);
    return f;
  }
};

struct StressModel {
  FitConfig config;
  StandardizationStats standardizer;
  PcaModel pca;
  KnnModel knn;

  [[nodiscard]] Eigen::VectorXd embed(const FeatureVector& v) const {
    if (!v.fully_valid()) throw Error(ErrorCode::InvalidVector, "feature vector has invalid entries");
    return pca.project(standardizer.transform(v.values));
  }

  [[nodiscard]] int predict(const FeatureVector& v) const { return knn.predict(embed(v)); }
};

inline StressModel fit(std::span<const LabeledVector> rows, const FitConfig& cfg = {}) {
  if (cfg.k % 2 == 0 || cfg.k == 0) throw Error(ErrorCode::InvalidConfig, "k must be odd");
  std::vector<const LabeledVector*> usable;
  std::size_t ones = 0, zeros = 0;
  for (const auto& r : rows) {
    if (!r.label || !r.vector.fully_valid()) continue;
    if (*r.label != 0 && *r.label != 1) throw Error(ErrorCode::InvalidField, "labels are 0 or 1");
    usable.push_back(&r);
    (*r.label ? ones : zeros)++;
  }
  if (ones < cfg.k || zeros < cfg.k) {
    throw Error(ErrorCode::InsufficientData, "need at least k fully-valid samples of each class (have " +
                                                 std::to_string(zeros) + " rest, " + std::to_string(ones) + " stress)");
  }

  Eigen::MatrixXd raw(static_cast<Eigen::Index>(usable.size()), static_cast<Eigen::Index>(kFeatureCount));
  std::vector<int> labels;
  labels.reserve(usable.size());
  for (std::size_t i = 0; i < usable.size(); ++i) {
    for (std::size_t j = 0; j < kFeatureCount; ++j) {
      raw(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = usable[i]->vector.values[j];
    }
    labels.push_back(*usable[i]->label);
  }

  StressModel m;
  m.config = cfg;
  m.standardizer = StandardizationStats::fit(raw);
  Eigen::MatrixXd z(raw.rows(), static_cast<Eigen::Index>(m.standardizer.retained.size()));
  for (Eigen::Index i = 0; i < raw.rows(); ++i) {
    std::array<double, kFeatureCount> row{};
    for (std::size_t j = 0; j < kFeatureCount; ++j) row[j] = raw(i, static_cast<Eigen::Index>(j));
    z.row(i) = m.standardizer.transform(row).transpose();
  }
  m.pca = PcaModel::fit(z, cfg.variance_retention);
  Eigen::MatrixXd projected(z.rows(), m.pca.components.rows());
  for (Eigen::Index i = 0; i < z.rows(); ++i) projected.row(i) = m.pca.project(z.row(i).transpose()).transpose();
  m.knn = KnnModel(std::move(projected), std::move(labels), cfg.k);
  return m;
}

/// Group label for ten consecutive predictions; a 5/5 split counts as stress.
inline int group_majority(std::span<const int> predictions) {
  if (predictions.size() != kGroupSize) throw Error(ErrorCode::WrongGroupSize, "a group holds exactly 10 predictions");
  const auto ones = std::count(predictions.begin(), predictions.end(), 1);
  return 2 * static_cast<std::size_t>(ones) >= kGroupSize ? 1 : 0;
}

struct ConfusionMatrix {
  std::uint64_t tp = 0;
  std::uint64_t fp = 0;
  std::uint64_t tn = 0;
  std::uint64_t fn = 0;

  void add(int truth, int predicted) noexcept {
    if (truth == 1) {
      ++(predicted == 1 ? tp : fn);
    } else {
      ++(predicted == 1 ? fp : tn);
    }
  }

  [[nodiscard]] std::uint64_t total() const noexcept { return tp + fp + tn + fn; }

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;
};

/// Undefined ratios (zero denominators) are empty rather than errors.
struct Metrics {
  std::optional<double> accuracy;
  std::optional<double> precision;
  std::optional<double> recall;
};

inline Metrics metrics(const ConfusionMatrix& cm) {
  auto ratio = [](std::uint64_t num, std::uint64_t den) -> std::optional<double> {
    if (den == 0) return std::nullopt;
    return static_cast<double>(num) / static_cast<double>(den);
  };
  return {ratio(cm.tp + cm.tn, cm.total()), ratio(cm.tp, cm.tp + cm.fp), ratio(cm.tp, cm.tp + cm.fn)};
}

// ---- persistence ---------------------------------------------------------

namespace detail {
inline nlohmann::json to_json(const Eigen::MatrixXd& m) {
  auto out = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    auto row = nlohmann::json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    out.push_back(std::move(row));
  }
  return out;
}

inline Eigen::MatrixXd matrix_from_json(const nlohmann::json& j, Eigen::Index cols) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(j.size()), cols);
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (static_cast<Eigen::Index>(j[i].size()) != cols) throw Error(ErrorCode::InvalidField, "ragged matrix in model file");
    for (Eigen::Index c = 0; c < cols; ++c) m(static_cast<Eigen::Index>(i), c) = j[i][static_cast<std::size_t>(c)].get<double>();
  }
  return m;
}
}  // namespace detail

inline nlohmann::json to_json(const StressModel& m) {
  nlohmann::json j;
  j["schema"] = "nirsfb.stress_model";
  j["version"] = kModelSchemaVersion;
  j["k"] = m.config.k;
  j["variance_retention"] = m.config.variance_retention;
  j["feature_names"] = feature_names();
  j["standardizer"] = {{"mean", m.standardizer.mean}, {"std", m.standardizer.std}, {"retained", m.standardizer.retained}};
  std::vector<double> pca_mean(m.pca.mean.data(), m.pca.mean.data() + m.pca.mean.size());
  j["pca"] = {{"mean", pca_mean},
              {"components", detail::to_json(m.pca.components)},
              {"explained_variance_ratio", m.pca.explained_variance_ratio}};
  j["training"] = {{"points", detail::to_json(m.knn.points())}, {"labels", m.knn.labels()}};
  return j;
}

inline StressModel stress_model_from_json(const nlohmann::json& j) {
  try {
    if (j.at("schema").get<std::string>() != "nirsfb.stress_model") {
      throw Error(ErrorCode::InvalidField, "not a stress model document");
    }
    if (j.at("version").get<int>() != kModelSchemaVersion) {
      throw Error(ErrorCode::InvalidField, "unsupported model version");
    }
    StressModel m;
    m.config.k = j.at("k").get<std::size_t>();
    m.config.variance_retention = j.at("variance_retention").get<double>();
    const auto& s = j.at("standardizer");
    m.standardizer.mean = s.at("mean").get<std::vector<double>>();
    m.standardizer.std = s.at("std").get<std::vector<double>>();
    m.standardizer.retained = s.at("retained").get<std::vector<std::size_t>>();
    if (m.standardizer.mean.size() != kFeatureCount || m.standardizer.std.size() != kFeatureCount) {
      throw Error(ErrorCode::InvalidField, "standardizer must cover 20 features");
    }
    for (auto r : m.standardizer.retained) {
      if (r >= kFeatureCount) throw Error(ErrorCode::InvalidField, "retained feature index out of range");
    }
    const auto d = static_cast<Eigen::Index>(m.standardizer.retained.size());
    const auto& p = j.at("pca");
    const auto mean = p.at("mean").get<std::vector<double>>();
    if (static_cast<Eigen::Index>(mean.size()) != d) throw Error(ErrorCode::InvalidField, "PCA mean dimension mismatch");
    m.pca.mean = Eigen::Map<const Eigen::VectorXd>(mean.data(), d);
    m.pca.components = detail::matrix_from_json(p.at("components"), d);
    m.pca.explained_variance_ratio = p.at("explained_variance_ratio").get<std::vector<double>>();
    const auto& t = j.at("training");
    auto points = detail::matrix_from_json(t.at("points"), m.pca.components.rows());
    m.knn = KnnModel(std::move(points), t.at("labels").get<std::vector<int>>(), m.config.k);
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidField, std::string("malformed model file: ") + e.what());
  }
}

}  // namespace nirsfb
