#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "nirsfb/classifier.hpp"

using namespace nirsfb;

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

// exhaustive k-nearest vote with (distance, index) ordering
int brute_knn(const Eigen::MatrixXd& pts, const std::vector<int>& labels, const Eigen::VectorXd& q, std::size_t k,
              std::optional<std::size_t> exclude = {}) {
  std::vector<std::pair<double, std::size_t>> all;
  for (Eigen::Index i = 0; i < pts.rows(); ++i) {
    if (exclude && static_cast<std::size_t>(i) == *exclude) continue;
    double d = 0.0;
    for (Eigen::Index j = 0; j < pts.cols(); ++j) d += (pts(i, j) - q(j)) * (pts(i, j) - q(j));
    all.emplace_back(d, static_cast<std::size_t>(i));
  }
  std::sort(all.begin(), all.end());
  std::size_t ones = 0;
  for (std::size_t i = 0; i < k; ++i) ones += labels[all[i].second];
  return 2 * ones > k ? 1 : 0;
}

std::vector<LabeledVector> blobs(std::size_t per_class, double separation, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_real_distribution<double> scale(0.01, 100.0);
  std::array<double, kFeatureCount> units{};
  for (auto& u : units) u = scale(rng);
  std::vector<LabeledVector> rows;
  for (int label = 0; label < 2; ++label) {
    for (std::size_t i = 0; i < per_class; ++i) {
      LabeledVector r;
      r.label = label;
      r.vector.t_index = rows.size();
      for (std::size_t j = 0; j < kFeatureCount; ++j) {
        r.vector.values[j] = units[j] * (g(rng) + (label && j < 6 ? separation : 0.0));
        r.vector.valid[j] = true;
      }
      rows.push_back(r);
    }
  }
  return rows;
}

}  // namespace

TEST(Standardization, MomentsAndConstantColumnsDropped) {
  Eigen::MatrixXd m(4, 3);
  m << 1, 5, 2,  //
      3, 5, 4,   //
      5, 5, 6,   //
      7, 5, 8;
  const auto s = StandardizationStats::fit(m);
  EXPECT_DOUBLE_EQ(s.mean[0], 4.0);
  EXPECT_DOUBLE_EQ(s.std[0], std::sqrt(5.0));
  EXPECT_EQ(s.retained, (std::vector<std::size_t>{0, 2}));
  const std::array<double, 3> x{4.0, 99.0, 5.0 + std::sqrt(5.0)};
  const auto z = s.transform(x);
  ASSERT_EQ(z.size(), 2);
  EXPECT_NEAR(z(0), 0.0, 1e-15);
  EXPECT_NEAR(z(1), 1.0, 1e-15);
}

TEST(Standardization, AllConstantIsDegenerate) {
  Eigen::MatrixXd m = Eigen::MatrixXd::Constant(5, 3, 2.0);
  EXPECT_EQ(code_of([&] { StandardizationStats::fit(m); }), ErrorCode::DegenerateVariance);
}

TEST(Pca, ExactLowRankSubspace) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> g(0.0, 1.0);
  Eigen::MatrixXd basis(2, 20);
  for (Eigen::Index i = 0; i < basis.size(); ++i) basis.data()[i] = g(rng);
  Eigen::MatrixXd rows(200, 20);
  for (Eigen::Index i = 0; i < rows.rows(); ++i) rows.row(i) = g(rng) * basis.row(0) + g(rng) * basis.row(1);
  const auto p = PcaModel::fit(rows, 0.95);
  EXPECT_LE(p.retained_dim(), 2u);
  const auto full = PcaModel::fit(rows, 0.999999);
  EXPECT_EQ(full.retained_dim(), 2u);
  for (Eigen::Index i = 0; i < rows.rows(); ++i) {
    const Eigen::VectorXd x = rows.row(i).transpose();
    EXPECT_LE((full.reconstruct(full.project(x)) - x).norm(), 1e-9);
  }
}

TEST(Pca, OrthonormalComponentsAndOrderedRatios) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g(0.0, 1.0);
  Eigen::MatrixXd rows(300, 20);
  for (Eigen::Index i = 0; i < rows.rows(); ++i) {
    for (Eigen::Index j = 0; j < 20; ++j) rows(i, j) = g(rng) * (1.0 + static_cast<double>(j));
  }
  const auto p = PcaModel::fit(rows, 1.0);
  ASSERT_EQ(p.retained_dim(), 20u);
  const Eigen::MatrixXd gram = p.components * p.components.transpose();
  EXPECT_LE((gram - Eigen::MatrixXd::Identity(20, 20)).cwiseAbs().maxCoeff(), 1e-8);
  double sum = 0.0;
  for (std::size_t i = 0; i < p.explained_variance_ratio.size(); ++i) {
    sum += p.explained_variance_ratio[i];
    if (i) EXPECT_LE(p.explained_variance_ratio[i], p.explained_variance_ratio[i - 1]);
  }
  EXPECT_LE(sum, 1.0 + 1e-12);
}

TEST(Pca, FullRankPreservesDistances) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> g(0.0, 1.0);
  Eigen::MatrixXd rows(100, 20);
  for (Eigen::Index i = 0; i < rows.size(); ++i) rows.data()[i] = g(rng);
  const auto p = PcaModel::fit(rows, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    const Eigen::VectorXd a = rows.row(trial % 100).transpose();
    const Eigen::VectorXd b = rows.row((trial * 7 + 3) % 100).transpose();
    EXPECT_NEAR((p.project(a) - p.project(b)).norm(), (a - b).norm(), 1e-9);
  }
}

TEST(Pca, Errors) {
  EXPECT_EQ(code_of([] { PcaModel::fit(Eigen::MatrixXd::Ones(1, 3), 0.95); }), ErrorCode::InsufficientData);
  EXPECT_EQ(code_of([] { PcaModel::fit(Eigen::MatrixXd::Random(5, 3), 0.0); }), ErrorCode::InvalidConfig);
}

TEST(Knn, QueryOnTrainingPointWithKOne) {
  Eigen::MatrixXd pts(3, 2);
  pts << 0, 0, 1, 1, 5, 5;
  const KnnModel m(pts, {0, 1, 0}, 1);
  EXPECT_EQ(m.predict(Eigen::Vector2d(1, 1)), 1);
  EXPECT_EQ(m.predict(Eigen::Vector2d(5, 5)), 0);
}

TEST(Knn, PlantedFivePointConfiguration) {
  // query at origin; two stressed points close, three calm points further out
  Eigen::MatrixXd pts(5, 2);
  pts << 0.5, 0, 0, 0.6, 2, 0, 0, 2.1, -2.2, 0;
  const std::vector<int> labels{1, 1, 0, 0, 0};
  const Eigen::Vector2d q(0, 0);
  for (std::size_t k : {1u, 3u, 5u}) {
    const KnnModel m(pts, labels, k);
    EXPECT_EQ(m.predict(q), brute_knn(pts, labels, q, k)) << k;
  }
  EXPECT_EQ(KnnModel(pts, labels, 3).predict(q), 1);
  EXPECT_EQ(KnnModel(pts, labels, 5).predict(q), 0);
}

TEST(Knn, DistanceTiesGoToLowerIndex) {
  Eigen::MatrixXd pts(4, 1);
  pts << -1, 1, -1, 1;
  const KnnModel m(pts, {0, 1, 1, 0}, 1);
  EXPECT_EQ(m.neighbors(Eigen::VectorXd::Zero(1)), std::vector<std::size_t>{0});
  const KnnModel m3(pts, {0, 1, 1, 0}, 3);
  EXPECT_EQ(m3.neighbors(Eigen::VectorXd::Zero(1)), (std::vector<std::size_t>{0, 1, 2}));
}

TEST(Knn, MatchesBruteForceOnThousandQueries) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> g(0.0, 1.0);
  Eigen::MatrixXd pts(400, 6);
  std::vector<int> labels;
  for (Eigen::Index i = 0; i < pts.rows(); ++i) {
    for (Eigen::Index j = 0; j < 6; ++j) pts(i, j) = g(rng);
    labels.push_back(pts(i, 0) + 0.5 * g(rng) > 0 ? 1 : 0);
  }
  const KnnModel m(pts, labels, 5);
  for (int q = 0; q < 1000; ++q) {
    Eigen::VectorXd x(6);
    for (Eigen::Index j = 0; j < 6; ++j) x(j) = g(rng);
    ASSERT_EQ(m.predict(x), brute_knn(pts, labels, x, 5));
  }
}

TEST(Knn, Validation) {
  const Eigen::MatrixXd pts = Eigen::MatrixXd::Random(4, 2);
  EXPECT_EQ(code_of([&] { KnnModel(pts, {0, 1, 0, 1}, 2); }), ErrorCode::InvalidConfig);
  EXPECT_EQ(code_of([&] { KnnModel(pts, {0, 1, 0}, 1); }), ErrorCode::InvalidConfig);
  EXPECT_EQ(code_of([&] { KnnModel(pts, {0, 1, 0, 1}, 5); }), ErrorCode::InsufficientData);
}

TEST(Fit, SeparatedBlobsLeaveOneOutPerfect) {
  const auto rows = blobs(20, 8.0, 6);
  const auto m = fit(rows);
  EXPECT_DOUBLE_EQ(m.knn.leave_one_out_accuracy(), 1.0);
  // the oracle agrees on every held-out point
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(brute_knn(m.knn.points(), m.knn.labels(), m.knn.points().row(static_cast<Eigen::Index>(i)).transpose(), 5, i),
              *rows[i].label);
  }
}

TEST(Fit, FullRankPcaPreservesDecisions) {
  const auto rows = blobs(60, 1.0, 7);
  const auto full = fit(rows, {5, 1.0});
  // raw standardized space, no PCA
  const auto& st = full.standardizer;
  Eigen::MatrixXd z(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(st.retained.size()));
  std::vector<int> labels;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    z.row(static_cast<Eigen::Index>(i)) = st.transform(rows[i].vector.values).transpose();
    labels.push_back(*rows[i].label);
  }
  std::mt19937_64 rng(8);
  std::normal_distribution<double> g(0.0, 1.0);
  for (int q = 0; q < 500; ++q) {
    FeatureVector v = rows[static_cast<std::size_t>(q) % rows.size()].vector;
    for (auto& x : v.values) x *= 1.0 + 0.3 * g(rng);
    EXPECT_EQ(full.predict(v), brute_knn(z, labels, st.transform(v.values), 5));
  }
}

TEST(Fit, InvariantUnderConsistentRescaling) {
  auto rows = blobs(40, 1.5, 9);
  const auto a = fit(rows);
  auto scaled = rows;
  for (auto& r : scaled) {
    for (std::size_t j = 0; j < kFeatureCount; ++j) r.vector.values[j] = r.vector.values[j] * (j + 1.0) * 3.0 - 7.0;
  }
  const auto b = fit(scaled);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    auto na = a.knn.neighbors(a.embed(rows[i].vector));
    auto nb = b.knn.neighbors(b.embed(scaled[i].vector));
    std::sort(na.begin(), na.end());
    std::sort(nb.begin(), nb.end());
    EXPECT_EQ(na, nb) << i;
  }
}

TEST(Fit, PlantedSeparableDataLeaveOneOut) {
  const auto rows = blobs(150, 3.0, 10);
  EXPECT_GE(fit(rows).knn.leave_one_out_accuracy(), 0.95);
}

TEST(Fit, Errors) {
  auto rows = blobs(20, 5.0, 11);
  std::vector<LabeledVector> one_class(rows.begin(), rows.begin() + 20);
  EXPECT_EQ(code_of([&] { fit(one_class); }), ErrorCode::InsufficientData);
  EXPECT_EQ(code_of([&] { fit(rows, {4, 0.95}); }), ErrorCode::InvalidConfig);
  auto constant = rows;
  for (auto& r : constant) r.vector.values.fill(1.0);
  EXPECT_EQ(code_of([&] { fit(constant); }), ErrorCode::DegenerateVariance);
  // invalid vectors and unlabeled rows are skipped, not fatal
  auto mixed = rows;
  mixed[0].vector.valid[3] = false;
  mixed[1].label.reset();
  EXPECT_EQ(fit(mixed).knn.labels().size(), rows.size() - 2);
}

TEST(Predict, InvalidVectorRejected) {
  const auto m = fit(blobs(20, 5.0, 12));
  FeatureVector v{};
  v.valid.fill(true);
  v.valid[19] = false;
  EXPECT_EQ(code_of([&] { (void)m.predict(v); }), ErrorCode::InvalidVector);
}

TEST(GroupMajority, Rules) {
  const std::vector<int> ones(10, 1), split{1, 1, 1, 1, 1, 0, 0, 0, 0, 0}, four{1, 1, 1, 1, 0, 0, 0, 0, 0, 0};
  EXPECT_EQ(group_majority(ones), 1);
  EXPECT_EQ(group_majority(split), 1);
  EXPECT_EQ(group_majority(four), 0);
  EXPECT_EQ(code_of([] { group_majority(std::vector<int>(9, 0)); }), ErrorCode::WrongGroupSize);
}

TEST(GroupMajority, MonotoneUnderFlipsToStress) {
  for (unsigned mask = 0; mask < 1024; ++mask) {
    std::vector<int> g(10);
    for (int i = 0; i < 10; ++i) g[static_cast<std::size_t>(i)] = (mask >> i) & 1;
    const int before = group_majority(g);
    for (std::size_t i = 0; i < 10; ++i) {
      if (g[i]) continue;
      auto h = g;
      h[i] = 1;
      ASSERT_GE(group_majority(h), before);
    }
  }
}

TEST(Metrics, ReferenceMatrix) {
  const ConfusionMatrix cm{46, 13, 37, 4};
  const auto m = metrics(cm);
  EXPECT_EQ(std::round(*m.accuracy * 100.0) / 100.0, 0.83);
  EXPECT_EQ(std::round(*m.recall * 100.0) / 100.0, 0.92);
  EXPECT_NEAR(*m.precision, 46.0 / 59.0, 1e-15);
}

TEST(Metrics, PerfectAndUndefined) {
  const auto perfect = metrics({10, 0, 10, 0});
  EXPECT_EQ(*perfect.accuracy, 1.0);
  EXPECT_EQ(*perfect.precision, 1.0);
  EXPECT_EQ(*perfect.recall, 1.0);
  // no stressed truth: recall undefined, precision is 0 of 3
  const auto none = metrics({0, 3, 7, 0});
  EXPECT_FALSE(none.recall);
  EXPECT_EQ(*none.precision, 0.0);
  EXPECT_DOUBLE_EQ(*none.accuracy, 0.7);
  // never predicted stressed: precision undefined
  const auto silent = metrics({0, 0, 7, 3});
  EXPECT_FALSE(silent.precision);
  EXPECT_EQ(*silent.recall, 0.0);
  EXPECT_FALSE(metrics({}).accuracy);
}

TEST(Metrics, PlantedErrorProcessReproducesRates) {
  const double miss = 0.08, false_alarm = 0.26;
  std::mt19937_64 rng(13);
  std::bernoulli_distribution truth_d(0.5), miss_d(miss), fa_d(false_alarm);
  std::uniform_int_distribution<int> margin(0, 4);
  ConfusionMatrix cm;
  for (int i = 0; i < 20000; ++i) {
    const int truth = truth_d(rng);
    const bool wrong = truth ? miss_d(rng) : fa_d(rng);
    const int target = wrong ? 1 - truth : truth;
    // ten per-sample predictions whose majority is the planted group label
    const int agree = target == 1 ? 5 + margin(rng) : 6 + std::min(margin(rng), 4);
    std::vector<int> preds;
    for (int k = 0; k < 10; ++k) preds.push_back(k < agree ? target : 1 - target);
    std::shuffle(preds.begin(), preds.end(), rng);
    cm.add(truth, group_majority(preds));
  }
  const auto m = metrics(cm);
  EXPECT_NEAR(*m.recall, 1.0 - miss, 0.01);
  EXPECT_NEAR(static_cast<double>(cm.fp) / static_cast<double>(cm.fp + cm.tn), false_alarm, 0.01);
}

TEST(Persistence, ModelRoundTripPredictsIdentically) {
  const auto rows = blobs(30, 1.2, 14);
  const auto m = fit(rows, {3, 0.9});
  const auto back = stress_model_from_json(nlohmann::json::parse(to_json(m).dump()));
  EXPECT_EQ(back.knn.k(), 3u);
  EXPECT_EQ(back.pca.retained_dim(), m.pca.retained_dim());
  EXPECT_EQ(back.standardizer.retained, m.standardizer.retained);
  for (const auto& r : rows) EXPECT_EQ(back.predict(r.vector), m.predict(r.vector));
}

TEST(Persistence, RejectsForeignDocuments) {
  EXPECT_EQ(code_of([] { stress_model_from_json(nlohmann::json::parse(R"({"kind":"other"})")); }), ErrorCode::InvalidField);
  auto j = to_json(fit(blobs(20, 5.0, 15)));
  j["version"] = 99;
  EXPECT_EQ(code_of([&] { stress_model_from_json(j); }), ErrorCode::InvalidField);
}
