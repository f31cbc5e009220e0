#include <cmath>
#include <limits>
#include <sstream>
#include <vector>

#include <gtest/gtest.h>

#include "evprobe/random.hpp"
#include "evprobe/synthetic.hpp"
#include "evprobe/training.hpp"

namespace evprobe {
namespace {

struct Data {
  Eigen::MatrixXd x;
  std::vector<int> y;
};

Data teacher(std::uint64_t seed, int n, int d, int c, double scale = 1.0) {
  auto t = synthetic::make_teacher_task(seed, n, 0, d, c, scale);
  return {t.x_train, t.y_train};
}

double objective(const ProbeParams& p, const Data& data, const PriorPrecisions& prec) {
  return nll(p, data.x, data.y) - log_prior(p, prec);
}

TEST(Adam, ZeroGradientGivesZeroDelta) {
  AdamState s(3);
  const auto d = adam_update(s, Eigen::VectorXd::Zero(3), 0.1);
  EXPECT_TRUE(d.isZero());
  EXPECT_EQ(s.step, 1);
}

TEST(Adam, ConstantGradientStepApproachesLr) {
  AdamState s(2);
  const Eigen::Vector2d g(3.0, -0.02);
  Eigen::VectorXd d;
  for (int t = 0; t < 5000; ++t) d = adam_update(s, g, 0.1);
  EXPECT_NEAR(d[0], -0.1, 1e-6);
  EXPECT_NEAR(d[1], 0.1, 1e-5);
}

TEST(Adam, MatchesReferenceUpdate) {
  // Reference: the published algorithm, one coordinate at a time.
  const double lr = 0.05, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  const int n = 4;
  std::vector<double> m(n, 0.0), v(n, 0.0), theta_ref(n, 0.5);
  Eigen::VectorXd theta = Eigen::VectorXd::Constant(n, 0.5);
  AdamState s(n);
  rng::SplitMix64 gen(17);
  for (int t = 1; t <= 10; ++t) {
    Eigen::VectorXd g(n);
    for (int i = 0; i < n; ++i) g[i] = 2.0 * gen.normal();
    for (int i = 0; i < n; ++i) {
      const auto k = static_cast<std::size_t>(i);
      m[k] = b1 * m[k] + (1 - b1) * g[i];
      v[k] = b2 * v[k] + (1 - b2) * g[i] * g[i];
      const double mhat = m[k] / (1 - std::pow(b1, t));
      const double vhat = v[k] / (1 - std::pow(b2, t));
      theta_ref[k] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
    theta += adam_update(s, g, lr, b1, b2, eps);
  }
  for (int i = 0; i < n; ++i) EXPECT_NEAR(theta[i], theta_ref[static_cast<std::size_t>(i)], 1e-12);
}

TEST(Adam, SizeMismatchThrows) {
  AdamState s(2);
  EXPECT_THROW(adam_update(s, Eigen::VectorXd::Zero(3), 0.1), Error);
}

TEST(TrainConfig, DefaultsMatchPublishedSetup) {
  const TrainConfig c;
  EXPECT_EQ(c.lr, 0.1);
  EXPECT_EQ(c.beta1, 0.9);
  EXPECT_EQ(c.beta2, 0.999);
  EXPECT_EQ(c.batch_size, 512);
  EXPECT_EQ(c.epochs, 500);
  EXPECT_GT(c.adam_eps, 0.0);
  EXPECT_LE(c.adam_eps, 1e-8);
}

TEST(TrainMap, SeparableDataReachesFullAccuracy) {
  Data d;
  d.x.resize(40, 2);
  rng::SplitMix64 gen(3);
  for (int i = 0; i < 40; ++i) {
    const int label = i % 2;
    d.x(i, 0) = (label ? 2.0 : -2.0) + 0.5 * gen.normal();
    d.x(i, 1) = gen.normal();
    d.y.push_back(label);
  }
  const auto r = train_map(ProbeArchitecture{0, 100, 2, 2}, d.x, d.y, PriorPrecisions::scalar(1.0), TrainConfig{});
  const auto probs = predict_proba(r.params, d.x);
  for (int i = 0; i < 40; ++i) {
    Eigen::Index arg;
    probs.row(i).maxCoeff(&arg);
    EXPECT_EQ(arg, d.y[static_cast<std::size_t>(i)]) << i;
  }
}

TEST(TrainMap, HugePrecisionShrinksToZero) {
  const auto d = teacher(4, 100, 5, 3);
  const auto r = train_map(ProbeArchitecture{0, 100, 5, 3}, d.x, d.y, PriorPrecisions::scalar(1e8), TrainConfig{});
  EXPECT_LT(r.params.theta.norm(), 1e-2);
}

TEST(TrainMap, ConvexCaseMatchesGradientDescentOracle) {
  const auto d = teacher(5, 200, 5, 3);
  const ProbeArchitecture arch{0, 100, 5, 3};
  const auto prec = PriorPrecisions::scalar(1.0);
  const auto trained = train_map(arch, d.x, d.y, prec, TrainConfig{});

  // Oracle: plain full-batch gradient descent with step 1/L, where L bounds
  // the Hessian of the negative log joint (softmax Hessian <= 1/2 I).
  Eigen::MatrixXd xa(d.x.rows(), d.x.cols() + 1);
  xa << d.x, Eigen::VectorXd::Ones(d.x.rows());
  const double lmax = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(xa.transpose() * xa).eigenvalues().maxCoeff();
  const double step = 1.0 / (0.5 * lmax + 1.0);
  ProbeParams gd(arch);
  for (int it = 0; it < 40000; ++it) {
    auto g = nll_and_gradient(gd, d.x, d.y);
    gd.theta -= step * (g.grad + gd.theta);
  }
  EXPECT_NEAR(objective(trained.params, d, prec), objective(gd, d, prec), 1e-3);
}

TEST(TrainMap, DuplicatedDataEqualsHalvedPrecision) {
  const auto d = teacher(6, 150, 4, 3);
  Data dup;
  dup.x.resize(300, 4);
  dup.x << d.x, d.x;
  dup.y = d.y;
  dup.y.insert(dup.y.end(), d.y.begin(), d.y.end());
  const ProbeArchitecture arch{0, 100, 4, 3};
  const auto a = train_map(arch, dup.x, dup.y, PriorPrecisions::scalar(2.0), TrainConfig{});
  const auto b = train_map(arch, d.x, d.y, PriorPrecisions::scalar(1.0), TrainConfig{});
  EXPECT_LT((a.params.theta - b.params.theta).cwiseAbs().maxCoeff(), 1e-3);
}

TEST(TrainMap, DeterministicTraces) {
  const auto d = teacher(7, 600, 6, 3);
  TrainConfig cfg;
  cfg.epochs = 20;
  cfg.shuffle_seed = 4;
  cfg.init_seed = 9;
  const ProbeArchitecture arch{1, 8, 6, 3};
  const auto a = train_map(arch, d.x, d.y, PriorPrecisions::scalar(1.0), cfg);
  const auto b = train_map(arch, d.x, d.y, PriorPrecisions::scalar(1.0), cfg);
  EXPECT_EQ(a.params.theta, b.params.theta);
  std::ostringstream ta, tb;
  write_trace_csv(ta, a.trace);
  write_trace_csv(tb, b.trace);
  EXPECT_EQ(ta.str(), tb.str());
  cfg.shuffle_seed = 5;
  EXPECT_NE(train_map(arch, d.x, d.y, PriorPrecisions::scalar(1.0), cfg).params.theta, a.params.theta);
}

TEST(TrainMap, ObjectiveTrendIsNonIncreasing) {
  const auto d = teacher(8, 1500, 10, 3, 0.5);
  const ProbeArchitecture arch{0, 100, 10, 3};
  TrainConfig cfg;
  cfg.epochs = 100;
  const auto r = train_map(arch, d.x, d.y, PriorPrecisions::scalar(1.0), cfg);
  std::vector<double> obj;
  for (const auto& e : r.trace.epochs) obj.push_back(e.train_nll - e.log_prior);
  auto avg = [&](std::size_t end) {
    double s = 0.0;
    for (std::size_t k = end - 5; k < end; ++k) s += obj[k];
    return s / 5.0;
  };
  int violations = 0;
  double worst = 0.0;
  std::size_t worst_epoch = 0;
  for (std::size_t e = 15; e <= obj.size(); ++e) {
    const double rise = avg(e) - avg(e - 1);
    if (rise > 1e-6) {
      ++violations;
      if (rise > worst) {
        worst = rise;
        worst_epoch = e;
      }
    }
  }
  EXPECT_EQ(violations, 0) << "largest moving-average rise " << worst << " nats at epoch " << worst_epoch;
}

TEST(TrainMap, TraceHasOneRecordPerEpoch) {
  const auto d = teacher(9, 50, 3, 2);
  TrainConfig cfg;
  cfg.epochs = 7;
  const auto r = train_map(ProbeArchitecture{0, 100, 3, 2}, d.x, d.y, PriorPrecisions::scalar(1.0), cfg);
  ASSERT_EQ(r.trace.epochs.size(), 7u);
  for (int e = 0; e < 7; ++e) EXPECT_EQ(r.trace.epochs[static_cast<std::size_t>(e)].epoch, e + 1);
  std::ostringstream csv;
  write_trace_csv(csv, r.trace);
  EXPECT_EQ(csv.str().substr(0, csv.str().find('\n')),
            "epoch,train_nll,log_prior,grad_norm,log_evidence,precision_min,precision_median,precision_max");
}

TEST(TrainMap, HookRunsAfterEveryEpochAndCanChangePrecisions) {
  const auto d = teacher(10, 60, 3, 2);
  TrainConfig cfg;
  cfg.epochs = 5;
  PriorPrecisions prec = PriorPrecisions::scalar(1.0);
  std::vector<int> seen;
  auto hook = [&](int epoch, const ProbeParams&, PriorPrecisions& p, EpochRecord& rec) {
    seen.push_back(epoch);
    p.values[0] = 1e8;
    rec.log_evidence = -1.0;
  };
  const auto r = train_map(ProbeArchitecture{0, 100, 3, 2}, d.x, d.y, prec, cfg, hook);
  EXPECT_EQ(seen, (std::vector<int>{1, 2, 3, 4, 5}));
  EXPECT_EQ(prec.values[0], 1e8);
  EXPECT_TRUE(r.trace.epochs.back().log_evidence.has_value());
}

TEST(TrainMap, NonFiniteLossNamesEpochAndBatch) {
  Eigen::MatrixXd x = Eigen::MatrixXd::Ones(4, 2);
  x(2, 1) = std::numeric_limits<double>::quiet_NaN();
  const std::vector<int> y{0, 1, 0, 1};
  try {
    train_map(ProbeArchitecture{0, 100, 2, 2}, x, y, PriorPrecisions::scalar(1.0), TrainConfig{});
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("epoch 1"), std::string::npos) << msg;
    EXPECT_NE(msg.find("batch 0"), std::string::npos) << msg;
  }
}

TEST(TrainMap, RejectsEmptyOrInvalidInput) {
  const ProbeArchitecture arch{0, 100, 2, 2};
  EXPECT_THROW(train_map(arch, Eigen::MatrixXd(0, 2), std::vector<int>{}, PriorPrecisions::scalar(1.0), TrainConfig{}),
               Error);
  TrainConfig bad;
  bad.batch_size = 0;
  EXPECT_THROW(train_map(arch, Eigen::MatrixXd::Zero(2, 2), std::vector<int>{0, 1}, PriorPrecisions::scalar(1.0), bad),
               Error);
}

}  // namespace
}  // namespace evprobe
