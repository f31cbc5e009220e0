#pragma once

// MAP training of probes with minibatch Adam on the negative log joint.

#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "evprobe/error.hpp"
#include "evprobe/probes.hpp"
#include "evprobe/random.hpp"

namespace evprobe {

struct TrainConfig {
  double lr = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int batch_size = 512;
  int epochs = 500;
  std::uint64_t shuffle_seed = 0;
  std::uint64_t init_seed = 0;
};

struct AdamState {
  Eigen::VectorXd m;
  Eigen::VectorXd v;
  long long step = 0;

  explicit AdamState(Eigen::Index n = 0) : m(Eigen::VectorXd::Zero(n)), v(Eigen::VectorXd::Zero(n)) {}
};

/// One bias-corrected Adam step. Returns the parameter delta (to be added).
inline Eigen::VectorXd adam_update(AdamState& state, const Eigen::VectorXd& grad, double lr,
                                   double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
  if (grad.size() != state.m.size()) throw Error("adam_update: gradient size mismatch");
  ++state.step;
  state.m = beta1 * state.m + (1.0 - beta1) * grad;
  state.v = beta2 * state.v + (1.0 - beta2) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  return -lr * ((state.m.array() / c1) / ((state.v.array() / c2).sqrt() + eps)).matrix();
}

struct EpochRecord {
  int epoch = 0;  // 1-based
  double train_nll = 0.0;
  double log_prior = 0.0;
  double grad_norm = 0.0;
  // Filled by the evidence framework when it runs after this epoch.
  std::optional<double> log_evidence;
  std::optional<double> precision_min;
  std::optional<double> precision_median;
  std::optional<double> precision_max;
};

struct TrainTrace {
  std::vector<EpochRecord> epochs;
};

inline void write_trace_csv(std::ostream& out, const TrainTrace& trace) {
  out << "epoch,train_nll,log_prior,grad_norm,log_evidence,precision_min,precision_median,precision_max\n";
  auto opt = [&](const std::optional<double>& v) {
    if (v) out << *v;
  };
  out.precision(17);
  for (const auto& r : trace.epochs) {
    out << r.epoch << ',' << r.train_nll << ',' << r.log_prior << ',' << r.grad_norm << ',';
    opt(r.log_evidence);
    out << ',';
    opt(r.precision_min);
    out << ',';
    opt(r.precision_median);
    out << ',';
    opt(r.precision_max);
    out << '\n';
  }
}

/// Called after every epoch with the current parameters; may update the
/// precisions in place and annotate the epoch record.
using HyperHook = std::function<void(int epoch, const ProbeParams&, PriorPrecisions&, EpochRecord&)>;

inline Eigen::MatrixXd gather_rows(const Eigen::MatrixXd& x, std::span<const Eigen::Index> idx) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(idx.size()), x.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = x.row(idx[i]);
  return out;
}

struct TrainResult {
  ProbeParams params;
  TrainTrace trace;
};

/// Minimizes (N/B)*batch_nll - log_prior per step, so each stochastic
/// gradient is an unbiased estimate of the full negative-log-joint gradient.
/// Batches are contiguous chunks of a per-epoch permutation. The last
/// iterate is returned.
inline TrainResult train_map(const ProbeArchitecture& arch, const Eigen::MatrixXd& x, std::span<const int> y,
                             PriorPrecisions& prec, const TrainConfig& cfg,
                             const HyperHook& hyper_hook = {}) {
  arch.validate();
  check_labels(y, x.rows(), arch.num_classes);
  if (x.rows() == 0) throw Error("train_map: no training data");
  if (cfg.batch_size <= 0 || cfg.epochs < 0) throw Error("train_map: invalid batch size or epoch count");

  TrainResult result{init_params(arch, cfg.init_seed), {}};
  auto& params = result.params;
  prec.validate(params.layout);
  Eigen::VectorXd lambda = prec.expand(params.layout);

  const Eigen::Index n = x.rows();
  const double n_total = static_cast<double>(n);
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  rng::SplitMix64 shuffler(rng::mix(cfg.shuffle_seed, 0x5fu));
  AdamState adam(params.theta.size());
  std::vector<int> yb;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    shuffler.shuffle(order.begin(), order.end());
    for (Eigen::Index start = 0, batch = 0; start < n; start += cfg.batch_size, ++batch) {
      const Eigen::Index len = std::min<Eigen::Index>(cfg.batch_size, n - start);
      std::span<const Eigen::Index> idx(order.data() + start, static_cast<std::size_t>(len));
      const Eigen::MatrixXd xb = gather_rows(x, idx);
      yb.resize(static_cast<std::size_t>(len));
      for (Eigen::Index i = 0; i < len; ++i) yb[static_cast<std::size_t>(i)] = y[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])];

      const double scale = n_total / static_cast<double>(len);
      auto [batch_nll, grad] = nll_and_gradient(params, xb, yb);
      grad *= scale;
      grad += lambda.cwiseProduct(params.theta);
      const double loss = scale * batch_nll - log_prior(params.theta, lambda);
      if (!std::isfinite(loss) || !grad.allFinite()) {
        throw NumericalError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                             std::to_string(batch));
      }
      params.theta += adam_update(adam, grad, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
    }

    auto full = nll_and_gradient(params, x, y);
    full.grad += lambda.cwiseProduct(params.theta);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_nll = full.value;
    rec.log_prior = log_prior(params.theta, lambda);
    rec.grad_norm = full.grad.norm();
    if (!std::isfinite(rec.train_nll)) {
      throw NumericalError("non-finite training nll after epoch " + std::to_string(epoch));
    }
    if (hyper_hook) {
      hyper_hook(epoch, params, prec, rec);
      lambda = prec.expand(params.layout);
    }
    result.trace.epochs.push_back(rec);
  }
  return result;
}

inline TrainResult train_map(const ProbeArchitecture& arch, const Eigen::MatrixXd& x, std::span<const int> y,
                             const PriorPrecisions& prec, const TrainConfig& cfg) {
  PriorPrecisions copy = prec;
  return train_map(arch, x, y, copy, cfg);
}

}  // namespace evprobe
