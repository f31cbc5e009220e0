#pragma once

// Evidence framework: MAP training interleaved with gradient ascent on the
// Laplace evidence w.r.t. log prior precisions, and evidence-based probe
// selection.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <future>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "evprobe/error.hpp"
#include "evprobe/laplace.hpp"
#include "evprobe/probes.hpp"
#include "evprobe/representations.hpp"
#include "evprobe/training.hpp"

namespace evprobe {

struct MarglikConfig {
  int frequency = 1;          // epochs between hyper-phases (F)
  int steps_per_phase = 100;  // hyper-steps per phase (K)
  double hyper_lr = 0.1;      // gamma
  int burn_in = 0;
  double precision_init = 1.0;
  double log_precision_min = -8.0;
  double log_precision_max = 12.0;
  CurvatureKind curvature = CurvatureKind::kron;
  PrecisionMode prior = PrecisionMode::per_group;

  void validate() const {
    if (frequency <= 0) throw Error("marglik frequency must be positive");
    if (steps_per_phase < 0) throw Error("marglik steps_per_phase must be non-negative");
    if (!(hyper_lr > 0.0)) throw Error("marglik hyper_lr must be positive");
    if (burn_in < 0) throw Error("marglik burn_in must be non-negative");
    if (!(precision_init > 0.0)) throw Error("precision_init must be positive");
    if (!(log_precision_min < log_precision_max)) throw Error("empty log-precision range");
    if (prior == PrecisionMode::per_parameter && curvature != CurvatureKind::diagonal) {
      throw Error("per-parameter precisions require diagonal curvature");
    }
  }
};

struct PrecisionSummary {
  double min = 0.0;
  double median = 0.0;
  double max = 0.0;
};

inline PrecisionSummary summarize(Eigen::VectorXd v) {
  if (v.size() == 0) return {};
  std::sort(v.data(), v.data() + v.size());
  const auto n = v.size();
  const double median = (n % 2 == 1) ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  return {v[0], median, v[n - 1]};
}

/// Per-group summary; in per-parameter mode each group's parameters are
/// summarized, otherwise min == median == max == the group precision.
inline std::vector<PrecisionSummary> summarize_by_group(const PriorPrecisions& prec, const ParameterLayout& layout) {
  const Eigen::VectorXd lambda = prec.expand(layout);
  std::vector<PrecisionSummary> out;
  for (const auto& g : layout.groups) {
    out.push_back(summarize(lambda.segment(static_cast<Eigen::Index>(g.offset), static_cast<Eigen::Index>(g.length))));
  }
  return out;
}

struct MarglikResult {
  PosteriorFit fit;
  TrainTrace trace;
};

/// Evidence of a MAP fit at fixed precisions.
inline PosteriorFit fit_fixed_precision(const ProbeArchitecture& arch, const Eigen::MatrixXd& x,
                                        std::span<const int> y, const PriorPrecisions& prec,
                                        const TrainConfig& cfg, CurvatureKind kind,
                                        std::uint64_t data_fingerprint = 0, TrainTrace* trace = nullptr) {
  if (x.rows() == 0) {
    ProbeParams zero(arch);
    return log_evidence(zero, compute_curvature(kind, zero, x), prec, x, y, data_fingerprint);
  }
  auto trained = train_map(arch, x, y, prec, cfg);
  if (trace != nullptr) *trace = trained.trace;
  return log_evidence(trained.params, compute_curvature(kind, trained.params, x), prec, x, y, data_fingerprint);
}

/// Runs train_map and, after every `frequency` epochs past burn-in,
/// recomputes the curvature at the current parameters and takes
/// `steps_per_phase` Adam ascent steps with step size `hyper_lr` on the log
/// precisions (clamped to [log_precision_min, log_precision_max]) with the
/// parameters and curvature held fixed. The hyper-optimizer state persists
/// across phases. The returned fit uses the final
/// parameters, final precisions and freshly computed curvature.
inline MarglikResult optimize_marglik(const ProbeArchitecture& arch, const Eigen::MatrixXd& x,
                                      std::span<const int> y, const TrainConfig& cfg,
                                      const MarglikConfig& mcfg, std::uint64_t data_fingerprint = 0) {
  mcfg.validate();
  arch.validate();
  const auto layout = ParameterLayout::for_architecture(arch);
  PriorPrecisions prec = PriorPrecisions::uniform(mcfg.prior, layout, mcfg.precision_init);
  MarglikResult result;
  if (x.rows() == 0) {
    result.fit = fit_fixed_precision(arch, x, y, prec, cfg, mcfg.curvature, data_fingerprint);
    return result;
  }

  std::optional<EigenFactor> first_input;
  if (mcfg.curvature == CurvatureKind::kron) first_input = input_factor(x);
  const EigenFactor* cached = first_input ? &*first_input : nullptr;

  Eigen::VectorXd log_prec = prec.values.array().log().matrix();
  AdamState hyper_adam(log_prec.size());
  auto hook = [&](int epoch, const ProbeParams& params, PriorPrecisions& p, EpochRecord& rec) {
    if (epoch <= mcfg.burn_in || (epoch - mcfg.burn_in) % mcfg.frequency != 0) return;
    const auto curv = compute_curvature(mcfg.curvature, params, x, cached);
    const OccamTerm occam(curv, params.layout);
    for (int k = 0; k < mcfg.steps_per_phase; ++k) {
      // Ascent: Adam minimizes, so feed it the negated gradient.
      const Eigen::VectorXd grad = -occam.grad_log_precision(params.theta, p);
      log_prec += adam_update(hyper_adam, grad, mcfg.hyper_lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
      log_prec = log_prec.cwiseMax(mcfg.log_precision_min).cwiseMin(mcfg.log_precision_max);
      p.values = log_prec.array().exp().matrix();
    }
    rec.log_evidence = evidence_parts(params, occam, p, rec.train_nll).log_evidence();
    const auto s = summarize(p.values);
    rec.precision_min = s.min;
    rec.precision_median = s.median;
    rec.precision_max = s.max;
  };

  auto trained = train_map(arch, x, y, prec, cfg, hook);
  result.trace = std::move(trained.trace);
  result.fit = log_evidence(trained.params, compute_curvature(mcfg.curvature, trained.params, x, cached), prec, x, y,
                            data_fingerprint);
  return result;
}

struct ArchitectureResult {
  ProbeArchitecture arch;
  std::optional<PosteriorFit> fit;
  std::string error;  // set when the job failed

  double log_evidence() const { return fit ? fit->log_evidence : -std::numeric_limits<double>::infinity(); }
};

struct SelectionResult {
  std::vector<ArchitectureResult> per_arch;
  std::size_t chosen = 0;  // index into per_arch
  double inductive_bias = 0.0;
  std::uint64_t data_fingerprint = 0;
  std::uint64_t rep_fingerprint = 0;

  const ArchitectureResult& chosen_result() const { return per_arch.at(chosen); }
  const ProbeArchitecture& chosen_arch() const { return chosen_result().arch; }
};

/// Argmax of log evidence; values within `tie_tol` prefer fewer layers,
/// then fewer parameters.
inline std::size_t select_best(const std::vector<ArchitectureResult>& results, double tie_tol = 1e-6) {
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < results.size(); ++i) {
    if (!results[i].fit) continue;
    if (!best) {
      best = i;
      continue;
    }
    const auto& a = results[i];
    const auto& b = results[*best];
    const double diff = a.log_evidence() - b.log_evidence();
    if (diff > tie_tol) {
      best = i;
    } else if (diff >= -tie_tol) {
      const auto key_a = std::pair{a.arch.depth, a.arch.parameter_count()};
      const auto key_b = std::pair{b.arch.depth, b.arch.parameter_count()};
      if (key_a < key_b) best = i;
    }
  }
  if (!best) throw Error("all probe architectures failed");
  return *best;
}

inline std::vector<ProbeArchitecture> default_architectures(int input_dim, int num_classes,
                                                            int hidden_width = kDefaultHiddenWidth) {
  std::vector<ProbeArchitecture> out;
  for (int depth = 0; depth <= 2; ++depth) out.push_back({depth, hidden_width, input_dim, num_classes});
  return out;
}

/// Evidence-maximizing probe for one representation. Architectures are
/// independent jobs; with `parallel` they run concurrently and are merged in
/// list order, so the result does not depend on scheduling.
inline SelectionResult select_probe(const DesignMatrix& rep, std::span<const int> y,
                                    const std::vector<ProbeArchitecture>& archs, const TrainConfig& cfg,
                                    const MarglikConfig& mcfg, std::uint64_t data_fingerprint = 0,
                                    bool parallel = false) {
  if (archs.empty()) throw Error("select_probe: empty architecture list");
  auto job = [&](const ProbeArchitecture& arch) {
    ArchitectureResult r{arch, std::nullopt, {}};
    try {
      r.fit = optimize_marglik(arch, rep.rows, y, cfg, mcfg, data_fingerprint).fit;
    } catch (const std::exception& e) {
      r.error = e.what();
    }
    return r;
  };
  SelectionResult sel;
  sel.data_fingerprint = data_fingerprint;
  sel.rep_fingerprint = rep.rep_fingerprint;
  if (parallel) {
    std::vector<std::future<ArchitectureResult>> futures;
    for (const auto& a : archs) futures.push_back(std::async(std::launch::async, job, a));
    for (auto& f : futures) sel.per_arch.push_back(f.get());
  } else {
    for (const auto& a : archs) sel.per_arch.push_back(job(a));
  }
  sel.chosen = select_best(sel.per_arch);
  sel.inductive_bias = sel.per_arch[sel.chosen].log_evidence();
  return sel;
}

/// Bayes factor exp(logZ_a - logZ_b) under equal model priors.
inline double likelihood_ratio(const PosteriorFit& a, const PosteriorFit& b) {
  if (a.data_fingerprint != b.data_fingerprint || a.n_data != b.n_data) {
    throw Error("likelihood_ratio: fits were computed on different datasets");
  }
  return std::exp(a.log_evidence - b.log_evidence);
}

}  // namespace evprobe
