#pragma once

// Laplace approximation to the log marginal likelihood of a probe.
//
// Curvature is the generalized Gauss-Newton matrix sum_n J_n^T L_n J_n with
// L_n = diag(p_n) - p_n p_n^T, either as its exact diagonal or as one
// Kronecker product G (x) A per layer. L_n is factored exactly as B_n B_n^T
// with columns b_c = sqrt(p_c) (e_c - p), so both are deterministic.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "evprobe/error.hpp"
#include "evprobe/probes.hpp"

namespace evprobe {

inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;

enum class CurvatureKind { diagonal, kron };

inline const char* to_string(CurvatureKind k) { return k == CurvatureKind::diagonal ? "diagonal" : "kron"; }

/// Eigendecomposition of a symmetric PSD factor; negative round-off
/// eigenvalues are clamped to zero.
struct EigenFactor {
  Eigen::VectorXd values;
  Eigen::MatrixXd vectors;

  Eigen::MatrixXd reconstruct() const { return vectors * values.asDiagonal() * vectors.transpose(); }
};

inline EigenFactor eigen_factor(const Eigen::MatrixXd& m) {
  if (!m.allFinite()) throw NumericalError("eigendecomposition of a non-finite curvature factor");
  const Eigen::MatrixXd sym = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(sym);
  if (solver.info() != Eigen::Success) throw NumericalError("eigendecomposition failed");
  return {solver.eigenvalues().cwiseMax(0.0), solver.eigenvectors()};
}

/// One layer's Kronecker block covering its weight and bias groups.
/// Parameter (o, i) with i == in denoting the bias sits at o * (in + 1) + i
/// of G (x) A.
struct KronBlock {
  int layer = 0;
  EigenFactor a;  // (in + 1) x (in + 1), input second moment averaged over N
  EigenFactor g;  // out x out, backpropagated loss-Hessian factors summed over N
};

struct CurvatureApprox {
  CurvatureKind kind = CurvatureKind::diagonal;
  Eigen::VectorXd diagonal;  // diagonal kind, likelihood term only
  std::vector<KronBlock> blocks;  // kron kind, one per layer
};

namespace detail {

/// Columns of B with B B^T = diag(p) - p p^T, for class c: b(n, k) = sqrt(p_nc) (d_kc - p_nk).
inline Eigen::MatrixXd hessian_factor_column(const Eigen::MatrixXd& probs, int c) {
  const Eigen::ArrayXd root = probs.col(c).array().sqrt();
  Eigen::MatrixXd b = -(probs.array().colwise() * root).matrix();
  b.col(c).array() += root;
  return b;
}

inline Eigen::MatrixXd with_bias_column(const Eigen::MatrixXd& a) {
  Eigen::MatrixXd out(a.rows(), a.cols() + 1);
  out.leftCols(a.cols()) = a;
  out.col(a.cols()).setOnes();
  return out;
}

}  // namespace detail

/// Exact diagonal of the GGN over all rows of x (full batch).
inline Eigen::VectorXd ggn_diagonal(const ProbeParams& params, const Eigen::Ref<const Eigen::MatrixXd>& x) {
  Eigen::VectorXd diag = Eigen::VectorXd::Zero(params.theta.size());
  if (x.rows() == 0) return diag;
  const auto fp = forward_pass(params, x);
  const Eigen::MatrixXd probs = softmax_rows(fp.logits);
  const int layers = params.arch.num_layers();
  std::vector<Eigen::MatrixXd> sq(static_cast<std::size_t>(layers));
  for (int c = 0; c < params.arch.num_classes; ++c) {
    const auto deltas = backprop_deltas(params, fp, detail::hessian_factor_column(probs, c));
    for (int l = 0; l < layers; ++l) {
      const auto& d = deltas[static_cast<std::size_t>(l)];
      auto& s = sq[static_cast<std::size_t>(l)];
      if (c == 0) {
        s = d.array().square().matrix();
      } else {
        s.array() += d.array().square();
      }
    }
  }
  for (int l = 0; l < layers; ++l) {
    const auto& s = sq[static_cast<std::size_t>(l)];
    const Eigen::MatrixXd a2 = fp.inputs[static_cast<std::size_t>(l)].array().square().matrix();
    const auto& wg = params.layout.groups[params.layout.weight_group(l)];
    const auto& bg = params.layout.groups[params.layout.bias_group(l)];
    Eigen::Map<RowMajorMatrix> dw(diag.data() + wg.offset, s.cols(), a2.cols());
    dw.noalias() = s.transpose() * a2;
    diag.segment(static_cast<Eigen::Index>(bg.offset), s.cols()) = s.colwise().sum().transpose();
  }
  return diag;
}

/// Raw (not decomposed) Kronecker factors of one layer.
struct KronFactors {
  Eigen::MatrixXd a;
  Eigen::MatrixXd g;
};

/// Per-layer KFAC factors: A = (1/N) sum_n a_n a_n^T with a_n the layer input
/// extended by a constant 1, and G = sum_n sum_c g_nc g_nc^T. With N = 1 and a
/// linear probe, G (x) A is the exact GGN.
inline std::vector<KronFactors> kron_factors(const ProbeParams& params,
                                             const Eigen::Ref<const Eigen::MatrixXd>& x) {
  const int layers = params.arch.num_layers();
  const auto shapes = params.arch.layer_shapes();
  std::vector<KronFactors> out(static_cast<std::size_t>(layers));
  if (x.rows() == 0) {
    for (int l = 0; l < layers; ++l) {
      const auto s = shapes[static_cast<std::size_t>(l)];
      out[static_cast<std::size_t>(l)] = {Eigen::MatrixXd::Zero(s.in + 1, s.in + 1),
                                          Eigen::MatrixXd::Zero(s.out, s.out)};
    }
    return out;
  }
  const auto fp = forward_pass(params, x);
  const Eigen::MatrixXd probs = softmax_rows(fp.logits);
  const double inv_n = 1.0 / static_cast<double>(x.rows());
  for (int l = 0; l < layers; ++l) {
    const Eigen::MatrixXd a = detail::with_bias_column(fp.inputs[static_cast<std::size_t>(l)]);
    auto& f = out[static_cast<std::size_t>(l)];
    f.a.noalias() = inv_n * (a.transpose() * a);
    f.g = Eigen::MatrixXd::Zero(shapes[static_cast<std::size_t>(l)].out, shapes[static_cast<std::size_t>(l)].out);
  }
  for (int c = 0; c < params.arch.num_classes; ++c) {
    const auto deltas = backprop_deltas(params, fp, detail::hessian_factor_column(probs, c));
    for (int l = 0; l < layers; ++l) {
      const auto& d = deltas[static_cast<std::size_t>(l)];
      out[static_cast<std::size_t>(l)].g.noalias() += d.transpose() * d;
    }
  }
  return out;
}

/// Eigendecomposed input factor of the first layer. It depends only on the
/// data, so callers that recompute curvature repeatedly can reuse it.
inline EigenFactor input_factor(const Eigen::Ref<const Eigen::MatrixXd>& x) {
  const Eigen::MatrixXd a = detail::with_bias_column(x);
  if (x.rows() == 0) return eigen_factor(Eigen::MatrixXd::Zero(a.cols(), a.cols()));
  const double inv_n = 1.0 / static_cast<double>(x.rows());
  const Eigen::MatrixXd m = inv_n * (a.transpose() * a);  // same expression as kron_factors
  return eigen_factor(m);
}

inline CurvatureApprox ggn_kron(const ProbeParams& params, const Eigen::Ref<const Eigen::MatrixXd>& x,
                                const EigenFactor* first_layer_input = nullptr) {
  CurvatureApprox curv;
  curv.kind = CurvatureKind::kron;
  const auto factors = kron_factors(params, x);
  for (std::size_t l = 0; l < factors.size(); ++l) {
    KronBlock block;
    block.layer = static_cast<int>(l);
    block.a = (l == 0 && first_layer_input != nullptr) ? *first_layer_input : eigen_factor(factors[l].a);
    block.g = eigen_factor(factors[l].g);
    curv.blocks.push_back(std::move(block));
  }
  return curv;
}

inline CurvatureApprox compute_curvature(CurvatureKind kind, const ProbeParams& params,
                                         const Eigen::Ref<const Eigen::MatrixXd>& x,
                                         const EigenFactor* first_layer_input = nullptr) {
  if (kind == CurvatureKind::diagonal) {
    CurvatureApprox curv;
    curv.kind = CurvatureKind::diagonal;
    curv.diagonal = ggn_diagonal(params, x);
    return curv;
  }
  return ggn_kron(params, x, first_layer_input);
}

/// Log-determinant and hypergradient of the posterior precision, with the
/// curvature held fixed. Kron blocks use one precision per layer: the
/// parameter-weighted geometric mean of that layer's weight and bias
/// precisions (exact when the two agree).
class OccamTerm {
 public:
  OccamTerm(const CurvatureApprox& curv, const ParameterLayout& layout) : curv_(&curv), layout_(&layout) {
    if (curv.kind == CurvatureKind::kron) {
      for (const auto& b : curv.blocks) {
        const auto& av = b.a.values;
        const auto& gv = b.g.values;
        Eigen::VectorXd prod(av.size() * gv.size());
        for (Eigen::Index j = 0; j < gv.size(); ++j) prod.segment(j * av.size(), av.size()) = gv[j] * av;
        products_.push_back(std::move(prod));
      }
    } else if (curv.diagonal.size() != static_cast<Eigen::Index>(layout.size)) {
      throw Error("diagonal curvature does not match the parameter layout");
    }
  }

  double log_det(const PriorPrecisions& prec) const {
    check(prec);
    double total = 0.0;
    if (curv_->kind == CurvatureKind::diagonal) {
      const Eigen::VectorXd lambda = prec.expand(*layout_);
      for (Eigen::Index i = 0; i < lambda.size(); ++i) total += safe_log(curv_->diagonal[i] + lambda[i]);
      return total;
    }
    for (std::size_t b = 0; b < products_.size(); ++b) {
      const double lam = block_precision(b, prec);
      for (Eigen::Index k = 0; k < products_[b].size(); ++k) total += safe_log(products_[b][k] + lam);
    }
    return total;
  }

  /// d/d(log lambda) of the full log evidence at fixed theta and curvature,
  /// one entry per element of prec.values.
  Eigen::VectorXd grad_log_precision(const Eigen::VectorXd& theta, const PriorPrecisions& prec) const {
    check(prec);
    const auto& groups = layout_->groups;
    Eigen::VectorXd per_group;
    if (prec.mode == PrecisionMode::per_parameter) {
      Eigen::VectorXd grad(prec.values.size());
      for (Eigen::Index i = 0; i < grad.size(); ++i) {
        const double lam = prec.values[i];
        grad[i] = 0.5 * (1.0 - lam * theta[i] * theta[i] - lam / (curv_->diagonal[i] + lam));
      }
      return grad;
    }
    per_group.resize(static_cast<Eigen::Index>(groups.size()));
    for (std::size_t g = 0; g < groups.size(); ++g) {
      const auto& grp = groups[g];
      const double lam = prec.group_value(g);
      const auto seg_theta = theta.segment(static_cast<Eigen::Index>(grp.offset), static_cast<Eigen::Index>(grp.length));
      double trace = 0.0;
      if (curv_->kind == CurvatureKind::diagonal) {
        const auto seg_c = curv_->diagonal.segment(static_cast<Eigen::Index>(grp.offset),
                                                   static_cast<Eigen::Index>(grp.length));
        for (Eigen::Index k = 0; k < seg_c.size(); ++k) trace += lam / (seg_c[k] + lam);
      } else {
        const auto b = static_cast<std::size_t>(grp.layer);
        const double lam_block = block_precision(b, prec);
        double block_trace = 0.0;
        for (Eigen::Index k = 0; k < products_[b].size(); ++k) block_trace += lam_block / (products_[b][k] + lam_block);
        trace = block_trace * static_cast<double>(grp.length) / static_cast<double>(products_[b].size());
      }
      per_group[static_cast<Eigen::Index>(g)] =
          0.5 * (static_cast<double>(grp.length) - lam * seg_theta.squaredNorm() - trace);
    }
    if (prec.mode == PrecisionMode::scalar) return Eigen::VectorXd::Constant(1, per_group.sum());
    return per_group;
  }

  double block_precision(std::size_t block, const PriorPrecisions& prec) const {
    const auto& wg = layout_->groups[layout_->weight_group(static_cast<int>(block))];
    const auto& bg = layout_->groups[layout_->bias_group(static_cast<int>(block))];
    const double lw = prec.group_value(layout_->weight_group(static_cast<int>(block)));
    const double lb = prec.group_value(layout_->bias_group(static_cast<int>(block)));
    if (lw == lb) return lw;
    const double dw = static_cast<double>(wg.length);
    const double db = static_cast<double>(bg.length);
    return std::exp((dw * std::log(lw) + db * std::log(lb)) / (dw + db));
  }

 private:
  void check(const PriorPrecisions& prec) const {
    prec.validate(*layout_);
    if (curv_->kind == CurvatureKind::kron && prec.mode == PrecisionMode::per_parameter) {
      throw Error("per-parameter precisions require diagonal curvature");
    }
  }

  static double safe_log(double v) {
    if (!(v > 0.0) || !std::isfinite(v)) throw NumericalError("non-positive posterior precision eigenvalue");
    return std::log(v);
  }

  const CurvatureApprox* curv_;
  const ParameterLayout* layout_;
  std::vector<Eigen::VectorXd> products_;
};

inline double log_det_posterior(const CurvatureApprox& curv, const PriorPrecisions& prec,
                                const ParameterLayout& layout) {
  return OccamTerm(curv, layout).log_det(prec);
}

struct EvidenceParts {
  double nll_at_map = 0.0;
  double log_prior_at_map = 0.0;
  double half_logdet_posterior = 0.0;
  double half_d_log_2pi = 0.0;

  double log_evidence() const {
    return -nll_at_map + log_prior_at_map + half_d_log_2pi - half_logdet_posterior;
  }
};

struct PosteriorFit {
  ProbeParams theta_map;
  CurvatureApprox curvature;
  PriorPrecisions precisions;
  double log_evidence = 0.0;
  EvidenceParts parts;
  std::size_t n_data = 0;
  std::uint64_t data_fingerprint = 0;

  double log_evidence_per_example() const {
    return n_data == 0 ? 0.0 : log_evidence / static_cast<double>(n_data);
  }
};

inline EvidenceParts evidence_parts(const ProbeParams& params, const OccamTerm& occam, const PriorPrecisions& prec,
                                    double nll_at_map) {
  EvidenceParts parts;
  parts.nll_at_map = nll_at_map;
  parts.log_prior_at_map = log_prior(params, prec);
  parts.half_logdet_posterior = 0.5 * occam.log_det(prec);
  parts.half_d_log_2pi = 0.5 * static_cast<double>(params.theta.size()) * kLog2Pi;
  return parts;
}

/// log Z = log p(y | theta*) + log p(theta* | lambda) + (d/2) log 2 pi - (1/2) log det(H + Lambda).
inline PosteriorFit log_evidence(const ProbeParams& theta_map, CurvatureApprox curvature,
                                 const PriorPrecisions& precisions, const Eigen::Ref<const Eigen::MatrixXd>& x,
                                 std::span<const int> y, std::uint64_t data_fingerprint = 0) {
  PosteriorFit fit{theta_map, std::move(curvature), precisions, 0.0, {}, static_cast<std::size_t>(x.rows()),
                   data_fingerprint};
  const OccamTerm occam(fit.curvature, fit.theta_map.layout);
  fit.parts = evidence_parts(fit.theta_map, occam, precisions, nll(theta_map, x, y));
  fit.log_evidence = fit.parts.log_evidence();
  if (!std::isfinite(fit.log_evidence)) throw NumericalError("non-finite log evidence");
  return fit;
}

inline Eigen::VectorXd marglik_grad_log_prec(const PosteriorFit& fit) {
  return OccamTerm(fit.curvature, fit.theta_map.layout).grad_log_precision(fit.theta_map.theta, fit.precisions);
}

// ---------------------------------------------------------------------------
// Dense Laplace for small models with an explicit Hessian.

template <class Model>
concept TwiceDifferentiableLikelihood = requires(const Model& m, const Eigen::VectorXd& t) {
  { m.dimension() } -> std::convertible_to<Eigen::Index>;
  { m.nll(t) } -> std::convertible_to<double>;
  { m.gradient(t) } -> std::convertible_to<Eigen::VectorXd>;
  { m.hessian(t) } -> std::convertible_to<Eigen::MatrixXd>;
};

struct DenseLaplaceResult {
  Eigen::VectorXd theta_map;
  double log_evidence = 0.0;
  EvidenceParts parts;
  int iterations = 0;
};

/// Newton's method on nll + (1/2) theta^T diag(lambda) theta from zero,
/// with backtracking, then the Laplace evidence with the exact Hessian.
template <TwiceDifferentiableLikelihood Model>
DenseLaplaceResult dense_laplace(const Model& model, const Eigen::VectorXd& lambda, int max_iter = 200,
                                 double grad_tol = 1e-12) {
  const Eigen::Index d = model.dimension();
  if (lambda.size() != d) throw Error("dense_laplace: precision size mismatch");
  Eigen::VectorXd theta = Eigen::VectorXd::Zero(d);
  auto objective = [&](const Eigen::VectorXd& t) { return model.nll(t) + 0.5 * t.dot(lambda.cwiseProduct(t)); };
  auto grad_norm = [&](const Eigen::VectorXd& t) {
    return (model.gradient(t) + lambda.cwiseProduct(t)).template lpNorm<Eigen::Infinity>();
  };
  DenseLaplaceResult res;
  double f = objective(theta);
  for (; res.iterations < max_iter; ++res.iterations) {
    const Eigen::VectorXd g = model.gradient(theta) + lambda.cwiseProduct(theta);
    if (g.lpNorm<Eigen::Infinity>() < grad_tol) break;
    Eigen::MatrixXd h = model.hessian(theta);
    h.diagonal() += lambda;
    const Eigen::VectorXd step = h.ldlt().solve(g);
    // Gradient at round-off level: further Newton steps cannot make progress.
    if (step.lpNorm<Eigen::Infinity>() <= 1e-15 * (1.0 + theta.lpNorm<Eigen::Infinity>())) break;
    double t = 1.0;
    Eigen::VectorXd next = theta - step;
    double fn = objective(next);
    // Near the optimum f is flat to round-off; trust the gradient there.
    bool accept = fn < f || (fn - f <= 1e-12 * (1.0 + std::abs(f)) &&
                             grad_norm(next) < g.lpNorm<Eigen::Infinity>());
    while (!accept && t > 1e-10) {
      t *= 0.5;
      next = theta - t * step;
      fn = objective(next);
      accept = fn < f;
    }
    if (!accept) break;
    theta = std::move(next);
    f = fn;
  }
  Eigen::MatrixXd h = model.hessian(theta);
  h.diagonal() += lambda;
  const Eigen::LLT<Eigen::MatrixXd> llt(h);
  if (llt.info() != Eigen::Success) throw NumericalError("posterior precision is not positive definite");
  double logdet = 0.0;
  for (Eigen::Index i = 0; i < d; ++i) logdet += 2.0 * std::log(llt.matrixL()(i, i));
  res.theta_map = theta;
  res.parts.nll_at_map = model.nll(theta);
  res.parts.log_prior_at_map = log_prior(theta, lambda);
  res.parts.half_logdet_posterior = 0.5 * logdet;
  res.parts.half_d_log_2pi = 0.5 * static_cast<double>(d) * kLog2Pi;
  res.log_evidence = res.parts.log_evidence();
  return res;
}

/// Binary logistic regression without bias: p(y = 1 | x) = sigmoid(theta^T x).
struct BinaryLogisticModel {
  Eigen::MatrixXd x;  // N x d
  std::vector<int> y;  // 0/1

  Eigen::Index dimension() const { return x.cols(); }

  static double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }
  static double sigmoid(double z) {
    return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
  }

  double nll(const Eigen::VectorXd& t) const {
    const Eigen::VectorXd z = x * t;
    double total = 0.0;
    for (Eigen::Index n = 0; n < z.size(); ++n) total += softplus(z[n]) - y[static_cast<std::size_t>(n)] * z[n];
    return total;
  }
  Eigen::VectorXd gradient(const Eigen::VectorXd& t) const {
    const Eigen::VectorXd z = x * t;
    Eigen::VectorXd r(z.size());
    for (Eigen::Index n = 0; n < z.size(); ++n) r[n] = sigmoid(z[n]) - y[static_cast<std::size_t>(n)];
    return x.transpose() * r;
  }
  Eigen::MatrixXd hessian(const Eigen::VectorXd& t) const {
    const Eigen::VectorXd z = x * t;
    Eigen::VectorXd w(z.size());
    for (Eigen::Index n = 0; n < z.size(); ++n) {
      const double s = sigmoid(z[n]);
      w[n] = s * (1.0 - s);
    }
    return x.transpose() * w.asDiagonal() * x;
  }
};

}  // namespace evprobe
