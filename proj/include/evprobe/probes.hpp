#pragma once

// Probe family: linear and tanh MLP classifiers with a softmax output,
// their flat parameterization into regularization groups, the categorical
// likelihood and the Gaussian prior.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "evprobe/error.hpp"
#include "evprobe/random.hpp"

namespace evprobe {

using RowMajorMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr int kDefaultHiddenWidth = 100;

struct LayerShape {
  int out = 0;
  int in = 0;
};

struct ProbeArchitecture {
  int depth = 0;  // hidden layers; 0 = linear
  int hidden_width = kDefaultHiddenWidth;
  int input_dim = 0;
  int num_classes = 2;

  bool operator==(const ProbeArchitecture&) const = default;

  void validate() const {
    if (depth < 0 || depth > 2) throw Error("probe depth must be 0, 1 or 2");
    if (hidden_width <= 0) throw Error("hidden_width must be positive");
    if (input_dim <= 0) throw Error("input_dim must be positive");
    if (num_classes < 2) throw Error("a probe needs at least 2 classes");
  }

  int num_layers() const { return depth + 1; }

  std::vector<LayerShape> layer_shapes() const {
    std::vector<LayerShape> shapes;
    int in = input_dim;
    for (int l = 0; l < depth; ++l) {
      shapes.push_back({hidden_width, in});
      in = hidden_width;
    }
    shapes.push_back({num_classes, in});
    return shapes;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (auto s : layer_shapes()) n += static_cast<std::size_t>(s.out) * (s.in + 1);
    return n;
  }

  std::string name() const { return depth == 0 ? "linear" : "mlp" + std::to_string(depth); }
};

struct ParameterGroup {
  std::string name;
  std::size_t offset = 0;
  std::size_t length = 0;
  int layer = 0;
  bool is_bias = false;
};

/// Flat layout: for each layer, the weight matrix (row-major, out x in)
/// followed by the bias vector. One group per weight matrix and per bias.
struct ParameterLayout {
  std::vector<ParameterGroup> groups;
  std::size_t size = 0;

  static ParameterLayout for_architecture(const ProbeArchitecture& arch) {
    ParameterLayout layout;
    int l = 0;
    for (auto s : arch.layer_shapes()) {
      const auto w = static_cast<std::size_t>(s.out) * s.in;
      layout.groups.push_back({"layer" + std::to_string(l) + ".weight", layout.size, w, l, false});
      layout.size += w;
      layout.groups.push_back({"layer" + std::to_string(l) + ".bias", layout.size,
                               static_cast<std::size_t>(s.out), l, true});
      layout.size += static_cast<std::size_t>(s.out);
      ++l;
    }
    return layout;
  }

  std::size_t weight_group(int layer) const { return static_cast<std::size_t>(2 * layer); }
  std::size_t bias_group(int layer) const { return static_cast<std::size_t>(2 * layer + 1); }
};

enum class PrecisionMode { scalar, per_group, per_parameter };

inline const char* to_string(PrecisionMode m) {
  switch (m) {
    case PrecisionMode::scalar: return "scalar";
    case PrecisionMode::per_group: return "per_group";
    case PrecisionMode::per_parameter: return "per_parameter";
  }
  return "?";
}

/// Gaussian prior precisions (weight decay strengths).
struct PriorPrecisions {
  PrecisionMode mode = PrecisionMode::scalar;
  Eigen::VectorXd values = Eigen::VectorXd::Ones(1);

  static PriorPrecisions scalar(double lambda) {
    return {PrecisionMode::scalar, Eigen::VectorXd::Constant(1, lambda)};
  }
  static PriorPrecisions per_group(const ParameterLayout& layout, double lambda) {
    return {PrecisionMode::per_group,
            Eigen::VectorXd::Constant(static_cast<Eigen::Index>(layout.groups.size()), lambda)};
  }
  static PriorPrecisions per_parameter(const ParameterLayout& layout, double lambda) {
    return {PrecisionMode::per_parameter,
            Eigen::VectorXd::Constant(static_cast<Eigen::Index>(layout.size), lambda)};
  }
  static PriorPrecisions uniform(PrecisionMode mode, const ParameterLayout& layout, double lambda) {
    switch (mode) {
      case PrecisionMode::scalar: return scalar(lambda);
      case PrecisionMode::per_group: return per_group(layout, lambda);
      case PrecisionMode::per_parameter: return per_parameter(layout, lambda);
    }
    throw Error("unknown precision mode");
  }

  void validate(const ParameterLayout& layout) const {
    Eigen::Index expected = 1;
    if (mode == PrecisionMode::per_group) expected = static_cast<Eigen::Index>(layout.groups.size());
    if (mode == PrecisionMode::per_parameter) expected = static_cast<Eigen::Index>(layout.size);
    if (values.size() != expected) {
      throw Error(std::string("precision vector has wrong length for mode ") + to_string(mode));
    }
    for (Eigen::Index i = 0; i < values.size(); ++i) {
      if (!(values[i] > 0.0) || !std::isfinite(values[i])) {
        throw Error("prior precisions must be positive and finite");
      }
    }
  }

  /// Precision of group g (scalar and per-group modes).
  double group_value(std::size_t g) const {
    return mode == PrecisionMode::scalar ? values[0] : values[static_cast<Eigen::Index>(g)];
  }

  /// Per-parameter precision vector.
  Eigen::VectorXd expand(const ParameterLayout& layout) const {
    validate(layout);
    if (mode == PrecisionMode::per_parameter) return values;
    Eigen::VectorXd out(static_cast<Eigen::Index>(layout.size));
    for (std::size_t g = 0; g < layout.groups.size(); ++g) {
      const auto& grp = layout.groups[g];
      out.segment(static_cast<Eigen::Index>(grp.offset), static_cast<Eigen::Index>(grp.length))
          .setConstant(group_value(g));
    }
    return out;
  }
};

struct ProbeParams {
  ProbeArchitecture arch;
  ParameterLayout layout;
  Eigen::VectorXd theta;

  ProbeParams() = default;

  explicit ProbeParams(const ProbeArchitecture& a)
      : arch(a),
        layout(ParameterLayout::for_architecture(a)),
        theta(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(layout.size))) {
    arch.validate();
  }

  Eigen::Map<const RowMajorMatrix> weight(int layer) const {
    const auto& g = layout.groups[layout.weight_group(layer)];
    const auto s = arch.layer_shapes()[static_cast<std::size_t>(layer)];
    return {theta.data() + g.offset, s.out, s.in};
  }
  Eigen::Map<RowMajorMatrix> weight(int layer) {
    const auto& g = layout.groups[layout.weight_group(layer)];
    const auto s = arch.layer_shapes()[static_cast<std::size_t>(layer)];
    return {theta.data() + g.offset, s.out, s.in};
  }
  Eigen::Map<const Eigen::VectorXd> bias(int layer) const {
    const auto& g = layout.groups[layout.bias_group(layer)];
    return {theta.data() + g.offset, static_cast<Eigen::Index>(g.length)};
  }
  Eigen::Map<Eigen::VectorXd> bias(int layer) {
    const auto& g = layout.groups[layout.bias_group(layer)];
    return {theta.data() + g.offset, static_cast<Eigen::Index>(g.length)};
  }
};

/// Elementwise tanh through the vectorized exponential; saturates cleanly
/// to +-1 for large |x|.
template <class Derived>
Eigen::MatrixXd tanh_activation(const Eigen::MatrixBase<Derived>& z) {
  return (1.0 - 2.0 / ((2.0 * z.array()).exp() + 1.0)).matrix();
}

/// Glorot-uniform weights, zero biases.
inline ProbeParams init_params(const ProbeArchitecture& arch, std::uint64_t seed) {
  ProbeParams p(arch);
  rng::SplitMix64 gen(rng::mix(seed, 0x1a17ULL));
  for (int l = 0; l < arch.num_layers(); ++l) {
    auto w = p.weight(l);
    const double limit = std::sqrt(6.0 / static_cast<double>(w.rows() + w.cols()));
    for (Eigen::Index i = 0; i < w.rows(); ++i) {
      for (Eigen::Index j = 0; j < w.cols(); ++j) w(i, j) = gen.uniform(-limit, limit);
    }
  }
  return p;
}

/// Activations recorded by a batched forward pass. inputs[l] is the input
/// of layer l (N x in_l), so inputs[0] is the data itself.
struct ForwardPass {
  std::vector<Eigen::MatrixXd> inputs;
  Eigen::MatrixXd logits;  // N x C
};

inline ForwardPass forward_pass(const ProbeParams& params, const Eigen::Ref<const Eigen::MatrixXd>& x) {
  if (x.cols() != params.arch.input_dim) {
    throw Error("input dimension " + std::to_string(x.cols()) + " does not match probe input " +
                std::to_string(params.arch.input_dim));
  }
  ForwardPass fp;
  fp.inputs.reserve(static_cast<std::size_t>(params.arch.num_layers()));
  fp.inputs.emplace_back(x);
  for (int l = 0; l < params.arch.num_layers(); ++l) {
    Eigen::MatrixXd z = fp.inputs.back() * params.weight(l).transpose();
    z.rowwise() += params.bias(l).transpose();
    if (l + 1 < params.arch.num_layers()) {
      fp.inputs.emplace_back(tanh_activation(z));
    } else {
      fp.logits = std::move(z);
    }
  }
  return fp;
}

/// Logits for a single representation vector.
inline Eigen::VectorXd forward(const ProbeParams& params, const Eigen::Ref<const Eigen::VectorXd>& h) {
  if (h.size() != params.arch.input_dim) {
    throw Error("input dimension " + std::to_string(h.size()) + " does not match probe input " +
                std::to_string(params.arch.input_dim));
  }
  Eigen::VectorXd a = h;
  for (int l = 0; l < params.arch.num_layers(); ++l) {
    Eigen::VectorXd z = params.weight(l) * a + params.bias(l);
    a = (l + 1 < params.arch.num_layers()) ? Eigen::VectorXd(tanh_activation(z)) : z;
  }
  return a;
}

/// Row-wise softmax with max subtraction.
inline Eigen::MatrixXd softmax_rows(const Eigen::MatrixXd& logits) {
  Eigen::MatrixXd p = logits.colwise() - logits.rowwise().maxCoeff();
  p = p.array().exp().matrix();
  p.array().colwise() /= p.rowwise().sum().array();
  return p;
}

inline Eigen::VectorXd softmax(const Eigen::VectorXd& logits) {
  Eigen::VectorXd p = (logits.array() - logits.maxCoeff()).exp().matrix();
  return p / p.sum();
}

/// Sum over rows of -log softmax(logits)[y].
inline double nll_from_logits(const Eigen::MatrixXd& logits, std::span<const int> y) {
  double total = 0.0;
  for (Eigen::Index n = 0; n < logits.rows(); ++n) {
    const double m = logits.row(n).maxCoeff();
    const double lse = m + std::log((logits.row(n).array() - m).exp().sum());
    total += lse - logits(n, y[static_cast<std::size_t>(n)]);
  }
  return total;
}

inline void check_labels(std::span<const int> y, Eigen::Index n, int num_classes) {
  if (static_cast<Eigen::Index>(y.size()) != n) {
    throw Error("label count " + std::to_string(y.size()) + " does not match " + std::to_string(n) +
                " rows");
  }
  for (int c : y) {
    if (c < 0 || c >= num_classes) throw Error("class index " + std::to_string(c) + " out of range");
  }
}

inline double nll(const ProbeParams& params, const Eigen::Ref<const Eigen::MatrixXd>& x,
                  std::span<const int> y) {
  check_labels(y, x.rows(), params.arch.num_classes);
  if (x.rows() == 0) return 0.0;
  return nll_from_logits(forward_pass(params, x).logits, y);
}

inline double log_prior(const Eigen::VectorXd& theta, const Eigen::VectorXd& lambda) {
  constexpr double log_2pi = 1.8378770664093454835606594728112;
  double total = 0.0;
  for (Eigen::Index i = 0; i < theta.size(); ++i) {
    total += 0.5 * (std::log(lambda[i]) - log_2pi - lambda[i] * theta[i] * theta[i]);
  }
  return total;
}

inline double log_prior(const ProbeParams& params, const PriorPrecisions& prec) {
  return log_prior(params.theta, prec.expand(params.layout));
}

/// Backpropagates output-space vectors `delta` (N x C) through the network
/// recorded in `fp`. Returns the per-layer pre-activation deltas, indexed
/// like the layers; deltas.back() == delta.
inline std::vector<Eigen::MatrixXd> backprop_deltas(const ProbeParams& params, const ForwardPass& fp,
                                                    const Eigen::MatrixXd& delta) {
  const int layers = params.arch.num_layers();
  std::vector<Eigen::MatrixXd> deltas(static_cast<std::size_t>(layers));
  deltas.back() = delta;
  for (int l = layers - 1; l > 0; --l) {
    const auto& act = fp.inputs[static_cast<std::size_t>(l)];
    Eigen::MatrixXd back = deltas[static_cast<std::size_t>(l)] * params.weight(l);
    deltas[static_cast<std::size_t>(l - 1)] =
        (back.array() * (1.0 - act.array().square())).matrix();
  }
  return deltas;
}

/// Gradient of sum_n <delta_n, logits_n> with respect to the flat parameters.
inline Eigen::VectorXd gradient_from_deltas(const ProbeParams& params, const ForwardPass& fp,
                                            const std::vector<Eigen::MatrixXd>& deltas) {
  Eigen::VectorXd grad(params.theta.size());
  for (int l = 0; l < params.arch.num_layers(); ++l) {
    const auto& wg = params.layout.groups[params.layout.weight_group(l)];
    const auto& bg = params.layout.groups[params.layout.bias_group(l)];
    const auto& d = deltas[static_cast<std::size_t>(l)];
    const auto& a = fp.inputs[static_cast<std::size_t>(l)];
    Eigen::Map<RowMajorMatrix> gw(grad.data() + wg.offset, d.cols(), a.cols());
    gw.noalias() = d.transpose() * a;
    grad.segment(static_cast<Eigen::Index>(bg.offset), d.cols()) = d.colwise().sum().transpose();
  }
  return grad;
}

struct NllGradient {
  double value = 0.0;
  Eigen::VectorXd grad;
};

/// Negative log-likelihood and its gradient over all rows of x.
inline NllGradient nll_and_gradient(const ProbeParams& params, const Eigen::Ref<const Eigen::MatrixXd>& x,
                                    std::span<const int> y) {
  check_labels(y, x.rows(), params.arch.num_classes);
  if (x.rows() == 0) return {0.0, Eigen::VectorXd::Zero(params.theta.size())};
  const auto fp = forward_pass(params, x);
  Eigen::MatrixXd delta = softmax_rows(fp.logits);
  for (Eigen::Index n = 0; n < x.rows(); ++n) delta(n, y[static_cast<std::size_t>(n)]) -= 1.0;
  return {nll_from_logits(fp.logits, y), gradient_from_deltas(params, fp, backprop_deltas(params, fp, delta))};
}

/// Predictive class probabilities, N x C.
inline Eigen::MatrixXd predict_proba(const ProbeParams& params, const Eigen::Ref<const Eigen::MatrixXd>& x) {
  if (x.rows() == 0) return Eigen::MatrixXd(0, params.arch.num_classes);
  return softmax_rows(forward_pass(params, x).logits);
}

}  // namespace evprobe
