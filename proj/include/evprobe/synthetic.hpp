#pragma once

// Synthetic classification tasks with known structure, used by the toy
// demonstration, the CLI and the test suites.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include <Eigen/Dense>

#include "evprobe/dataset.hpp"
#include "evprobe/probes.hpp"
#include "evprobe/random.hpp"
#include "evprobe/representations.hpp"

namespace evprobe::synthetic {

struct Task {
  Eigen::MatrixXd x_train;
  std::vector<int> y_train;
  Eigen::MatrixXd x_test;
  std::vector<int> y_test;
  int num_classes = 2;
};

inline int sample_categorical(rng::SplitMix64& gen, const Eigen::VectorXd& probs) {
  const double u = gen.uniform();
  double acc = 0.0;
  for (Eigen::Index c = 0; c < probs.size(); ++c) {
    acc += probs[c];
    if (u < acc) return static_cast<int>(c);
  }
  return static_cast<int>(probs.size() - 1);
}

/// Inputs ~ N(0, I); labels drawn from softmax(W x) with W_ij ~ N(0, weight_scale^2)
/// on the first `relevant` input dimensions and zero elsewhere.
struct TeacherTask : Task {
  Eigen::MatrixXd teacher;  // C x D
};

inline TeacherTask make_teacher_task(std::uint64_t seed, Eigen::Index n_train, Eigen::Index n_test, int dim,
                                     int num_classes, double weight_scale, int relevant = -1) {
  if (relevant < 0 || relevant > dim) relevant = dim;
  TeacherTask task;
  task.num_classes = num_classes;
  rng::SplitMix64 gen(rng::mix(seed, 0x7eac4e5ULL));
  task.teacher = Eigen::MatrixXd::Zero(num_classes, dim);
  for (int c = 0; c < num_classes; ++c) {
    for (int j = 0; j < relevant; ++j) task.teacher(c, j) = weight_scale * gen.normal();
  }
  auto draw = [&](Eigen::Index n, Eigen::MatrixXd& x, std::vector<int>& y, std::uint64_t stream) {
    x = random_rows(rng::mix(seed, stream), n, dim);
    y.resize(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
      const Eigen::VectorXd logits = task.teacher * x.row(i).transpose();
      y[static_cast<std::size_t>(i)] = sample_categorical(gen, softmax(logits));
    }
  };
  draw(n_train, task.x_train, task.y_train, 1);
  draw(n_test, task.x_test, task.y_test, 2);
  return task;
}

/// Labels uniform over classes and independent of the Gaussian inputs.
inline Task make_random_label_task(std::uint64_t seed, Eigen::Index n_train, Eigen::Index n_test, int dim,
                                   int num_classes) {
  Task task;
  task.num_classes = num_classes;
  rng::SplitMix64 gen(rng::mix(seed, 0x4a4dULL));
  task.x_train = random_rows(rng::mix(seed, 1), n_train, dim);
  task.x_test = random_rows(rng::mix(seed, 2), n_test, dim);
  for (Eigen::Index i = 0; i < n_train; ++i) task.y_train.push_back(static_cast<int>(gen.below(num_classes)));
  for (Eigen::Index i = 0; i < n_test; ++i) task.y_test.push_back(static_cast<int>(gen.below(num_classes)));
  return task;
}

/// Four Gaussian blobs at (+-1, +-1); the label is the XOR of the signs, so
/// no linear boundary does better than chance.
inline Task make_xor_task(std::uint64_t seed, Eigen::Index n_train, Eigen::Index n_test, double noise = 0.25) {
  Task task;
  task.num_classes = 2;
  rng::SplitMix64 gen(rng::mix(seed, 0x0709ULL));
  auto draw = [&](Eigen::Index n, Eigen::MatrixXd& x, std::vector<int>& y) {
    x.resize(n, 2);
    y.resize(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
      const int sx = static_cast<int>(gen.below(2));
      const int sy = static_cast<int>(gen.below(2));
      x(i, 0) = (sx ? 1.0 : -1.0) + noise * gen.normal();
      x(i, 1) = (sy ? 1.0 : -1.0) + noise * gen.normal();
      y[static_cast<std::size_t>(i)] = sx ^ sy;
    }
  };
  draw(n_train, task.x_train, task.y_train);
  draw(n_test, task.x_test, task.y_test);
  return task;
}

/// Two clusters in the plane: class 0 a blob at the origin, class 1 a ring
/// of radius `radius` around it. The Bayes boundary is a circle.
inline Task make_ring_task(std::uint64_t seed, Eigen::Index n_train, Eigen::Index n_test, double radius = 2.0,
                           double noise = 0.3) {
  Task task;
  task.num_classes = 2;
  rng::SplitMix64 gen(rng::mix(seed, 0x7196ULL));
  auto draw = [&](Eigen::Index n, Eigen::MatrixXd& x, std::vector<int>& y) {
    x.resize(n, 2);
    y.resize(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
      const int label = static_cast<int>(i % 2);
      if (label == 0) {
        x(i, 0) = 0.5 * gen.normal();
        x(i, 1) = 0.5 * gen.normal();
      } else {
        const double angle = 2.0 * std::numbers::pi * gen.uniform();
        const double r = radius + noise * gen.normal();
        x(i, 0) = r * std::cos(angle);
        x(i, 1) = r * std::sin(angle);
      }
      y[static_cast<std::size_t>(i)] = label;
    }
  };
  draw(n_train, task.x_train, task.y_train);
  draw(n_test, task.x_test, task.y_test);
  return task;
}

/// A word-level probing corpus with an embedding table whose vectors carry
/// the label: each word type gets a class, and its vector is `signal` times
/// that class's centroid plus unit Gaussian noise. Types occur 1 to 4 times.
struct Corpus {
  ProbingDataset dataset;
  EmbeddingTable embeddings;
};

inline Corpus make_corpus(std::uint64_t seed, int n_types, int num_classes, int dim, double signal = 2.0) {
  Corpus out;
  out.embeddings.dim = dim;
  rng::SplitMix64 gen(rng::mix(seed, 0xc0c0ULL));
  const Eigen::MatrixXd centroids = random_rows(rng::mix(seed, 3), num_classes, dim);
  int next_id = 0;
  for (int t = 0; t < n_types; ++t) {
    const int label = t % num_classes;
    const std::string token = "w" + std::to_string(t);
    out.embeddings.vectors[token] =
        signal * centroids.row(label).transpose() + random_row(rng::mix(seed, 4), static_cast<std::uint64_t>(t), dim);
    const int copies = 1 + static_cast<int>(gen.below(4));
    for (int c = 0; c < copies; ++c) {
      out.dataset.examples.push_back({"s" + std::to_string(next_id++), {token}, "L" + std::to_string(label), token});
    }
  }
  out.dataset.label_set = detail::sorted_labels(out.dataset.examples);
  return out;
}

}  // namespace evprobe::synthetic
