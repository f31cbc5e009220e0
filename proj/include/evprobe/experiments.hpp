#pragma once

// Experiment orchestration: representation comparison tables, weight-decay
// sweeps, per-parameter ARD histograms and the two-cluster toy, plus the
// config document that drives them and the files they emit.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <optional>
#include <regex>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "evprobe/checkpoint.hpp"
#include "evprobe/dataset.hpp"
#include "evprobe/error.hpp"
#include "evprobe/evidence.hpp"
#include "evprobe/laplace.hpp"
#include "evprobe/probes.hpp"
#include "evprobe/representations.hpp"
#include "evprobe/synthetic.hpp"
#include "evprobe/training.hpp"

namespace evprobe {

using ordered_json = nlohmann::ordered_json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Configuration

struct SyntheticSpec {
  std::string kind = "teacher";  // teacher | random_labels | xor | ring
  std::uint64_t seed = 0;
  int n_train = 2000;
  int n_test = 2000;
  int dim = 768;
  int num_classes = 3;
  double weight_scale = 0.1;
  int relevant = -1;  // teacher only; -1 = all dims
};

/// A task is either a dataset file (embedded with a named representation)
/// or a synthetic generator that produces its own inputs.
struct TaskSpec {
  std::string name;
  std::string path;
  double train_fraction = 0.65;
  std::uint64_t split_seed = 0;
  int min_label_count = 20;
  std::optional<SyntheticSpec> synthetic;
};

struct NamedRepresentation {
  std::string name;
  RepresentationSpec spec;
};

inline std::vector<double> default_sweep_grid() {
  std::vector<double> grid;
  for (int e = -4; e <= 8; ++e) grid.push_back(std::pow(10.0, e));
  return grid;
}

struct SweepSpec {
  TaskSpec task;
  std::string representation;  // unused for synthetic tasks
  int depth = 0;
  std::vector<double> lambdas = default_sweep_grid();
  CurvatureKind curvature = CurvatureKind::kron;
  std::uint64_t seed = 0;
};

/// Optimizer settings for ARD runs. The per-parameter fixed point needs an
/// accurate MAP: at lr 0.1 Adam's last iterate keeps oscillating around it,
/// which inflates lambda * theta^2 and stops precisions from reaching the
/// upper bound.
inline TrainConfig ard_train_config() {
  TrainConfig cfg;
  cfg.lr = 1e-3;
  return cfg;
}

inline MarglikConfig ard_marglik_config() {
  MarglikConfig m;
  m.curvature = CurvatureKind::diagonal;
  m.prior = PrecisionMode::per_parameter;
  return m;
}

struct ArdOptions {
  TrainConfig train = ard_train_config();
  bool full_batch = true;
  MarglikConfig marglik = ard_marglik_config();
  int bins = 20;
};

struct ArdRunSpec {
  std::string name;
  TaskSpec task;
  std::string representation;
};

struct ArdSpec {
  std::vector<ArdRunSpec> runs;
  ArdOptions options;
  std::uint64_t seed = 0;
};

struct ExperimentConfig {
  std::string output_dir = "out";
  std::vector<std::uint64_t> seeds{0};
  std::vector<TaskSpec> tasks;
  std::vector<NamedRepresentation> representations;
  std::vector<int> depths{0, 1, 2};
  int hidden_width = kDefaultHiddenWidth;
  TrainConfig train;
  MarglikConfig marglik;
  bool parallel = false;
  std::optional<SweepSpec> sweep;
  std::optional<ArdSpec> ard;
};

namespace detail {

inline void check_name(const std::string& kind, const std::string& name) {
  static const std::regex ok("[A-Za-z0-9_.-]+");
  if (!std::regex_match(name, ok)) {
    throw Error(kind + " name '" + name + "' must be non-empty and use only letters, digits, '_', '.', '-'");
  }
}

/// Rejects keys not in `allowed` so typos in a config do not pass silently.
inline void check_keys(const nlohmann::json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw Error("config: " + where + " must be an object");
  for (const auto& [key, value] : j.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
      throw Error("config: unknown key '" + key + "' in " + where);
    }
  }
}

template <class T>
void read(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline CurvatureKind parse_curvature(const std::string& s) {
  if (s == "kron") return CurvatureKind::kron;
  if (s == "diagonal") return CurvatureKind::diagonal;
  throw Error("unknown curvature '" + s + "'");
}

inline RepresentationKind parse_representation_kind(const std::string& s) {
  if (s == "file") return RepresentationKind::file;
  if (s == "random") return RepresentationKind::random;
  if (s == "word_identity") return RepresentationKind::word_identity;
  throw Error("unknown representation kind '" + s + "'");
}

inline const char* to_string(RepresentationKind k) {
  switch (k) {
    case RepresentationKind::file: return "file";
    case RepresentationKind::random: return "random";
    case RepresentationKind::word_identity: return "word_identity";
  }
  return "?";
}

inline Pooling parse_pooling(const std::string& s) {
  if (s == "mean") return Pooling::mean;
  if (s == "first") return Pooling::first;
  throw Error("unknown pooling '" + s + "'");
}

inline MissingTokenPolicy parse_missing(const std::string& s) {
  if (s == "word_identity") return MissingTokenPolicy::word_identity;
  if (s == "zeros") return MissingTokenPolicy::zeros;
  if (s == "error") return MissingTokenPolicy::error;
  throw Error("unknown missing-token policy '" + s + "'");
}

inline const char* to_string(MissingTokenPolicy m) {
  switch (m) {
    case MissingTokenPolicy::word_identity: return "word_identity";
    case MissingTokenPolicy::zeros: return "zeros";
    case MissingTokenPolicy::error: return "error";
  }
  return "?";
}

inline TrainConfig parse_train(const nlohmann::json& j, TrainConfig cfg) {
  check_keys(j, "train", {"lr", "beta1", "beta2", "adam_eps", "batch_size", "epochs"});
  read(j, "lr", cfg.lr);
  read(j, "beta1", cfg.beta1);
  read(j, "beta2", cfg.beta2);
  read(j, "adam_eps", cfg.adam_eps);
  read(j, "batch_size", cfg.batch_size);
  read(j, "epochs", cfg.epochs);
  if (!(cfg.lr > 0.0) || cfg.batch_size <= 0 || cfg.epochs < 0) throw Error("config: invalid train section");
  return cfg;
}

inline MarglikConfig parse_marglik(const nlohmann::json& j, MarglikConfig m) {
  check_keys(j, "marglik",
             {"frequency", "steps_per_phase", "hyper_lr", "burn_in", "precision_init", "log_precision_min",
              "log_precision_max", "curvature", "prior"});
  read(j, "frequency", m.frequency);
  read(j, "steps_per_phase", m.steps_per_phase);
  read(j, "hyper_lr", m.hyper_lr);
  read(j, "burn_in", m.burn_in);
  read(j, "precision_init", m.precision_init);
  read(j, "log_precision_min", m.log_precision_min);
  read(j, "log_precision_max", m.log_precision_max);
  if (j.contains("curvature")) m.curvature = parse_curvature(j.at("curvature").get<std::string>());
  if (j.contains("prior")) m.prior = parse_precision_mode(j.at("prior").get<std::string>());
  m.validate();
  return m;
}

inline TaskSpec parse_task(const nlohmann::json& j) {
  check_keys(j, "task", {"name", "path", "train_fraction", "split_seed", "min_label_count", "synthetic"});
  TaskSpec t;
  t.name = j.at("name").get<std::string>();
  check_name("task", t.name);
  read(j, "path", t.path);
  read(j, "train_fraction", t.train_fraction);
  read(j, "split_seed", t.split_seed);
  read(j, "min_label_count", t.min_label_count);
  if (j.contains("synthetic")) {
    const auto& js = j.at("synthetic");
    check_keys(js, "synthetic", {"kind", "seed", "n_train", "n_test", "dim", "num_classes", "weight_scale", "relevant"});
    SyntheticSpec s;
    read(js, "kind", s.kind);
    read(js, "seed", s.seed);
    read(js, "n_train", s.n_train);
    read(js, "n_test", s.n_test);
    read(js, "dim", s.dim);
    read(js, "num_classes", s.num_classes);
    read(js, "weight_scale", s.weight_scale);
    read(js, "relevant", s.relevant);
    if (s.kind != "teacher" && s.kind != "random_labels" && s.kind != "xor" && s.kind != "ring") {
      throw Error("config: unknown synthetic kind '" + s.kind + "'");
    }
    if (s.n_train <= 0 || s.n_test < 0 || s.dim <= 0 || s.num_classes < 2) {
      throw Error("config: invalid synthetic task '" + t.name + "'");
    }
    t.synthetic = s;
  }
  if (t.path.empty() == !t.synthetic) throw Error("config: task '" + t.name + "' needs exactly one of path, synthetic");
  return t;
}

inline NamedRepresentation parse_representation(const nlohmann::json& j) {
  check_keys(j, "representation", {"name", "kind", "dim", "seed", "path", "pooling", "missing"});
  NamedRepresentation r;
  r.name = j.at("name").get<std::string>();
  check_name("representation", r.name);
  r.spec.kind = parse_representation_kind(j.at("kind").get<std::string>());
  read(j, "dim", r.spec.dim);
  read(j, "seed", r.spec.seed);
  read(j, "path", r.spec.source_path);
  if (j.contains("pooling")) r.spec.pooling = parse_pooling(j.at("pooling").get<std::string>());
  if (j.contains("missing")) r.spec.missing = parse_missing(j.at("missing").get<std::string>());
  r.spec.validate();
  return r;
}

}  // namespace detail

inline ExperimentConfig parse_experiment_config(const nlohmann::json& j) {
  using namespace detail;
  try {
    check_keys(j, "config",
               {"output_dir", "seeds", "tasks", "representations", "depths", "hidden_width", "train", "marglik",
                "parallel", "sweep", "ard"});
    ExperimentConfig cfg;
    read(j, "output_dir", cfg.output_dir);
    read(j, "seeds", cfg.seeds);
    read(j, "depths", cfg.depths);
    read(j, "hidden_width", cfg.hidden_width);
    read(j, "parallel", cfg.parallel);
    if (j.contains("train")) cfg.train = parse_train(j.at("train"), cfg.train);
    if (j.contains("marglik")) cfg.marglik = parse_marglik(j.at("marglik"), cfg.marglik);
    if (j.contains("tasks")) {
      for (const auto& jt : j.at("tasks")) cfg.tasks.push_back(parse_task(jt));
    }
    if (j.contains("representations")) {
      for (const auto& jr : j.at("representations")) cfg.representations.push_back(parse_representation(jr));
    }

    if (cfg.seeds.empty()) throw Error("config: at least one seed is required");
    if (cfg.representations.empty()) throw Error("config: at least one representation is required");
    if (cfg.depths.empty()) throw Error("config: depths must not be empty");
    for (int d : cfg.depths) {
      if (d < 0 || d > 2) throw Error("config: depth " + std::to_string(d) + " not in {0,1,2}");
    }
    if (cfg.hidden_width <= 0) throw Error("config: hidden_width must be positive");
    std::set<std::string> names;
    for (const auto& t : cfg.tasks) {
      if (!names.insert("t:" + t.name).second) throw Error("config: duplicate task '" + t.name + "'");
    }
    for (const auto& r : cfg.representations) {
      if (!names.insert("r:" + r.name).second) throw Error("config: duplicate representation '" + r.name + "'");
    }
    auto check_rep = [&](const TaskSpec& t, const std::string& rep, const std::string& where) {
      if (!t.synthetic && !names.contains("r:" + rep)) {
        throw Error("config: " + where + " names unknown representation '" + rep + "'");
      }
    };

    if (j.contains("sweep")) {
      const auto& js = j.at("sweep");
      check_keys(js, "sweep", {"task", "representation", "depth", "lambdas", "curvature", "seed"});
      SweepSpec s;
      s.task = parse_task(js.at("task"));
      read(js, "representation", s.representation);
      read(js, "depth", s.depth);
      read(js, "lambdas", s.lambdas);
      read(js, "seed", s.seed);
      if (js.contains("curvature")) s.curvature = parse_curvature(js.at("curvature").get<std::string>());
      if (s.lambdas.empty()) throw Error("config: sweep.lambdas must not be empty");
      for (double l : s.lambdas) {
        if (!(l > 0.0) || !std::isfinite(l)) throw Error("config: sweep lambdas must be positive");
      }
      if (s.depth < 0 || s.depth > 2) throw Error("config: sweep.depth not in {0,1,2}");
      check_rep(s.task, s.representation, "sweep");
      cfg.sweep = std::move(s);
    }
    if (j.contains("ard")) {
      const auto& ja = j.at("ard");
      check_keys(ja, "ard", {"runs", "train", "full_batch", "marglik", "bins", "seed"});
      ArdSpec a;
      if (ja.contains("train")) a.options.train = parse_train(ja.at("train"), a.options.train);
      if (ja.contains("marglik")) a.options.marglik = parse_marglik(ja.at("marglik"), a.options.marglik);
      read(ja, "full_batch", a.options.full_batch);
      read(ja, "bins", a.options.bins);
      read(ja, "seed", a.seed);
      if (a.options.marglik.prior != PrecisionMode::per_parameter ||
          a.options.marglik.curvature != CurvatureKind::diagonal) {
        throw Error("config: ard requires per_parameter prior with diagonal curvature");
      }
      if (a.options.bins <= 0) throw Error("config: ard.bins must be positive");
      std::set<std::string> run_names;
      for (const auto& jr : ja.at("runs")) {
        check_keys(jr, "ard run", {"name", "task", "representation"});
        ArdRunSpec r;
        r.name = jr.at("name").get<std::string>();
        check_name("ard run", r.name);
        if (!run_names.insert(r.name).second) throw Error("config: duplicate ard run '" + r.name + "'");
        r.task = parse_task(jr.at("task"));
        read(jr, "representation", r.representation);
        check_rep(r.task, r.representation, "ard run '" + r.name + "'");
        a.runs.push_back(std::move(r));
      }
      if (a.runs.empty()) throw Error("config: ard.runs must not be empty");
      cfg.ard = std::move(a);
    }
    return cfg;
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("config: ") + e.what());
  }
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in, nullptr, true, /*ignore_comments=*/true);
  } catch (const nlohmann::json::exception& e) {
    throw Error(path + ": " + e.what());
  }
  auto cfg = parse_experiment_config(j);
  // Relative data paths are relative to the config file, not the caller's cwd.
  const auto base = fs::path(path).parent_path();
  auto resolve = [&](std::string& p) {
    if (!p.empty() && fs::path(p).is_relative()) p = (base / p).lexically_normal().string();
  };
  auto resolve_task = [&](TaskSpec& t) { resolve(t.path); };
  for (auto& t : cfg.tasks) resolve_task(t);
  for (auto& r : cfg.representations) resolve(r.spec.source_path);
  if (cfg.sweep) resolve_task(cfg.sweep->task);
  if (cfg.ard) {
    for (auto& r : cfg.ard->runs) resolve_task(r.task);
  }
  return cfg;
}

inline ordered_json to_json(const TrainConfig& c) {
  return {{"lr", c.lr},           {"beta1", c.beta1},   {"beta2", c.beta2},
          {"adam_eps", c.adam_eps}, {"batch_size", c.batch_size}, {"epochs", c.epochs}};
}

inline ordered_json to_json(const MarglikConfig& m) {
  return {{"frequency", m.frequency},
          {"steps_per_phase", m.steps_per_phase},
          {"hyper_lr", m.hyper_lr},
          {"burn_in", m.burn_in},
          {"precision_init", m.precision_init},
          {"log_precision_min", m.log_precision_min},
          {"log_precision_max", m.log_precision_max},
          {"curvature", to_string(m.curvature)},
          {"prior", to_string(m.prior)}};
}

inline ordered_json to_json(const TaskSpec& t) {
  ordered_json j{{"name", t.name}};
  if (t.synthetic) {
    const auto& s = *t.synthetic;
    j["synthetic"] = {{"kind", s.kind},         {"seed", s.seed},
                      {"n_train", s.n_train},   {"n_test", s.n_test},
                      {"dim", s.dim},           {"num_classes", s.num_classes},
                      {"weight_scale", s.weight_scale}, {"relevant", s.relevant}};
  } else {
    j["path"] = t.path;
    j["train_fraction"] = t.train_fraction;
    j["split_seed"] = t.split_seed;
    j["min_label_count"] = t.min_label_count;
  }
  return j;
}

/// The fully resolved config, defaults included; parsing it gives back the
/// same config.
inline ordered_json config_to_json(const ExperimentConfig& cfg) {
  ordered_json j;
  j["output_dir"] = cfg.output_dir;
  j["seeds"] = cfg.seeds;
  auto tasks = ordered_json::array();
  for (const auto& t : cfg.tasks) tasks.push_back(to_json(t));
  j["tasks"] = std::move(tasks);
  auto reps = ordered_json::array();
  for (const auto& r : cfg.representations) {
    ordered_json jr{{"name", r.name}, {"kind", detail::to_string(r.spec.kind)}, {"dim", r.spec.dim},
                    {"seed", r.spec.seed}};
    if (r.spec.kind == RepresentationKind::file) jr["path"] = r.spec.source_path;
    jr["pooling"] = r.spec.pooling == Pooling::mean ? "mean" : "first";
    jr["missing"] = detail::to_string(r.spec.missing);
    reps.push_back(std::move(jr));
  }
  j["representations"] = std::move(reps);
  j["depths"] = cfg.depths;
  j["hidden_width"] = cfg.hidden_width;
  j["train"] = to_json(cfg.train);
  j["marglik"] = to_json(cfg.marglik);
  j["parallel"] = cfg.parallel;
  if (cfg.sweep) {
    const auto& s = *cfg.sweep;
    j["sweep"] = {{"task", to_json(s.task)},  {"representation", s.representation}, {"depth", s.depth},
                  {"lambdas", s.lambdas},     {"curvature", to_string(s.curvature)}, {"seed", s.seed}};
  }
  if (cfg.ard) {
    const auto& a = *cfg.ard;
    auto runs = ordered_json::array();
    for (const auto& r : a.runs) {
      runs.push_back({{"name", r.name}, {"task", to_json(r.task)}, {"representation", r.representation}});
    }
    j["ard"] = {{"runs", std::move(runs)},
                {"train", to_json(a.options.train)},
                {"full_batch", a.options.full_batch},
                {"marglik", to_json(a.options.marglik)},
                {"bins", a.options.bins},
                {"seed", a.seed}};
  }
  return j;
}

// ---------------------------------------------------------------------------
// Task preparation

/// Inputs and labels for one (task, representation, seed) job.
struct TaskData {
  Eigen::MatrixXd x_train;
  std::vector<int> y_train;
  Eigen::MatrixXd x_test;
  std::vector<int> y_test;
  int num_classes = 2;
  std::uint64_t data_fingerprint = 0;
  std::uint64_t rep_fingerprint = 0;
};

/// Train and test splits of a dataset task after splitting and filtering.
struct PreparedTask {
  ProbingDataset train;
  ProbingDataset test;
};

/// Loads the dataset, applies the type-disjoint split unless the file
/// carries its own, then drops rare labels (counted on the train split).
inline PreparedTask prepare_task(const TaskSpec& spec) {
  if (spec.synthetic) throw Error("prepare_task: task '" + spec.name + "' is synthetic");
  auto ds = load_dataset(spec.path);
  if (ds.splits.empty()) ds = split_by_type(ds, spec.train_fraction, spec.split_seed);
  ds = filter_rare_labels(ds, spec.min_label_count);
  PreparedTask out{ds.subset("train"), ds.subset("test")};
  if (out.train.size() == 0) throw Error("task '" + spec.name + "' has an empty train split");
  return out;
}

inline TaskData synthetic_task_data(const SyntheticSpec& s) {
  synthetic::Task task;
  if (s.kind == "teacher") {
    task = synthetic::make_teacher_task(s.seed, s.n_train, s.n_test, s.dim, s.num_classes, s.weight_scale, s.relevant);
  } else if (s.kind == "random_labels") {
    task = synthetic::make_random_label_task(s.seed, s.n_train, s.n_test, s.dim, s.num_classes);
  } else if (s.kind == "xor") {
    task = synthetic::make_xor_task(s.seed, s.n_train, s.n_test);
  } else if (s.kind == "ring") {
    task = synthetic::make_ring_task(s.seed, s.n_train, s.n_test);
  } else {
    throw Error("unknown synthetic kind '" + s.kind + "'");
  }
  TaskData d{std::move(task.x_train), std::move(task.y_train), std::move(task.x_test), std::move(task.y_test),
             task.num_classes, 0, 0};
  std::ostringstream key;
  key << "synthetic;" << s.kind << ';' << s.seed << ';' << s.n_train << ';' << s.n_test << ';' << s.dim << ';'
      << s.num_classes << ';' << std::setprecision(17) << s.weight_scale << ';' << s.relevant;
  d.data_fingerprint = rng::fnv1a64(key.str());
  d.rep_fingerprint = d.data_fingerprint;
  return d;
}

/// Representation spec used for a given run seed: generated vectors (random
/// rows, word identities, missing-token fallbacks) are redrawn per seed,
/// while vectors read from a file stay fixed.
inline RepresentationSpec spec_for_seed(RepresentationSpec spec, std::uint64_t seed) {
  spec.seed = rng::mix(spec.seed, seed);
  return spec;
}

inline TaskData embed_task(const PreparedTask& task, const RepresentationSpec& spec, const EmbeddingTable* table) {
  TaskData d;
  d.x_train = embed_dataset(spec, task.train, table).rows;
  const auto test = embed_dataset(spec, task.test, table);
  d.x_test = test.rows;
  d.y_train = task.train.labels();
  d.y_test = task.test.labels();
  d.num_classes = static_cast<int>(task.train.label_set.size());
  d.data_fingerprint = task.train.fingerprint();
  d.rep_fingerprint = test.rep_fingerprint;
  return d;
}

/// Resolves a task (and, for dataset tasks, a representation) to matrices.
inline TaskData materialize(const TaskSpec& task, const std::vector<NamedRepresentation>& reps,
                            const std::string& rep_name, std::uint64_t seed) {
  if (task.synthetic) return synthetic_task_data(*task.synthetic);
  const auto it = std::find_if(reps.begin(), reps.end(), [&](const auto& r) { return r.name == rep_name; });
  if (it == reps.end()) throw Error("unknown representation '" + rep_name + "'");
  const auto prepared = prepare_task(task);
  const auto spec = spec_for_seed(it->spec, seed);
  std::optional<EmbeddingTable> table;
  if (spec.kind == RepresentationKind::file) table = load_embedding_file(spec.source_path);
  return embed_task(prepared, spec, table ? &*table : nullptr);
}

// ---------------------------------------------------------------------------
// Output helpers

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

inline std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw Error("write failed for '" + path.string() + "'");
}

inline ordered_json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  try {
    return ordered_json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Representation comparison

struct JobKey {
  std::string task;
  std::string representation;
  std::uint64_t seed = 0;

  std::string file_stem() const { return task + "__" + representation + "__seed" + std::to_string(seed); }
};

inline ordered_json fit_to_json(const ArchitectureResult& r) {
  ordered_json j;
  j["depth"] = r.arch.depth;
  j["name"] = r.arch.name();
  j["hidden_width"] = r.arch.hidden_width;
  j["parameter_count"] = r.arch.parameter_count();
  j["ok"] = r.fit.has_value();
  j["error"] = r.error;
  if (!r.fit) return j;
  const auto& f = *r.fit;
  j["log_evidence"] = f.log_evidence;
  j["log_evidence_per_example"] = f.log_evidence_per_example();
  j["parts"] = {{"nll_at_map", f.parts.nll_at_map},
                {"log_prior_at_map", f.parts.log_prior_at_map},
                {"half_logdet_posterior", f.parts.half_logdet_posterior},
                {"half_d_log_2pi", f.parts.half_d_log_2pi}};
  j["precision_mode"] = to_string(f.precisions.mode);
  auto groups = ordered_json::array();
  const auto summaries = summarize_by_group(f.precisions, f.theta_map.layout);
  for (std::size_t g = 0; g < summaries.size(); ++g) {
    groups.push_back({{"group", f.theta_map.layout.groups[g].name},
                      {"min", summaries[g].min},
                      {"median", summaries[g].median},
                      {"max", summaries[g].max}});
  }
  j["precisions"] = std::move(groups);
  return j;
}

/// SelectionResult record for one job. `error` marks a job that failed
/// before any probe was fit (e.g. the representation could not be built).
inline ordered_json selection_to_json(const JobKey& key, const SelectionResult* sel, std::size_t n_train,
                                      const std::string& error = {}) {
  ordered_json j;
  j["task"] = key.task;
  j["representation"] = key.representation;
  j["seed"] = key.seed;
  j["error"] = error;
  j["n_train"] = n_train;
  if (sel == nullptr) return j;
  j["data_fingerprint"] = hex64(sel->data_fingerprint);
  j["rep_fingerprint"] = hex64(sel->rep_fingerprint);
  auto archs = ordered_json::array();
  for (const auto& r : sel->per_arch) archs.push_back(fit_to_json(r));
  j["architectures"] = std::move(archs);
  const auto& chosen = sel->chosen_result();
  j["chosen"] = {{"index", sel->chosen}, {"depth", chosen.arch.depth}, {"name", chosen.arch.name()}};
  j["inductive_bias"] = sel->inductive_bias;
  j["inductive_bias_per_example"] = chosen.fit->log_evidence_per_example();
  return j;
}

/// The fields of a job record the comparison table needs.
struct JobSummary {
  JobKey key;
  bool ok = false;  // a probe was selected
  std::size_t failed_architectures = 0;
  int chosen_depth = -1;
  double per_example = 0.0;
  std::string error;
};

inline JobSummary summarize_job(const ordered_json& j) {
  try {
    JobSummary s;
    s.key = {j.at("task").get<std::string>(), j.at("representation").get<std::string>(),
             j.at("seed").get<std::uint64_t>()};
    s.error = j.at("error").get<std::string>();
    if (j.contains("chosen")) {
      s.ok = true;
      s.chosen_depth = j.at("chosen").at("depth").get<int>();
      s.per_example = j.at("inductive_bias_per_example").get<double>();
      for (const auto& a : j.at("architectures")) {
        if (!a.at("ok").get<bool>()) {
          ++s.failed_architectures;
          if (s.error.empty()) s.error = a.at("name").get<std::string>() + ": " + a.at("error").get<std::string>();
        }
      }
    }
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed job record: ") + e.what());
  }
}

struct ComparisonCell {
  std::string task;
  std::string representation;
  std::size_t runs = 0;
  std::size_t failed = 0;
  double mean_log_evidence_per_example = 0.0;
  double spread = 0.0;  // sample standard deviation over seeds
  int depth = -1;       // most frequent selected depth, ties to the smaller
  bool best = false;
  std::vector<std::string> errors;
};

struct ComparisonTable {
  std::vector<std::string> tasks;
  std::vector<std::string> representations;
  std::vector<ComparisonCell> cells;  // task-major

  const ComparisonCell& cell(const std::string& task, const std::string& rep) const {
    for (const auto& c : cells) {
      if (c.task == task && c.representation == rep) return c;
    }
    throw Error("no cell for (" + task + ", " + rep + ")");
  }

  bool all_succeeded() const {
    return std::all_of(cells.begin(), cells.end(), [](const auto& c) { return c.failed == 0; });
  }
};

inline ComparisonTable build_table(const std::vector<std::string>& tasks, const std::vector<std::string>& reps,
                                   const std::vector<JobSummary>& jobs) {
  ComparisonTable table{tasks, reps, {}};
  for (const auto& t : tasks) {
    std::optional<std::size_t> best;
    for (const auto& r : reps) {
      ComparisonCell cell;
      cell.task = t;
      cell.representation = r;
      std::vector<double> values;
      std::map<int, int> depth_votes;
      for (const auto& j : jobs) {
        if (j.key.task != t || j.key.representation != r) continue;
        ++cell.runs;
        if (!j.error.empty()) {
          ++cell.failed;
          cell.errors.push_back("seed " + std::to_string(j.key.seed) + ": " + j.error);
        }
        if (!j.ok) continue;
        values.push_back(j.per_example);
        ++depth_votes[j.chosen_depth];
      }
      if (!values.empty()) {
        double sum = 0.0;
        for (double v : values) sum += v;
        cell.mean_log_evidence_per_example = sum / static_cast<double>(values.size());
        if (values.size() > 1) {
          double ss = 0.0;
          for (double v : values) ss += (v - cell.mean_log_evidence_per_example) * (v - cell.mean_log_evidence_per_example);
          cell.spread = std::sqrt(ss / static_cast<double>(values.size() - 1));
        }
        int votes = 0;
        for (const auto& [d, n] : depth_votes) {
          if (n > votes) {
            cell.depth = d;
            votes = n;
          }
        }
        const bool better = !best || cell.mean_log_evidence_per_example > table.cells[*best].mean_log_evidence_per_example;
        if (better) best = table.cells.size();
      }
      table.cells.push_back(std::move(cell));
    }
    if (best) table.cells[*best].best = true;
  }
  return table;
}

inline std::string render_comparison_json(const ComparisonTable& table) {
  ordered_json j;
  j["tasks"] = table.tasks;
  j["representations"] = table.representations;
  auto cells = ordered_json::array();
  for (const auto& c : table.cells) {
    ordered_json jc{{"task", c.task},
                    {"representation", c.representation},
                    {"runs", c.runs},
                    {"failed", c.failed}};
    if (c.depth >= 0) {
      jc["mean_log_evidence_per_example"] = c.mean_log_evidence_per_example;
      jc["spread"] = c.spread;
      jc["depth"] = c.depth;
    }
    jc["best"] = c.best;
    jc["errors"] = c.errors;
    cells.push_back(std::move(jc));
  }
  j["cells"] = std::move(cells);
  return j.dump(2) + "\n";
}

inline std::string render_comparison_csv(const ComparisonTable& table) {
  std::ostringstream os;
  os << "task,representation,mean_log_evidence_per_example,spread,depth,best,runs,failed\n";
  for (const auto& c : table.cells) {
    os << c.task << ',' << c.representation << ',';
    if (c.depth >= 0) os << format_double(c.mean_log_evidence_per_example) << ',' << format_double(c.spread);
    else os << ',';
    os << ',' << c.depth << ',' << (c.best ? 1 : 0) << ',' << c.runs << ',' << c.failed << '\n';
  }
  return os.str();
}

struct ComparisonRun {
  ComparisonTable table;
  std::vector<ordered_json> jobs;
};

/// Runs select_probe for every (task, representation, seed); job failures
/// are recorded in the job record and the table, never thrown. Dataset
/// loading failures are thrown.
inline ComparisonRun run_comparison(const ExperimentConfig& cfg) {
  std::vector<std::pair<const TaskSpec*, PreparedTask>> prepared;
  for (const auto& t : cfg.tasks) {
    if (t.synthetic) throw Error("compare: task '" + t.name + "' must be a dataset file");
    prepared.emplace_back(&t, prepare_task(t));
  }
  std::map<std::string, std::shared_ptr<const EmbeddingTable>> tables;
  std::map<std::string, std::string> table_errors;
  for (const auto& r : cfg.representations) {
    if (r.spec.kind != RepresentationKind::file) continue;
    try {
      tables[r.name] = std::make_shared<const EmbeddingTable>(load_embedding_file(r.spec.source_path));
    } catch (const std::exception& e) {
      table_errors[r.name] = e.what();
    }
  }

  ComparisonRun run;
  std::vector<JobSummary> summaries;
  for (const auto& [task, data] : prepared) {
    for (const auto& rep : cfg.representations) {
      for (const auto seed : cfg.seeds) {
        const JobKey key{task->name, rep.name, seed};
        ordered_json record;
        try {
          if (auto it = table_errors.find(rep.name); it != table_errors.end()) throw Error(it->second);
          const auto spec = spec_for_seed(rep.spec, seed);
          const auto td = embed_task(data, spec, tables.contains(rep.name) ? tables.at(rep.name).get() : nullptr);
          TrainConfig train = cfg.train;
          train.init_seed = seed;
          train.shuffle_seed = seed;
          std::vector<ProbeArchitecture> archs;
          for (int d : cfg.depths) {
            archs.push_back({d, cfg.hidden_width, static_cast<int>(td.x_train.cols()), td.num_classes});
          }
          DesignMatrix dm{td.x_train, {}, td.rep_fingerprint};
          const auto sel = select_probe(dm, td.y_train, archs, train, cfg.marglik, td.data_fingerprint, cfg.parallel);
          record = selection_to_json(key, &sel, td.y_train.size());
        } catch (const std::exception& e) {
          record = selection_to_json(key, nullptr, data.train.size(), e.what());
        }
        summaries.push_back(summarize_job(record));
        run.jobs.push_back(std::move(record));
      }
    }
  }
  std::vector<std::string> task_names, rep_names;
  for (const auto& t : cfg.tasks) task_names.push_back(t.name);
  for (const auto& r : cfg.representations) rep_names.push_back(r.name);
  run.table = build_table(task_names, rep_names, summaries);
  return run;
}

/// Writes jobs/<task>__<rep>__seed<s>.json, manifest.json, comparison.json
/// and comparison.csv under `dir`.
inline void write_comparison(const fs::path& dir, const ComparisonRun& run) {
  ordered_json manifest;
  manifest["magic"] = "EVPROBE-COMPARISON1";
  manifest["tasks"] = run.table.tasks;
  manifest["representations"] = run.table.representations;
  auto files = ordered_json::array();
  for (const auto& job : run.jobs) {
    const auto s = summarize_job(job);
    const std::string rel = "jobs/" + s.key.file_stem() + ".json";
    write_text(dir / rel, job.dump(1) + "\n");
    files.push_back(rel);
  }
  manifest["jobs"] = std::move(files);
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
  write_text(dir / "comparison.json", render_comparison_json(run.table));
  write_text(dir / "comparison.csv", render_comparison_csv(run.table));
}

/// Rebuilds the comparison table from a directory written by
/// write_comparison without refitting anything.
inline ComparisonTable load_comparison(const fs::path& dir) {
  const auto manifest = read_json(dir / "manifest.json");
  try {
    std::vector<JobSummary> jobs;
    for (const auto& rel : manifest.at("jobs")) jobs.push_back(summarize_job(read_json(dir / rel.get<std::string>())));
    return build_table(manifest.at("tasks").get<std::vector<std::string>>(),
                       manifest.at("representations").get<std::vector<std::string>>(), jobs);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError((dir / "manifest.json").string() + ": " + e.what());
  }
}

/// Re-renders comparison.json and comparison.csv into `out_dir` from the
/// serialized job records in `in_dir`.
inline ComparisonTable report(const fs::path& in_dir, const fs::path& out_dir) {
  auto table = load_comparison(in_dir);
  write_text(out_dir / "comparison.json", render_comparison_json(table));
  write_text(out_dir / "comparison.csv", render_comparison_csv(table));
  return table;
}

// ---------------------------------------------------------------------------
// Weight-decay sweep

struct SweepPoint {
  double lambda = 0.0;
  double train_ce = 0.0;
  double test_ce = 0.0;
  double log_evidence_per_example = 0.0;
};

/// Trains at each fixed scalar precision and records train/test cross
/// entropy (nats per example) and the Laplace log evidence per example.
inline std::vector<SweepPoint> run_decay_sweep(const TaskData& task, const ProbeArchitecture& arch,
                                               const std::vector<double>& lambdas, const TrainConfig& cfg,
                                               CurvatureKind curvature = CurvatureKind::kron) {
  if (lambdas.empty()) throw Error("run_decay_sweep: empty lambda grid");
  std::vector<SweepPoint> out;
  for (double lambda : lambdas) {
    const auto fit = fit_fixed_precision(arch, task.x_train, task.y_train, PriorPrecisions::scalar(lambda), cfg,
                                         curvature, task.data_fingerprint);
    SweepPoint p;
    p.lambda = lambda;
    p.train_ce = fit.parts.nll_at_map / static_cast<double>(task.x_train.rows());
    p.test_ce = task.x_test.rows() == 0
                    ? 0.0
                    : nll(fit.theta_map, task.x_test, task.y_test) / static_cast<double>(task.x_test.rows());
    p.log_evidence_per_example = fit.log_evidence_per_example();
    out.push_back(p);
  }
  return out;
}

inline std::string render_sweep_csv(const std::vector<SweepPoint>& points) {
  std::ostringstream os;
  os << "lambda,train_ce,test_ce,log_evidence_per_example\n";
  for (const auto& p : points) {
    os << format_double(p.lambda) << ',' << format_double(p.train_ce) << ',' << format_double(p.test_ce) << ','
       << format_double(p.log_evidence_per_example) << '\n';
  }
  return os.str();
}

/// Index of the evidence-maximizing grid point.
inline std::size_t evidence_argmax(const std::vector<SweepPoint>& points) {
  return static_cast<std::size_t>(std::max_element(points.begin(), points.end(), [](const auto& a, const auto& b) {
                                    return a.log_evidence_per_example < b.log_evidence_per_example;
                                  }) - points.begin());
}

// ---------------------------------------------------------------------------
// ARD

struct HistogramBin {
  std::string group;
  double lower = 0.0;
  double upper = 0.0;
  std::size_t count = 0;
};

struct ArdResult {
  PosteriorFit fit;
  TrainTrace trace;
  std::vector<HistogramBin> histogram;  // log-precision bins per parameter group
  double zero_out_threshold = 0.0;      // log-precision upper bound minus 1
  std::size_t weight_count = 0;
  double weight_fraction_at_upper = 0.0;

  /// Histogram counts summed over the weight groups.
  std::vector<std::size_t> weight_counts() const {
    std::vector<std::size_t> out;
    const auto& layout = fit.theta_map.layout;
    for (const auto& g : layout.groups) {
      if (g.is_bias) continue;
      std::size_t k = 0;
      for (const auto& b : histogram) {
        if (b.group != g.name) continue;
        if (out.size() <= k) out.push_back(0);
        out[k++] += b.count;
      }
    }
    return out;
  }
};

/// Bimodal: the top bin is a peak, and some earlier bin is a second peak
/// separated from it by a bin holding less than half of either peak.
inline bool histogram_is_bimodal(const std::vector<std::size_t>& counts) {
  const std::size_t n = counts.size();
  if (n < 3 || counts[n - 1] == 0 || counts[n - 1] <= counts[n - 2]) return false;
  for (std::size_t i = 0; i + 2 < n; ++i) {
    const bool peak = counts[i] > 0 && (i == 0 || counts[i] >= counts[i - 1]) && counts[i] >= counts[i + 1];
    if (!peak) continue;
    const double limit = 0.5 * static_cast<double>(std::min(counts[i], counts[n - 1]));
    for (std::size_t k = i + 1; k + 1 < n; ++k) {
      if (static_cast<double>(counts[k]) < limit) return true;
    }
  }
  return false;
}

inline ArdResult run_ard(const TaskData& task, const ArdOptions& opts, std::uint64_t seed = 0) {
  if (opts.bins <= 0) throw Error("run_ard: bins must be positive");
  const ProbeArchitecture arch{0, kDefaultHiddenWidth, static_cast<int>(task.x_train.cols()), task.num_classes};
  auto mcfg = opts.marglik;
  if (mcfg.prior != PrecisionMode::per_parameter || mcfg.curvature != CurvatureKind::diagonal) {
    throw Error("run_ard: requires per_parameter precisions with diagonal curvature");
  }
  TrainConfig train = opts.train;
  train.init_seed = seed;
  train.shuffle_seed = seed;
  if (opts.full_batch) train.batch_size = static_cast<int>(std::max<Eigen::Index>(1, task.x_train.rows()));

  auto marglik = optimize_marglik(arch, task.x_train, task.y_train, train, mcfg, task.data_fingerprint);
  ArdResult out{std::move(marglik.fit), std::move(marglik.trace), {}, mcfg.log_precision_max - 1.0, 0, 0.0};

  const double lo = mcfg.log_precision_min;
  const double width = (mcfg.log_precision_max - lo) / opts.bins;
  const auto& layout = out.fit.theta_map.layout;
  const Eigen::VectorXd lambda = out.fit.precisions.expand(layout);
  std::size_t at_upper = 0;
  for (const auto& g : layout.groups) {
    std::vector<std::size_t> counts(static_cast<std::size_t>(opts.bins), 0);
    for (std::size_t i = g.offset; i < g.offset + g.length; ++i) {
      const double l = std::log(lambda[static_cast<Eigen::Index>(i)]);
      const auto bin = std::clamp(static_cast<int>(std::floor((l - lo) / width)), 0, opts.bins - 1);
      ++counts[static_cast<std::size_t>(bin)];
      if (!g.is_bias) {
        ++out.weight_count;
        at_upper += l >= out.zero_out_threshold;
      }
    }
    for (int b = 0; b < opts.bins; ++b) {
      out.histogram.push_back({g.name, lo + b * width, lo + (b + 1) * width, counts[static_cast<std::size_t>(b)]});
    }
  }
  out.weight_fraction_at_upper =
      out.weight_count == 0 ? 0.0 : static_cast<double>(at_upper) / static_cast<double>(out.weight_count);
  return out;
}

inline std::string render_histogram_csv(const ArdResult& r) {
  std::ostringstream os;
  os << "group,log_precision_lower,log_precision_upper,count\n";
  for (const auto& b : r.histogram) {
    os << b.group << ',' << format_double(b.lower) << ',' << format_double(b.upper) << ',' << b.count << '\n';
  }
  return os.str();
}

inline std::string render_precisions_csv(const ArdResult& r) {
  std::ostringstream os;
  os << "index,group,theta,log_precision\n";
  const auto& layout = r.fit.theta_map.layout;
  for (const auto& g : layout.groups) {
    for (std::size_t i = g.offset; i < g.offset + g.length; ++i) {
      const auto k = static_cast<Eigen::Index>(i);
      os << i << ',' << g.name << ',' << format_double(r.fit.theta_map.theta[k]) << ','
         << format_double(std::log(r.fit.precisions.values[k])) << '\n';
    }
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Two-cluster toy

struct ToyFit {
  std::string representation;  // "informative" or "random"
  std::string probe;           // "linear" or "neural"
  PosteriorFit fit;
};

struct ToyResult {
  std::vector<ToyFit> fits;
  Eigen::VectorXd grid_axis;

  const ToyFit& get(const std::string& rep, const std::string& probe) const {
    for (const auto& f : fits) {
      if (f.representation == rep && f.probe == probe) return f;
    }
    throw Error("no toy fit (" + rep + ", " + probe + ")");
  }

  double best(const std::string& rep) const {
    return std::max(get(rep, "linear").fit.log_evidence, get(rep, "neural").fit.log_evidence);
  }
};

/// Ring-vs-blob data whose boundary is a circle. The informative
/// representation is the 2-D position; the random one replaces each point
/// by an independent Gaussian vector. Each is probed linearly and with a
/// one-hidden-layer network under the evidence framework.
inline ToyResult run_toy(std::uint64_t seed, const TrainConfig& train = {}, const MarglikConfig& marglik = {},
                         Eigen::Index n_train = 200) {
  const auto task = synthetic::make_ring_task(seed, n_train, 0);
  const Eigen::MatrixXd random_rep = random_rows(rng::mix(seed, 0x70a5ULL), n_train, 2);
  const auto fp = rng::mix(rng::fnv1a64("toy"), seed);
  TrainConfig cfg = train;
  cfg.init_seed = seed;
  cfg.shuffle_seed = seed;

  ToyResult out;
  out.grid_axis = Eigen::VectorXd::LinSpaced(41, -4.0, 4.0);
  for (const auto* rep : {"informative", "random"}) {
    const Eigen::MatrixXd& x = std::string(rep) == "informative" ? task.x_train : random_rep;
    for (const int depth : {0, 1}) {
      const ProbeArchitecture arch{depth, kDefaultHiddenWidth, 2, 2};
      out.fits.push_back({rep, depth == 0 ? "linear" : "neural",
                          optimize_marglik(arch, x, task.y_train, cfg, marglik, fp).fit});
    }
  }
  return out;
}

/// Predictive probabilities of the informative-representation fits on a
/// square grid over the input plane.
inline std::string render_toy_grid_csv(const ToyResult& r) {
  std::ostringstream os;
  os << "probe,x0,x1,p0,p1\n";
  const auto& axis = r.grid_axis;
  Eigen::MatrixXd pts(axis.size() * axis.size(), 2);
  for (Eigen::Index i = 0; i < axis.size(); ++i) {
    for (Eigen::Index k = 0; k < axis.size(); ++k) pts.row(i * axis.size() + k) << axis[i], axis[k];
  }
  for (const auto* probe : {"linear", "neural"}) {
    const auto probs = predict_proba(r.get("informative", probe).fit.theta_map, pts);
    for (Eigen::Index n = 0; n < pts.rows(); ++n) {
      os << probe << ',' << format_double(pts(n, 0)) << ',' << format_double(pts(n, 1)) << ','
         << format_double(probs(n, 0)) << ',' << format_double(probs(n, 1)) << '\n';
    }
  }
  return os.str();
}

inline std::string render_toy_summary(const ToyResult& r) {
  ordered_json j;
  auto fits = ordered_json::array();
  for (const auto& f : r.fits) {
    fits.push_back({{"representation", f.representation},
                    {"probe", f.probe},
                    {"log_evidence", f.fit.log_evidence},
                    {"log_evidence_per_example", f.fit.log_evidence_per_example()}});
  }
  j["fits"] = std::move(fits);
  j["best_informative"] = r.best("informative");
  j["best_random"] = r.best("random");
  return j.dump(2) + "\n";
}

inline void write_toy(const fs::path& dir, const ToyResult& r, std::uint64_t seed) {
  write_text(dir / "toy_summary.json", render_toy_summary(r));
  write_text(dir / "toy_grid.csv", render_toy_grid_csv(r));
  for (const auto& f : r.fits) {
    fs::create_directories(dir / "checkpoints");
    save_checkpoint({f.fit.theta_map, f.fit.precisions, seed},
                    (dir / "checkpoints" / (f.representation + "_" + f.probe + ".json")).string());
  }
}

}  // namespace evprobe
