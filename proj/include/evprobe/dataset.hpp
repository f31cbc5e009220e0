#pragma once

// Probing datasets: labeled token sequences with named splits.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "evprobe/error.hpp"
#include "evprobe/random.hpp"

namespace evprobe {

struct ProbingExample {
  std::string id;
  std::vector<std::string> tokens;
  std::string label;
  std::string type_key;  // defaults to the space-joined tokens

  bool operator==(const ProbingExample&) const = default;
};

inline std::string join_tokens(const std::vector<std::string>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += tokens[i];
  }
  return out;
}

struct ProbingDataset {
  std::vector<ProbingExample> examples;
  /// Sorted lexicographically; position is the class index.
  std::vector<std::string> label_set;
  std::map<std::string, std::vector<std::string>> splits;

  bool operator==(const ProbingDataset&) const = default;

  std::size_t size() const { return examples.size(); }

  int class_index(std::string_view label) const {
    auto it = std::lower_bound(label_set.begin(), label_set.end(), label);
    if (it == label_set.end() || *it != label) {
      throw Error("label '" + std::string(label) + "' not in label set");
    }
    return static_cast<int>(it - label_set.begin());
  }

  /// Class indices for all examples, in example order.
  std::vector<int> labels() const {
    std::vector<int> y;
    y.reserve(examples.size());
    for (const auto& ex : examples) y.push_back(class_index(ex.label));
    return y;
  }

  /// Examples of one split, in dataset order, keeping the full label set.
  ProbingDataset subset(const std::string& split) const {
    auto it = splits.find(split);
    if (it == splits.end()) throw Error("dataset has no split '" + split + "'");
    std::unordered_set<std::string> keep(it->second.begin(), it->second.end());
    ProbingDataset out;
    out.label_set = label_set;
    for (const auto& ex : examples) {
      if (keep.contains(ex.id)) out.examples.push_back(ex);
    }
    std::vector<std::string> ids;
    for (const auto& ex : out.examples) ids.push_back(ex.id);
    out.splits[split] = std::move(ids);
    return out;
  }

  /// Hash over ids and labels. Two fits are comparable iff this matches.
  std::uint64_t fingerprint() const {
    std::uint64_t h = rng::fnv1a64("evprobe-dataset");
    for (const auto& ex : examples) {
      h = rng::fnv1a64(ex.id, h);
      h = rng::fnv1a64("\x1f", h);
      h = rng::fnv1a64(ex.label, h);
      h = rng::fnv1a64("\x1e", h);
    }
    return h;
  }
};

namespace detail {

inline std::vector<std::string> sorted_labels(const std::vector<ProbingExample>& examples) {
  std::set<std::string> labels;
  for (const auto& ex : examples) labels.insert(ex.label);
  return {labels.begin(), labels.end()};
}

inline void validate_example(const ProbingExample& ex, const std::string& where) {
  if (ex.id.empty()) throw FormatError(where + ": empty id");
  if (ex.tokens.empty()) throw FormatError(where + ": example '" + ex.id + "' has no tokens");
  if (ex.label.empty()) throw FormatError(where + ": example '" + ex.id + "' has empty label");
}

}  // namespace detail

/// Parses the JSON-lines dataset format from a stream. Blank lines are
/// skipped; `source` is used in error messages.
inline ProbingDataset parse_dataset(std::istream& in, const std::string& source = "<stream>") {
  ProbingDataset ds;
  std::unordered_set<std::string> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
    const std::string where = source + ":" + std::to_string(lineno);
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError(where + ": malformed JSON (" + e.what() + ")");
    }
    if (!obj.is_object()) throw FormatError(where + ": expected a JSON object");
    ProbingExample ex;
    try {
      ex.id = obj.at("id").get<std::string>();
      ex.tokens = obj.at("tokens").get<std::vector<std::string>>();
      ex.label = obj.at("label").get<std::string>();
      if (obj.contains("type_key")) ex.type_key = obj["type_key"].get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(where + ": missing or mistyped field (" + e.what() + ")");
    }
    detail::validate_example(ex, where);
    if (ex.type_key.empty()) ex.type_key = join_tokens(ex.tokens);
    if (!seen.insert(ex.id).second) throw FormatError(where + ": duplicate id '" + ex.id + "'");
    if (obj.contains("split")) {
      if (!obj["split"].is_string()) throw FormatError(where + ": 'split' must be a string");
      const auto split = obj["split"].get<std::string>();
      if (split != "train" && split != "test") {
        throw FormatError(where + ": split must be \"train\" or \"test\", got '" + split + "'");
      }
      ds.splits[split].push_back(ex.id);
    }
    ds.examples.push_back(std::move(ex));
  }
  if (ds.examples.empty()) throw FormatError(source + ": dataset is empty");
  ds.label_set = detail::sorted_labels(ds.examples);
  return ds;
}

inline ProbingDataset load_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open dataset file '" + path + "'");
  return parse_dataset(in, path);
}

inline void write_dataset(std::ostream& out, const ProbingDataset& ds) {
  std::unordered_map<std::string, std::string> split_of;
  for (const auto& [name, ids] : ds.splits) {
    for (const auto& id : ids) split_of[id] = name;
  }
  for (const auto& ex : ds.examples) {
    nlohmann::ordered_json obj;
    obj["id"] = ex.id;
    obj["tokens"] = ex.tokens;
    obj["label"] = ex.label;
    obj["type_key"] = ex.type_key;
    if (auto it = split_of.find(ex.id); it != split_of.end()) obj["split"] = it->second;
    out << obj.dump() << '\n';
  }
}

inline void save_dataset(const ProbingDataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write dataset file '" + path + "'");
  write_dataset(out, ds);
}

/// Drops every example whose label has fewer than `min_count` occurrences.
/// With splits present the count is taken per split and a label must reach
/// the threshold in every split; otherwise the count is global.
inline ProbingDataset filter_rare_labels(const ProbingDataset& ds, int min_count = 20) {
  if (min_count <= 0) throw Error("min_count must be positive");
  std::set<std::string> rare;
  if (ds.splits.empty()) {
    std::map<std::string, int> counts;
    for (const auto& ex : ds.examples) ++counts[ex.label];
    for (const auto& [label, n] : counts) {
      if (n < min_count) rare.insert(label);
    }
  } else {
    std::unordered_map<std::string, const ProbingExample*> by_id;
    for (const auto& ex : ds.examples) by_id[ex.id] = &ex;
    for (const auto& [name, ids] : ds.splits) {
      std::map<std::string, int> counts;
      for (const auto& label : ds.label_set) counts[label] = 0;
      for (const auto& id : ids) ++counts[by_id.at(id)->label];
      for (const auto& [label, n] : counts) {
        if (n < min_count) rare.insert(label);
      }
    }
  }

  ProbingDataset out;
  std::unordered_set<std::string> kept_ids;
  for (const auto& ex : ds.examples) {
    if (rare.contains(ex.label)) continue;
    out.examples.push_back(ex);
    kept_ids.insert(ex.id);
  }
  out.label_set = detail::sorted_labels(out.examples);
  if (out.label_set.size() < 2) {
    throw Error("fewer than 2 labels remain after filtering labels with fewer than " +
                std::to_string(min_count) + " examples");
  }
  for (const auto& [name, ids] : ds.splits) {
    auto& dst = out.splits[name];
    for (const auto& id : ids) {
      if (kept_ids.contains(id)) dst.push_back(id);
    }
  }
  return out;
}

/// Assigns whole type_keys to "train"/"test" so that the train share of
/// examples approaches `train_fraction`. Existing splits are replaced.
///
/// Types are shuffled with the seed, stably sorted by descending frequency,
/// then each goes to the split currently furthest below its quota (ties go
/// to train).
inline ProbingDataset split_by_type(const ProbingDataset& ds, double train_fraction = 0.65,
                                    std::uint64_t seed = 0) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw Error("train_fraction must lie in (0, 1)");
  }
  std::map<std::string, std::vector<std::string>> ids_by_type;
  for (const auto& ex : ds.examples) {
    if (ex.type_key.empty()) throw Error("example '" + ex.id + "' has no type_key");
    ids_by_type[ex.type_key].push_back(ex.id);
  }
  if (ids_by_type.size() < 2) throw Error("fewer than 2 distinct type_keys; cannot split");

  std::vector<const std::string*> types;
  types.reserve(ids_by_type.size());
  for (const auto& [key, ids] : ids_by_type) types.push_back(&key);
  rng::SplitMix64 gen(rng::mix(seed, 0x5b11c0deULL));
  gen.shuffle(types.begin(), types.end());
  std::stable_sort(types.begin(), types.end(), [&](const std::string* a, const std::string* b) {
    return ids_by_type.at(*a).size() > ids_by_type.at(*b).size();
  });

  const double n = static_cast<double>(ds.examples.size());
  const double quota_train = train_fraction * n;
  const double quota_test = n - quota_train;
  double n_train = 0.0;
  double n_test = 0.0;
  std::unordered_set<std::string> train_types;
  for (const auto* key : types) {
    const double size = static_cast<double>(ids_by_type.at(*key).size());
    if (quota_train - n_train >= quota_test - n_test) {
      train_types.insert(*key);
      n_train += size;
    } else {
      n_test += size;
    }
  }

  ProbingDataset out = ds;
  out.splits.clear();
  auto& train = out.splits["train"];
  auto& test = out.splits["test"];
  for (const auto& ex : ds.examples) {
    (train_types.contains(ex.type_key) ? train : test).push_back(ex.id);
  }
  return out;
}

}  // namespace evprobe
