#pragma once

// Representations: maps from token sequences to fixed-size real vectors,
// materialized as a design matrix over a dataset.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "evprobe/dataset.hpp"
#include "evprobe/error.hpp"
#include "evprobe/random.hpp"

namespace evprobe {

enum class RepresentationKind { file, random, word_identity };
enum class Pooling { mean, first };
enum class MissingTokenPolicy { word_identity, zeros, error };

inline constexpr int kDefaultRepresentationDim = 768;

struct RepresentationSpec {
  RepresentationKind kind = RepresentationKind::random;
  int dim = kDefaultRepresentationDim;
  std::uint64_t seed = 0;
  std::string source_path;
  Pooling pooling = Pooling::mean;
  MissingTokenPolicy missing = MissingTokenPolicy::word_identity;

  void validate() const {
    if (dim <= 0) throw Error("representation dim must be positive");
    if (kind == RepresentationKind::file && source_path.empty()) {
      throw Error("file representation requires source_path");
    }
  }

  std::string canonical() const {
    std::ostringstream os;
    os << "kind=" << static_cast<int>(kind) << ";dim=" << dim << ";seed=" << seed
       << ";source=" << source_path << ";pool=" << static_cast<int>(pooling)
       << ";missing=" << static_cast<int>(missing);
    return os.str();
  }

  std::uint64_t fingerprint() const { return rng::fnv1a64(canonical()); }
};

struct DesignMatrix {
  Eigen::MatrixXd rows;  // N x D
  std::vector<std::string> row_ids;
  std::uint64_t rep_fingerprint = 0;

  Eigen::Index size() const { return rows.rows(); }
  Eigen::Index dim() const { return rows.cols(); }
};

/// Word-vector table. Immutable after loading.
struct EmbeddingTable {
  int dim = 0;
  std::unordered_map<std::string, Eigen::VectorXd> vectors;
  std::size_t duplicate_count = 0;
  std::size_t header_rows = 0;  // row count announced by the header
  std::size_t rows_read = 0;

  const Eigen::VectorXd* find(const std::string& token) const {
    auto it = vectors.find(token);
    return it == vectors.end() ? nullptr : &it->second;
  }
};

/// Reads the "N D" header followed by rows of "token v1 ... vD" up to end of
/// input. The announced N is kept in header_rows but not enforced, since
/// truncated or hand-edited files are common. Duplicate tokens: last one
/// wins, counted in duplicate_count.
inline EmbeddingTable parse_embedding_table(std::istream& in, const std::string& source = "<stream>") {
  EmbeddingTable table;
  std::string line;
  if (!std::getline(in, line)) throw FormatError(source + ": missing header");
  long long n_rows = 0;
  long long dim = 0;
  {
    std::istringstream hs(line);
    std::string extra;
    if (!(hs >> n_rows >> dim) || (hs >> extra) || n_rows < 0 || dim <= 0) {
      throw FormatError(source + ":1: header must be two integers \"N D\"");
    }
  }
  table.dim = static_cast<int>(dim);
  table.header_rows = static_cast<std::size_t>(n_rows);
  table.vectors.reserve(static_cast<std::size_t>(std::min<long long>(n_rows, 1 << 20)));
  long long read = 0;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::istringstream rs(line);
    std::string token;
    rs >> token;
    Eigen::VectorXd v(dim);
    long long k = 0;
    std::string field;
    while (rs >> field) {
      if (k >= dim) {
        throw FormatError(source + ":" + std::to_string(lineno) + ": row " +
                          std::to_string(read + 1) + " has more than " + std::to_string(dim) +
                          " values");
      }
      char* end = nullptr;
      const double x = std::strtod(field.c_str(), &end);
      if (end != field.c_str() + field.size()) {
        throw FormatError(source + ":" + std::to_string(lineno) + ": bad number '" + field + "'");
      }
      if (!std::isfinite(x)) {
        throw FormatError(source + ":" + std::to_string(lineno) + ": non-finite value in row " +
                          std::to_string(read + 1));
      }
      v[k++] = x;
    }
    if (k != dim) {
      throw FormatError(source + ":" + std::to_string(lineno) + ": row " + std::to_string(read + 1) +
                        " has " + std::to_string(k) + " values, expected " + std::to_string(dim));
    }
    auto [it, inserted] = table.vectors.insert_or_assign(std::move(token), std::move(v));
    if (!inserted) ++table.duplicate_count;
    ++read;
  }
  table.rows_read = static_cast<std::size_t>(read);
  return table;
}

inline EmbeddingTable load_embedding_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open embedding file '" + path + "'");
  return parse_embedding_table(in, path);
}

/// Writes the table in the same text format, tokens in sorted order and
/// values with round-trip precision.
inline void write_embedding_table(std::ostream& out, const EmbeddingTable& table) {
  std::vector<const std::string*> tokens;
  tokens.reserve(table.vectors.size());
  for (const auto& [token, v] : table.vectors) tokens.push_back(&token);
  std::sort(tokens.begin(), tokens.end(), [](const auto* a, const auto* b) { return *a < *b; });
  out << tokens.size() << ' ' << table.dim << '\n';
  out.precision(17);
  for (const auto* token : tokens) {
    out << *token;
    for (double x : table.vectors.at(*token)) out << ' ' << x;
    out << '\n';
  }
}

/// Standard-normal row for index `k`; depends only on (seed, k, dim).
inline Eigen::VectorXd random_row(std::uint64_t seed, std::uint64_t k, int dim) {
  const std::uint64_t key = rng::mix(rng::mix(seed, 0x72616e64ULL), k);
  Eigen::VectorXd row(dim);
  for (int j = 0; j < dim; ++j) row[j] = rng::counter_normal(key, static_cast<std::uint64_t>(j));
  return row;
}

/// n i.i.d. standard-normal rows; row k is random_row(seed, k, dim).
inline Eigen::MatrixXd random_rows(std::uint64_t seed, Eigen::Index n, int dim) {
  Eigen::MatrixXd out(n, dim);
  for (Eigen::Index k = 0; k < n; ++k) {
    out.row(k) = random_row(seed, static_cast<std::uint64_t>(k), dim).transpose();
  }
  return out;
}

inline Eigen::VectorXd word_identity_row(std::uint64_t seed, const std::string& token, int dim) {
  const std::uint64_t key = rng::mix(rng::mix(seed, 0x776f7264ULL), rng::fnv1a64(token));
  Eigen::VectorXd row(dim);
  for (int j = 0; j < dim; ++j) row[j] = rng::counter_normal(key, static_cast<std::uint64_t>(j));
  return row;
}

namespace detail {

inline Eigen::VectorXd token_vector(const RepresentationSpec& spec, const EmbeddingTable* table,
                                    const std::string& token) {
  switch (spec.kind) {
    case RepresentationKind::word_identity:
      return word_identity_row(spec.seed, token, spec.dim);
    case RepresentationKind::file: {
      if (const auto* v = table->find(token)) return *v;
      switch (spec.missing) {
        case MissingTokenPolicy::word_identity:
          return word_identity_row(spec.seed, token, spec.dim);
        case MissingTokenPolicy::zeros:
          return Eigen::VectorXd::Zero(spec.dim);
        case MissingTokenPolicy::error:
          throw Error("token '" + token + "' not in embedding table " + spec.source_path);
      }
      break;
    }
    case RepresentationKind::random:
      break;
  }
  throw Error("token_vector: unsupported representation kind");
}

}  // namespace detail

/// Builds the design matrix for `ds`. For the file kind, `table` must be
/// the loaded table of spec.source_path (see the overload below).
inline DesignMatrix embed_dataset(const RepresentationSpec& spec, const ProbingDataset& ds,
                                  const EmbeddingTable* table) {
  spec.validate();
  if (spec.kind == RepresentationKind::file) {
    if (table == nullptr) throw Error("file representation requires an embedding table");
    if (table->dim != spec.dim) {
      throw Error("embedding dimension " + std::to_string(table->dim) +
                  " does not match representation dim " + std::to_string(spec.dim));
    }
  }
  DesignMatrix out;
  out.rows.resize(static_cast<Eigen::Index>(ds.size()), spec.dim);
  out.row_ids.reserve(ds.size());
  out.rep_fingerprint = spec.fingerprint();
  for (std::size_t n = 0; n < ds.size(); ++n) {
    const auto& ex = ds.examples[n];
    const auto row = static_cast<Eigen::Index>(n);
    if (spec.kind == RepresentationKind::random) {
      // Per data point, keyed by id so rows do not move when the dataset is reordered.
      out.rows.row(row) = random_row(spec.seed, rng::fnv1a64(ex.id), spec.dim).transpose();
    } else if (spec.pooling == Pooling::first) {
      out.rows.row(row) = detail::token_vector(spec, table, ex.tokens.front()).transpose();
    } else {
      // Running mean: k copies of the same vector pool to that vector exactly.
      Eigen::VectorXd mean = detail::token_vector(spec, table, ex.tokens.front());
      for (std::size_t k = 1; k < ex.tokens.size(); ++k) {
        mean += (detail::token_vector(spec, table, ex.tokens[k]) - mean) / static_cast<double>(k + 1);
      }
      out.rows.row(row) = mean.transpose();
    }
    out.row_ids.push_back(ex.id);
  }
  return out;
}

inline DesignMatrix embed_dataset(const RepresentationSpec& spec, const ProbingDataset& ds) {
  if (spec.kind == RepresentationKind::file) {
    spec.validate();
    const auto table = load_embedding_file(spec.source_path);
    return embed_dataset(spec, ds, &table);
  }
  return embed_dataset(spec, ds, nullptr);
}

}  // namespace evprobe
