#pragma once

// PredictionTrace: the per-layer class distributions for one sample, plus the
// normalized entropy and argmax derived from each row. Traces are the only
// input the exit-policy engine sees, and the JSONL file format is the
// boundary between the model and everything downstream of it.

#include <cmath>
#include <cstddef>
#include <fstream>
#include <iomanip>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "epee/entropy.hpp"
#include "epee/errors.hpp"
#include "epee/tensor.hpp"

namespace epee {

using ClassIndex = std::size_t;

struct PredictionTrace {
  std::string sample_id;
  ClassIndex gold = 0;
  Matrix probs;                     // num_layers x num_classes
  std::vector<double> entropy;      // per layer, in [0, 1]
  std::vector<ClassIndex> argmax;   // per layer, ties to the lowest class

  std::size_t num_layers() const { return probs.rows(); }
  std::size_t num_classes() const { return probs.cols(); }

  /// 1-based layer accessors.
  double entropy_at(std::size_t layer) const { return entropy[layer - 1]; }
  ClassIndex argmax_at(std::size_t layer) const { return argmax[layer - 1]; }

  friend bool operator==(const PredictionTrace&, const PredictionTrace&) = default;
};

/// Builds a trace from raw per-layer distributions, deriving entropy and argmax.
inline PredictionTrace make_trace(std::string sample_id, ClassIndex gold, Matrix probs) {
  PredictionTrace t;
  t.sample_id = std::move(sample_id);
  t.gold = gold;
  t.probs = std::move(probs);
  t.entropy.reserve(t.probs.rows());
  t.argmax.reserve(t.probs.rows());
  for (std::size_t m = 0; m < t.probs.rows(); ++m) {
    t.entropy.push_back(normalized_entropy(t.probs.row(m)));
    t.argmax.push_back(epee::argmax(t.probs.row(m)));
  }
  return t;
}

/// Checks every trace invariant; throws InputError describing the first violation.
inline void validate_trace(const PredictionTrace& t) {
  const std::size_t layers = t.num_layers();
  const std::size_t classes = t.num_classes();
  if (layers == 0) throw InputError("trace " + t.sample_id + ": no layers");
  if (classes < 2) throw InputError("trace " + t.sample_id + ": fewer than 2 classes");
  if (t.entropy.size() != layers || t.argmax.size() != layers) {
    throw InputError("trace " + t.sample_id + ": entropy/argmax length does not match " +
                     std::to_string(layers) + " layers");
  }
  if (t.gold >= classes) throw InputError("trace " + t.sample_id + ": gold label out of range");
  for (std::size_t m = 0; m < layers; ++m) {
    const auto row = t.probs.row(m);
    double total = 0.0;
    for (double p : row) {
      if (!std::isfinite(p) || p < 0.0) {
        throw InputError("trace " + t.sample_id + ": layer " + std::to_string(m + 1) +
                         " has an invalid probability");
      }
      total += p;
    }
    if (std::abs(total - 1.0) > 1e-6) {
      std::ostringstream msg;
      msg << "trace " << t.sample_id << ": layer " << m + 1 << " sums to " << std::setprecision(12) << total;
      throw InputError(msg.str());
    }
    const double h = t.entropy[m];
    if (!(h >= 0.0 && h <= 1.0)) {
      throw InputError("trace " + t.sample_id + ": layer " + std::to_string(m + 1) + " entropy outside [0, 1]");
    }
    if (std::abs(h - normalized_entropy(row)) > 1e-6) {
      throw InputError("trace " + t.sample_id + ": layer " + std::to_string(m + 1) +
                       " entropy disagrees with its distribution");
    }
    if (t.argmax[m] != epee::argmax(row)) {
      throw InputError("trace " + t.sample_id + ": layer " + std::to_string(m + 1) +
                       " argmax disagrees with its distribution");
    }
  }
}

inline nlohmann::json trace_to_json(const PredictionTrace& t) {
  nlohmann::json probs = nlohmann::json::array();
  for (std::size_t m = 0; m < t.num_layers(); ++m) {
    const auto row = t.probs.row(m);
    probs.push_back(std::vector<double>(row.begin(), row.end()));
  }
  return {{"sample_id", t.sample_id}, {"gold", t.gold},       {"probs", std::move(probs)},
          {"entropy", t.entropy},     {"argmax", t.argmax}};
}

/// Parses and validates one trace object.
inline PredictionTrace trace_from_json(const nlohmann::json& j) {
  for (const char* key : {"sample_id", "gold", "probs", "entropy", "argmax"}) {
    if (!j.contains(key)) throw InputError(std::string("missing key \"") + key + "\"");
  }
  PredictionTrace t;
  try {
    t.sample_id = j.at("sample_id").get<std::string>();
    const auto gold = j.at("gold").get<long long>();
    if (gold < 0) throw InputError("negative gold label");
    t.gold = static_cast<ClassIndex>(gold);
    const auto& rows = j.at("probs");
    if (!rows.is_array() || rows.empty()) throw InputError("\"probs\" must be a nonempty array");
    const std::size_t classes = rows.front().size();
    std::vector<double> flat;
    for (const auto& r : rows) {
      if (!r.is_array() || r.size() != classes) throw InputError("\"probs\" rows have unequal lengths");
      for (const auto& v : r) flat.push_back(v.get<double>());
    }
    t.probs = Matrix(rows.size(), classes, std::move(flat));
    t.entropy = j.at("entropy").get<std::vector<double>>();
    for (const auto& a : j.at("argmax")) {
      const auto v = a.get<long long>();
      if (v < 0) throw InputError("negative argmax");
      t.argmax.push_back(static_cast<ClassIndex>(v));
    }
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("malformed trace: ") + e.what());
  }
  validate_trace(t);
  return t;
}

inline void write_traces(std::ostream& out, const std::vector<PredictionTrace>& traces) {
  for (const auto& t : traces) out << trace_to_json(t).dump() << '\n';
}

/// Reads a JSONL trace stream. Errors carry the 1-based line number; all
/// traces must share layer and class counts.
inline std::vector<PredictionTrace> read_traces(std::istream& in, const std::string& source = "<stream>") {
  std::vector<PredictionTrace> traces;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      PredictionTrace t = trace_from_json(nlohmann::json::parse(line));
      if (!traces.empty() && (t.num_layers() != traces.front().num_layers() ||
                              t.num_classes() != traces.front().num_classes())) {
        throw InputError("shape " + t.probs.shape() + " differs from first trace " + traces.front().probs.shape());
      }
      traces.push_back(std::move(t));
    } catch (const nlohmann::json::exception& e) {
      throw InputError(source + ":" + std::to_string(line_no) + ": invalid JSON: " + e.what());
    } catch (const InputError& e) {
      throw InputError(source + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (traces.empty()) throw InputError(source + ": no traces");
  return traces;
}

inline std::vector<PredictionTrace> read_traces_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open trace file " + path);
  return read_traces(in, path);
}

inline void write_traces_file(const std::string& path, const std::vector<PredictionTrace>& traces) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write trace file " + path);
  write_traces(out, traces);
  if (!out) throw InputError("write failed for trace file " + path);
}

}  // namespace epee
