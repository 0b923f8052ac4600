#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "egrot/dataset.hpp"
#include "egrot/model.hpp"
#include "egrot/so3.hpp"

namespace egrot::eval {

// Fraction of errors at or below `threshold` (closed boundary). Throws EmptyInput.
double accuracy_at(std::span<const double> errors_deg, double threshold_deg);

// For each query, the reference rotation nearest (geodesically) to the query's
// ground truth; ties go to the lowest index. Throws InsufficientReferences.
std::vector<so3::RotationMatrix> nearest_reference_oracle(std::span<const so3::RotationMatrix> references,
                                                          std::span<const so3::RotationMatrix> queries);

struct ObjectResult {
  std::uint64_t object_id = 0;
  std::vector<double> errors_deg;  // one per query, in query order
  std::map<double, double> accuracy;
};

struct TimingStats {
  double onboarding_ms = 0;  // per object, references only
  double mean_ms = 0;        // per query
  double p50_ms = 0;
  double p95_ms = 0;
};

struct EvalReport {
  std::string method;  // "model" or "oracle"
  std::size_t k_refs = 0;
  std::vector<ObjectResult> objects;
  std::map<double, double> accuracy;  // averaged over objects
  double mean_error_deg = 0;
  double median_error_deg = 0;
  TimingStats timing;
  double peak_rss_mb = 0;
};

nlohmann::json to_json(const EvalReport& r);

// FPS-selects k references per object and predicts all queries in one pass.
// Throws InsufficientReferences when an object has fewer than k references.
template <typename T>
EvalReport eval_model(const model::Model<T>& model, const Dataset& data, std::size_t k,
                      std::span<const double> thresholds);

// The nearest-reference oracle on exactly the episodes eval_model uses.
EvalReport eval_oracle(const Dataset& data, std::size_t k, std::span<const double> thresholds);

struct SweepRow {
  double variable = 0;
  std::string metric;
  double value = 0;
};

struct SweepResult {
  std::string variable;  // "k" or "gap_deg"
  std::vector<SweepRow> rows;
  std::string to_csv() const;
};

// One row per (k, threshold): model accuracy.
template <typename T>
SweepResult refcount_sweep(const model::Model<T>& model, const Dataset& data, std::span<const std::size_t> ks,
                           std::span<const double> thresholds);

// Two references at azimuth +gap and -gap around a query at azimuth 0, all at
// the same elevation. Each trial draws a base orientation and cycles through
// the objects; reports the mean error per gap.
template <typename T>
SweepResult separation_sweep(const model::Model<T>& model, std::span<const synth::ProceduralObject> objects,
                             std::span<const double> gaps_deg, std::size_t trials, std::uint64_t seed,
                             synth::BackgroundPolicy background = synth::BackgroundPolicy::kBlack);

struct LatencyRow {
  std::size_t n_refs = 0;
  std::size_t n_queries = 0;
  double onboarding_ms = 0;         // encode + embed the references once
  double query_p50_ms = 0;          // one query, transformer over refs + query
  double query_mean_ms = 0;
  double query_p95_ms = 0;
  double batch_ms = 0;              // all n_queries in one pass
  double cached_query_p50_ms = 0;   // one query against cached keys/values
  double peak_rss_mb = 0;
};

// Onboarding is timed separately and excluded from the per-query numbers.
// Each configuration runs 3 warm-up passes before `repeats` timed ones.
template <typename T>
std::vector<LatencyRow> bench_latency(const model::Model<T>& model, std::span<const std::size_t> n_refs,
                                      std::size_t n_queries, std::size_t repeats, std::uint64_t seed = 1);

std::string latency_csv(std::span<const LatencyRow> rows);

// Process peak resident set size in MB.
double peak_rss_mb();

}  // namespace egrot::eval
