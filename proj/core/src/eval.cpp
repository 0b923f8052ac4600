#include "egrot/eval.hpp"

#include <sys/resource.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>

#include "egrot/error.hpp"

namespace egrot::eval {

namespace {

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

double percentile(std::vector<double> v, double q) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

double mean(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

std::vector<so3::RotationMatrix> rotations_of(const std::vector<synth::View>& views) {
  std::vector<so3::RotationMatrix> out;
  for (const auto& v : views) out.push_back(v.rotation);
  return out;
}

std::vector<std::size_t> select_references(const DatasetObject& obj, std::size_t k) {
  if (k < 1 || k > obj.ref_pool.size()) {
    throw InsufficientReferences("object " + std::to_string(obj.object.id) + " has " +
                                 std::to_string(obj.ref_pool.size()) + " references, " + std::to_string(k) +
                                 " requested");
  }
  return so3::fps_select(rotations_of(obj.ref_pool), k);
}

ObjectResult score_object(std::uint64_t id, const std::vector<so3::RotationMatrix>& predicted,
                          const std::vector<synth::View>& queries, std::span<const double> thresholds) {
  ObjectResult r;
  r.object_id = id;
  for (std::size_t i = 0; i < queries.size(); ++i) {
    r.errors_deg.push_back(so3::rad2deg(so3::geodesic_angle(predicted[i], queries[i].rotation)));
  }
  for (double t : thresholds) r.accuracy[t] = accuracy_at(r.errors_deg, t);
  return r;
}

void aggregate(EvalReport& rep, std::span<const double> thresholds) {
  std::vector<double> all;
  for (const auto& o : rep.objects) all.insert(all.end(), o.errors_deg.begin(), o.errors_deg.end());
  for (double t : thresholds) {
    double s = 0;
    for (const auto& o : rep.objects) s += o.accuracy.at(t);
    rep.accuracy[t] = rep.objects.empty() ? 0.0 : s / static_cast<double>(rep.objects.size());
  }
  rep.mean_error_deg = mean(all);
  rep.median_error_deg = percentile(all, 0.5);
  rep.peak_rss_mb = peak_rss_mb();
}

}  // namespace

double accuracy_at(std::span<const double> errors_deg, double threshold_deg) {
  if (errors_deg.empty()) throw EmptyInput("accuracy_at: no errors");
  const auto hits = std::count_if(errors_deg.begin(), errors_deg.end(), [&](double e) { return e <= threshold_deg; });
  return static_cast<double>(hits) / static_cast<double>(errors_deg.size());
}

std::vector<so3::RotationMatrix> nearest_reference_oracle(std::span<const so3::RotationMatrix> references,
                                                          std::span<const so3::RotationMatrix> queries) {
  if (references.empty()) throw InsufficientReferences("nearest_reference_oracle: no references");
  std::vector<so3::RotationMatrix> out;
  for (const auto& q : queries) {
    std::size_t best = 0;
    double best_angle = so3::geodesic_angle(references[0], q);
    for (std::size_t i = 1; i < references.size(); ++i) {
      const double a = so3::geodesic_angle(references[i], q);
      if (a < best_angle) {
        best_angle = a;
        best = i;
      }
    }
    out.push_back(references[best]);
  }
  return out;
}

nlohmann::json to_json(const EvalReport& r) {
  auto acc_json = [](const std::map<double, double>& m) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& [t, a] : m) j.push_back({{"threshold_deg", t}, {"accuracy", a}});
    return j;
  };
  nlohmann::json objects = nlohmann::json::array();
  for (const auto& o : r.objects) {
    objects.push_back({{"object_id", o.object_id}, {"errors_deg", o.errors_deg}, {"accuracy", acc_json(o.accuracy)}});
  }
  return {{"method", r.method},
          {"k_refs", r.k_refs},
          {"accuracy", acc_json(r.accuracy)},
          {"mean_error_deg", r.mean_error_deg},
          {"median_error_deg", r.median_error_deg},
          {"timing",
           {{"onboarding_ms", r.timing.onboarding_ms},
            {"query_mean_ms", r.timing.mean_ms},
            {"query_p50_ms", r.timing.p50_ms},
            {"query_p95_ms", r.timing.p95_ms}}},
          {"peak_rss_mb", r.peak_rss_mb},
          {"objects", objects}};
}

template <typename T>
EvalReport eval_model(const model::Model<T>& model, const Dataset& data, std::size_t k,
                      std::span<const double> thresholds) {
  EvalReport rep;
  rep.method = "model";
  rep.k_refs = k;
  std::vector<double> onboarding, per_query;
  for (const auto& obj : data.objects) {
    const auto picks = select_references(obj, k);
    std::vector<const synth::Image*> ref_images, query_images;
    std::vector<so3::RotationMatrix> ref_rots;
    for (std::size_t i : picks) {
      ref_images.push_back(&obj.ref_pool[i].image);
      ref_rots.push_back(obj.ref_pool[i].rotation);
    }
    for (const auto& q : obj.query_pool) query_images.push_back(&q.image);
    if (query_images.empty()) continue;
    auto t0 = Clock::now();
    const auto cache = model.onboard(ref_images, ref_rots, false);
    onboarding.push_back(elapsed_ms(t0));
    t0 = Clock::now();
    const auto pred = model::project_predictions(model.predict_rot6d_onboarded(cache, query_images));
    per_query.push_back(elapsed_ms(t0) / static_cast<double>(query_images.size()));
    rep.objects.push_back(score_object(obj.object.id, pred, obj.query_pool, thresholds));
  }
  if (rep.objects.empty()) throw EmptyInput("eval_model: dataset has no queries");
  aggregate(rep, thresholds);
  rep.timing = {mean(onboarding), mean(per_query), percentile(per_query, 0.5), percentile(per_query, 0.95)};
  return rep;
}

EvalReport eval_oracle(const Dataset& data, std::size_t k, std::span<const double> thresholds) {
  EvalReport rep;
  rep.method = "oracle";
  rep.k_refs = k;
  for (const auto& obj : data.objects) {
    const auto picks = select_references(obj, k);
    std::vector<so3::RotationMatrix> refs;
    for (std::size_t i : picks) refs.push_back(obj.ref_pool[i].rotation);
    if (obj.query_pool.empty()) continue;
    const auto pred = nearest_reference_oracle(refs, rotations_of(obj.query_pool));
    rep.objects.push_back(score_object(obj.object.id, pred, obj.query_pool, thresholds));
  }
  if (rep.objects.empty()) throw EmptyInput("eval_oracle: dataset has no queries");
  aggregate(rep, thresholds);
  return rep;
}

std::string SweepResult::to_csv() const {
  std::ostringstream out;
  out.precision(10);
  out << "variable,metric,value\n";
  for (const auto& r : rows) out << r.variable << ',' << r.metric << ',' << r.value << '\n';
  return out.str();
}

template <typename T>
SweepResult refcount_sweep(const model::Model<T>& model, const Dataset& data, std::span<const std::size_t> ks,
                           std::span<const double> thresholds) {
  SweepResult res;
  res.variable = "k";
  for (std::size_t k : ks) {
    const auto rep = eval_model(model, data, k, thresholds);
    for (const auto& [t, a] : rep.accuracy) {
      std::ostringstream name;
      name << "acc@" << t;
      res.rows.push_back({static_cast<double>(k), name.str(), a});
    }
  }
  return res;
}

template <typename T>
SweepResult separation_sweep(const model::Model<T>& model, std::span<const synth::ProceduralObject> objects,
                             std::span<const double> gaps_deg, std::size_t trials, std::uint64_t seed,
                             synth::BackgroundPolicy background) {
  if (objects.empty()) throw EmptyInput("separation_sweep: no objects");
  SweepResult res;
  res.variable = "gap_deg";
  const int crop = model.config().crop;
  std::vector<std::vector<double>> errors(gaps_deg.size());
  for (std::size_t t = 0; t < trials; ++t) {
    Rng rng(derive_seed({seed, t}));
    const auto& obj = objects[t % objects.size()];
    const so3::RotationMatrix base = so3::random_rotation(rng);
    auto bg = [&] {
      switch (background) {
        case synth::BackgroundPolicy::kBlack:
          return synth::BackgroundSpec::solid({0, 0, 0});
        case synth::BackgroundPolicy::kRandomSolid:
          return synth::BackgroundSpec::solid({rng.uniform(), rng.uniform(), rng.uniform()});
        case synth::BackgroundPolicy::kNoise:
          break;
      }
      return synth::BackgroundSpec::noise(rng.next_u64());
    };
    const synth::Image query = synth::render(obj, base, crop, bg());
    for (std::size_t g = 0; g < gaps_deg.size(); ++g) {
      // Azimuth turns the object about the camera's vertical axis, which
      // leaves the elevation unchanged.
      const double a = so3::deg2rad(gaps_deg[g]);
      const so3::RotationMatrix left = so3::rot_y(-a) * base, right = so3::rot_y(a) * base;
      const synth::Image li = synth::render(obj, left, crop, bg());
      const synth::Image ri = synth::render(obj, right, crop, bg());
      model::EpisodeView ep{{&li, &ri}, {left, right}, {&query}};
      const auto pred = model::predict_rotation(model, ep);
      errors[g].push_back(so3::rad2deg(so3::geodesic_angle(pred[0], base)));
    }
  }
  for (std::size_t g = 0; g < gaps_deg.size(); ++g) {
    res.rows.push_back({gaps_deg[g], "mean_error_deg", mean(errors[g])});
  }
  return res;
}

template <typename T>
std::vector<LatencyRow> bench_latency(const model::Model<T>& model, std::span<const std::size_t> n_refs,
                                      std::size_t n_queries, std::size_t repeats, std::uint64_t seed) {
  if (n_queries < 1 || repeats < 1) throw BadCount("bench_latency: n_queries and repeats must be >= 1");
  const int crop = model.config().crop;
  const auto obj = synth::generate_object(seed);
  Rng rng(derive_seed({seed, 1}));
  std::vector<LatencyRow> rows;
  for (std::size_t nr : n_refs) {
    if (nr < 1) throw BadCount("bench_latency: reference counts must be >= 1");
    std::vector<synth::Image> refs, queries;
    std::vector<so3::RotationMatrix> ref_rots;
    for (std::size_t i = 0; i < nr; ++i) {
      ref_rots.push_back(so3::random_rotation(rng));
      refs.push_back(synth::render(obj, ref_rots.back(), crop, synth::BackgroundSpec::solid({0, 0, 0})));
    }
    for (std::size_t i = 0; i < n_queries; ++i) {
      queries.push_back(synth::render(obj, so3::random_rotation(rng), crop, synth::BackgroundSpec::solid({0, 0, 0})));
    }
    std::vector<const synth::Image*> ref_ptrs, query_ptrs;
    for (const auto& r : refs) ref_ptrs.push_back(&r);
    for (const auto& q : queries) query_ptrs.push_back(&q);
    const std::span<const synth::Image* const> one(query_ptrs.data(), 1);

    LatencyRow row;
    row.n_refs = nr;
    row.n_queries = n_queries;
    std::vector<double> onboard_ms, query_ms, batch_ms, cached_ms;
    const bool kv = model.config().attention == ag::AttentionMask::kBlocked;
    for (std::size_t rep = 0; rep < repeats + 3; ++rep) {
      const bool timed = rep >= 3;
      auto t0 = Clock::now();
      const auto cache = model.onboard(ref_ptrs, ref_rots, kv);
      const double ob = elapsed_ms(t0);
      t0 = Clock::now();
      model.predict_rot6d_onboarded(cache, one);
      const double q1 = elapsed_ms(t0);
      t0 = Clock::now();
      model.predict_rot6d_onboarded(cache, query_ptrs);
      const double qb = elapsed_ms(t0);
      double qc = 0;
      if (kv) {
        t0 = Clock::now();
        model.predict_rot6d_cached(cache, one);
        qc = elapsed_ms(t0);
      }
      if (timed) {
        onboard_ms.push_back(ob);
        query_ms.push_back(q1);
        batch_ms.push_back(qb);
        cached_ms.push_back(qc);
      }
    }
    row.onboarding_ms = percentile(onboard_ms, 0.5);
    row.query_p50_ms = percentile(query_ms, 0.5);
    row.query_mean_ms = mean(query_ms);
    row.query_p95_ms = percentile(query_ms, 0.95);
    row.batch_ms = percentile(batch_ms, 0.5);
    row.cached_query_p50_ms = percentile(cached_ms, 0.5);
    row.peak_rss_mb = peak_rss_mb();
    rows.push_back(row);
  }
  return rows;
}

std::string latency_csv(std::span<const LatencyRow> rows) {
  std::ostringstream out;
  out.precision(6);
  out << "n_refs,n_queries,onboarding_ms,query_p50_ms,query_mean_ms,query_p95_ms,batch_ms,cached_query_p50_ms,"
         "peak_rss_mb\n";
  for (const auto& r : rows) {
    out << r.n_refs << ',' << r.n_queries << ',' << r.onboarding_ms << ',' << r.query_p50_ms << ','
        << r.query_mean_ms << ',' << r.query_p95_ms << ',' << r.batch_ms << ',' << r.cached_query_p50_ms << ','
        << r.peak_rss_mb << '\n';
  }
  return out.str();
}

double peak_rss_mb() {
  rusage usage{};
  getrusage(RUSAGE_SELF, &usage);
  return static_cast<double>(usage.ru_maxrss) / 1024.0;  // kilobytes on Linux
}

#define EGROT_INSTANTIATE_EVAL(T)                                                                                \
  template EvalReport eval_model(const model::Model<T>&, const Dataset&, std::size_t, std::span<const double>); \
  template SweepResult refcount_sweep(const model::Model<T>&, const Dataset&, std::span<const std::size_t>,     \
                                      std::span<const double>);                                                  \
  template SweepResult separation_sweep(const model::Model<T>&, std::span<const synth::ProceduralObject>,       \
                                        std::span<const double>, std::size_t, std::uint64_t,                     \
                                        synth::BackgroundPolicy);                                                \
  template std::vector<LatencyRow> bench_latency(const model::Model<T>&, std::span<const std::size_t>,         \
                                                 std::size_t, std::size_t, std::uint64_t);

EGROT_INSTANTIATE_EVAL(float)
EGROT_INSTANTIATE_EVAL(double)

#undef EGROT_INSTANTIATE_EVAL

}  // namespace egrot::eval
