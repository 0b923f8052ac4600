#include <algorithm>
#include <cmath>
#include <numbers>

#include "doctest.h"
#include "egrot/error.hpp"
#include "egrot/eval.hpp"

using namespace egrot;

namespace {

constexpr double kPi = std::numbers::pi;

model::ModelConfig micro_model() {
  model::ModelConfig c;
  c.d = 16;
  c.heads = 2;
  c.depth = 1;
  c.encoder_channels = {4, 8};
  c.rot_hidden = 16;
  c.head_hidden = 16;
  c.crop = 16;
  return c;
}

const Dataset& micro_data() {
  static const Dataset ds = [] {
    EpisodeSpec s;
    s.n_ref_pool = 12;
    s.n_query_pool = 4;
    s.crop = 16;
    return generate_dataset(3, s, 17);
  }();
  return ds;
}

// Dataset whose query rotations all appear in the reference pool.
Dataset nested_rotation_dataset() {
  Dataset ds;
  Rng rng(3);
  for (int o = 0; o < 2; ++o) {
    DatasetObject obj;
    obj.object.id = static_cast<std::uint64_t>(o);
    for (int i = 0; i < 10; ++i) obj.ref_pool.push_back({synth::Image(4, 4), so3::random_rotation(rng)});
    for (int i : {0, 3, 7}) obj.query_pool.push_back(obj.ref_pool[static_cast<std::size_t>(i)]);
    ds.objects.push_back(obj);
  }
  return ds;
}

}  // namespace

TEST_CASE("accuracy at a threshold") {
  const std::vector<double> mixed{0.0, 20.0};
  CHECK(eval::accuracy_at(mixed, 15.0) == 0.5);
  const std::vector<double> zeros(5, 0.0);
  CHECK(eval::accuracy_at(zeros, 15.0) == 1.0);
  const std::vector<double> boundary{15.0};
  CHECK(eval::accuracy_at(boundary, 15.0) == 1.0);
  CHECK_THROWS_AS(eval::accuracy_at(std::vector<double>{}, 15.0), EmptyInput);
}

TEST_CASE("accuracy is monotone in the threshold") {
  Rng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> e(20);
    for (auto& x : e) x = rng.uniform(0, 180);
    double prev = -1;
    for (double t = 0; t <= 180; t += 7.5) {
      const double a = eval::accuracy_at(e, t);
      CHECK(a >= prev);
      CHECK(a >= 0.0);
      CHECK(a <= 1.0);
      prev = a;
    }
  }
}

TEST_CASE("oracle copies the reference nearest the true rotation") {
  const std::vector<so3::RotationMatrix> refs{so3::RotationMatrix::identity(), so3::rot_z(kPi)};
  const std::vector<so3::RotationMatrix> q{so3::rot_z(so3::deg2rad(80))};
  const auto pick = eval::nearest_reference_oracle(refs, q);
  CHECK(so3::geodesic_angle(pick[0], refs[0]) == 0.0);
  CHECK(so3::rad2deg(so3::geodesic_angle(pick[0], q[0])) == doctest::Approx(80.0));

  // Query equal to a reference: exact copy.
  const std::vector<so3::RotationMatrix> same{refs[1]};
  CHECK(so3::geodesic_angle(eval::nearest_reference_oracle(refs, same)[0], refs[1]) == 0.0);

  CHECK_THROWS_AS(eval::nearest_reference_oracle({}, q), InsufficientReferences);
}

TEST_CASE("oracle ties go to the lowest index") {
  // Rz(+40) and Rz(-40) are both 40 degrees from I.
  const std::vector<so3::RotationMatrix> refs{so3::rot_z(so3::deg2rad(40)), so3::rot_z(so3::deg2rad(-40))};
  const std::vector<so3::RotationMatrix> q{so3::RotationMatrix::identity()};
  CHECK(eval::nearest_reference_oracle(refs, q)[0] == refs[0]);
}

TEST_CASE("oracle error equals the brute-force minimum distance") {
  Rng rng(12);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<so3::RotationMatrix> refs(8), qs(20);
    for (auto& r : refs) r = so3::random_rotation(rng);
    for (auto& q : qs) q = so3::random_rotation(rng);
    const auto picks = eval::nearest_reference_oracle(refs, qs);
    for (std::size_t i = 0; i < qs.size(); ++i) {
      double best = 1e9;
      for (const auto& r : refs) best = std::min(best, so3::geodesic_angle(r, qs[i]));
      CHECK(so3::geodesic_angle(picks[i], qs[i]) == doctest::Approx(best).epsilon(1e-12));
    }
  }
}

TEST_CASE("oracle is perfect when queries are among the references") {
  const auto ds = nested_rotation_dataset();
  const std::vector<double> thresholds{1e-6, 5, 15};
  const auto rep = eval::eval_oracle(ds, 10, thresholds);
  for (const auto& [t, a] : rep.accuracy) CHECK(a == 1.0);
  CHECK(rep.mean_error_deg < 1e-6);
}

TEST_CASE("model evaluation is deterministic and well formed") {
  model::Model<double> m(micro_model(), 1);
  const std::vector<double> thresholds{5, 10, 15, 30};
  const auto a = eval::eval_model(m, micro_data(), 6, thresholds);
  const auto b = eval::eval_model(m, micro_data(), 6, thresholds);
  REQUIRE(a.objects.size() == 3);
  for (std::size_t o = 0; o < a.objects.size(); ++o) CHECK(a.objects[o].errors_deg == b.objects[o].errors_deg);
  CHECK(a.accuracy == b.accuracy);
  CHECK(a.k_refs == 6);
  for (const auto& o : a.objects) {
    CHECK(o.errors_deg.size() == 4);
    for (double e : o.errors_deg) {
      CHECK(e >= 0.0);
      CHECK(e <= 180.0);
    }
  }
  CHECK(a.accuracy.at(5) <= a.accuracy.at(10));
  CHECK(a.accuracy.at(10) <= a.accuracy.at(15));
  CHECK(a.accuracy.at(15) <= a.accuracy.at(30));
  CHECK(a.timing.mean_ms > 0.0);
  CHECK(a.peak_rss_mb > 0.0);
}

TEST_CASE("reported errors match a direct prediction") {
  model::Model<double> m(micro_model(), 2);
  const std::vector<double> thresholds{15};
  const auto rep = eval::eval_model(m, micro_data(), 5, thresholds);
  const auto& obj = micro_data().objects[1];
  std::vector<so3::RotationMatrix> pool;
  for (const auto& v : obj.ref_pool) pool.push_back(v.rotation);
  model::EpisodeView ep;
  for (std::size_t i : so3::fps_select(pool, 5)) {
    ep.ref_images.push_back(&obj.ref_pool[i].image);
    ep.ref_rotations.push_back(obj.ref_pool[i].rotation);
  }
  for (const auto& q : obj.query_pool) ep.query_images.push_back(&q.image);
  const auto pred = model::predict_rotation(m, ep);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double direct = so3::rad2deg(so3::geodesic_angle(pred[i], obj.query_pool[i].rotation));
    CHECK(rep.objects[1].errors_deg[i] == doctest::Approx(direct).epsilon(1e-9));
  }
}

TEST_CASE("too many references requested") {
  model::Model<double> m(micro_model(), 1);
  const std::vector<double> thresholds{15};
  CHECK_THROWS_AS(eval::eval_model(m, micro_data(), 13, thresholds), InsufficientReferences);
  CHECK_THROWS_AS(eval::eval_oracle(micro_data(), 0, thresholds), InsufficientReferences);
}

TEST_CASE("sweeps have one row per value") {
  model::Model<float> m(micro_model(), 1);
  const std::vector<std::size_t> ks{4, 8, 12};
  const std::vector<double> thresholds{15};
  const auto rc = eval::refcount_sweep(m, micro_data(), ks, thresholds);
  CHECK(rc.rows.size() == 3);
  CHECK(rc.variable == "k");

  std::vector<synth::ProceduralObject> objects;
  for (const auto& o : micro_data().objects) objects.push_back(o.object);
  const std::vector<double> gaps{10, 20, 30, 40, 50};
  const auto sep = eval::separation_sweep(m, objects, gaps, 4, 1);
  REQUIRE(sep.rows.size() == 5);
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(sep.rows[i].variable == gaps[i]);
    CHECK(sep.rows[i].value >= 0.0);
    CHECK(sep.rows[i].value <= 180.0);
  }
  const auto csv = sep.to_csv();
  CHECK(csv.rfind("variable,metric,value\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 6);
}

TEST_CASE("latency table has one row per reference count") {
  model::Model<float> m(micro_model(), 1);
  const std::vector<std::size_t> refs{4, 16};
  const auto rows = eval::bench_latency(m, refs, 5, 2);
  REQUIRE(rows.size() == 2);
  for (const auto& r : rows) {
    CHECK(r.onboarding_ms > 0.0);
    CHECK(r.query_p50_ms > 0.0);
    CHECK(r.batch_ms > 0.0);
    CHECK(r.cached_query_p50_ms > 0.0);
    CHECK(r.query_p50_ms <= r.query_p95_ms);
  }
  const auto csv = eval::latency_csv(rows);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
}
