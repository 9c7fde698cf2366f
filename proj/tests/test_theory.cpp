#include <doctest.h>

#include <cmath>

#include "rinv/errors.hpp"
#include "rinv/theory.hpp"
#include "test_support.hpp"

using namespace rinv;

namespace {

double dot(const Vec& a, const Vec& b) {
  double s = 0;
  for (std::size_t k = 0; k < a.size(); ++k) s += a[k] * b[k];
  return s;
}

// Direct, unshifted evaluation of -<x, R_i> + tau log sum_j exp(<x, R_j>/tau).
double f_direct(const Vec& x, std::size_t i, const EmbeddingSet& set) {
  long double h = 0;
  for (std::size_t j = 0; j < set.size(); ++j) h += std::exp(static_cast<long double>(dot(x, set.row(j))) / set.tau());
  return static_cast<double>(-static_cast<long double>(dot(x, set.row(i))) + set.tau() * std::log(h));
}

// A random orthogonal matrix from QR-free Gram-Schmidt on Gaussian columns.
std::vector<Vec> random_rotation(std::size_t d, RngStream& rng) {
  std::vector<Vec> q;
  while (q.size() < d) {
    Vec v(d);
    for (auto& x : v) x = rng.standard_normal();
    for (const auto& b : q) {
      const double r = dot(v, b);
      for (std::size_t k = 0; k < d; ++k) v[k] -= r * b[k];
    }
    const double n = std::sqrt(dot(v, v));
    for (auto& x : v) x /= n;
    q.push_back(v);
  }
  return q;
}

Vec rotate(const std::vector<Vec>& q, const Vec& x) {
  Vec y(x.size());
  for (std::size_t r = 0; r < q.size(); ++r) y[r] = dot(q[r], x);
  return y;
}

EmbeddingSet rotate_set(const std::vector<Vec>& q, const EmbeddingSet& set) {
  std::vector<double> flat;
  for (std::size_t i = 0; i < set.size(); ++i) {
    auto r = rotate(q, set.row(i));
    flat.insert(flat.end(), r.begin(), r.end());
  }
  return EmbeddingSet(Tensor<double>::from_data({set.size(), set.dim()}, flat), set.tau());
}

EmbeddingSet from_rows(const std::vector<Vec>& rows, double tau) {
  std::vector<double> flat;
  for (const auto& r : rows) flat.insert(flat.end(), r.begin(), r.end());
  return EmbeddingSet(Tensor<double>::from_data({rows.size(), rows[0].size()}, flat), tau);
}

}  // namespace

TEST_CASE("embedding set contract") {
  CHECK_THROWS_AS(EmbeddingSet(Tensor<double>::from_data({1, 2}, {1.0, 0.1}), 1.0), ContractError);
  CHECK_THROWS_AS(EmbeddingSet(Tensor<double>::from_data({1, 2}, {1.0, 0.0}), 0.0), DomainError);
  CHECK(antipodal_pair(3, 1.0).balanced());
  for (std::size_t n = 2; n <= 8; ++n) {
    auto s = regular_simplex(n, n - 1, 0.5);
    CHECK(s.balanced());
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) CHECK(std::abs(dot(s.row(i), s.row(j)) + 1.0 / (n - 1)) < 1e-12);
  }
  CHECK(regular_simplex(4, 6, 0.5).dim() == 6);
  CHECK_THROWS_AS(regular_simplex(5, 3, 0.5), DomainError);
}

TEST_CASE("h_r") {
  auto single = from_rows({{0.6, 0.8}}, 0.5);
  CHECK(h_r({0.6, 0.8}, single) == doctest::Approx(std::exp(2.0)).epsilon(1e-14));
  auto set = from_rows({{1, 0, 0}, {0, 1, 0}, {-1, 0, 0}}, 0.3);
  CHECK(h_r({0, 0, 1}, set) == doctest::Approx(3.0).epsilon(1e-14));

  RngStream rng(1, "hr");
  auto rows = rinv::testing::random_unit_rows(9, 5, rng);
  EmbeddingSet rs(rows, 0.2);
  for (int t = 0; t < 20; ++t) {
    const Vec x = random_unit_vector(5, rng);
    long double h = 0;
    for (std::size_t j = 0; j < 9; ++j) h += std::exp(static_cast<long double>(dot(x, rs.row(j))) / 0.2L);
    CHECK(std::abs(log_h_r(x, rs) - static_cast<double>(std::log(h))) < 1e-10);
  }
}

TEST_CASE("f_i closed form and oracle agreement") {
  auto pair = antipodal_pair(2, 1.0);
  const double expect = -1.0 + std::log(std::exp(1.0) + std::exp(-1.0));
  CHECK(std::abs(f_i(pair.row(0), 0, pair) - expect) < 1e-14);
  CHECK(std::abs(expect - 0.126928) < 1e-6);

  RngStream rng(2, "fi");
  for (double tau : {0.1, 0.5, 2.0}) {
    EmbeddingSet s(rinv::testing::random_unit_rows(6, 4, rng), tau);
    for (int t = 0; t < 10; ++t) {
      const Vec x = random_unit_vector(4, rng);
      for (std::size_t i = 0; i < 6; ++i) CHECK(std::abs(f_i(x, i, s) - f_direct(x, i, s)) < 1e-10);
    }
  }
}

TEST_CASE("rotation invariance") {
  RngStream rng(3, "rot");
  EmbeddingSet s(rinv::testing::random_unit_rows(7, 5, rng), 0.3);
  const auto q = random_rotation(5, rng);
  const auto rs = rotate_set(q, s);
  for (int t = 0; t < 10; ++t) {
    const Vec x = random_unit_vector(5, rng);
    const Vec rx = rotate(q, x);
    CHECK(std::abs(log_h_r(x, s) - log_h_r(rx, rs)) < 1e-10);
    for (std::size_t i = 0; i < 7; ++i) CHECK(std::abs(f_i(x, i, s) - f_i(rx, i, rs)) < 1e-10);
  }
}

TEST_CASE("gradient of log F_i matches finite differences on the sphere") {
  RngStream rng(4, "grad");
  EmbeddingSet s(rinv::testing::random_unit_rows(5, 4, rng), 0.4);
  for (int t = 0; t < 10; ++t) {
    const Vec x = random_unit_vector(4, rng);
    const Vec g = log_f_i_gradient(x, 1, s);
    const Vec v = [&] {
      Vec u = random_unit_vector(4, rng);
      const double r = dot(u, x);
      for (std::size_t k = 0; k < 4; ++k) u[k] -= r * x[k];
      return u;
    }();
    const double h = 1e-6;
    auto along = [&](double e) {
      Vec y(4);
      double n = 0;
      for (std::size_t k = 0; k < 4; ++k) n += (y[k] = x[k] + e * v[k]) * y[k];
      for (auto& c : y) c /= std::sqrt(n);
      return std::log(f_i(y, 1, s));
    };
    const double numeric = (along(h) - along(-h)) / (2 * h);
    CHECK(std::abs(dot(g, v) - numeric) < 1e-6 * std::max(1.0, std::abs(numeric)));
    CHECK(std::abs(dot(g, x)) < 1e-12);
  }
}

TEST_CASE("stationarity at targets of balanced minimizer sets") {
  for (std::size_t n = 2; n <= 8; ++n)
    for (double tau : {0.1, 1.0}) {
      auto s = regular_simplex(n, n - 1, tau);
      for (std::size_t i = 0; i < n; ++i) {
        const Vec g = log_f_i_gradient(s.row(i), i, s);
        CHECK(std::sqrt(dot(g, g)) < 1e-8);
      }
    }
}

TEST_CASE("recover_embedding") {
  auto pair = antipodal_pair(2, 1.0);
  auto r0 = recover_embedding(0, pair, RngStream(5, "pair"));
  CHECK(r0.converged);
  CHECK(r0.cosine_to_target > 1 - 1e-6);
  CHECK(r0.objective_gap >= -1e-12);

  auto at = recover_embedding_from(pair.row(1), 1, pair);
  CHECK(at.converged);
  CHECK(at.iterations == 0);
  CHECK(at.objective_gap == 0.0);

  auto simplex = regular_simplex(4, 3, 0.1);
  for (std::size_t i = 0; i < 4; ++i) {
    auto r = recover_embedding(i, simplex, RngStream(6, "simplex").child(i));
    CHECK(r.cosine_to_target > 1 - 1e-6);
    CHECK(r.converged);
  }
  CHECK_THROWS_AS(recover_embedding_from({1.0, 1.0}, 0, pair), ContractError);
}

TEST_CASE("verify_prop1 on balanced minimizer sets") {
  auto pair_report = verify_prop1(antipodal_pair(2, 1.0), RngStream(7, "p1"), 100000, 8);
  CHECK(pair_report.pass());
  for (std::size_t n = 3; n <= 8; ++n) {
    auto report = verify_prop1(regular_simplex(n, n - 1, 0.5), RngStream(8, "simplex").child(n), 20000, 8);
    CHECK_MESSAGE(report.pass(), "simplex N=" << n);
    for (const auto& row : report.rows) CHECK(row.min_sampled_gap >= -kRejectionSlack);
  }
  auto degenerate = from_rows({{1, 0}, {1, 0}, {1, 0}}, 0.5);
  auto bad = verify_prop1(degenerate, RngStream(9, "bad"), 10, 1);
  CHECK(bad.precondition_violated);
  CHECK(bad.rows.empty());
  CHECK(std::abs(bad.sum_norm - 3.0) < 1e-12);
}

TEST_CASE("small tau leaves a local minimum of F_i at the antipode") {
  // Near -R_0 the push term behaves like the max of two linear pieces meeting
  // at -R_0, smoothed over a width ~ tau. For small tau that kink dominates
  // the concave pull term, so -R_0 is a local minimum; for tau = 1 it is not.
  auto second_difference = [](double tau) {
    auto set = regular_simplex(3, 2, tau);
    const double h = 1e-3;
    auto at = [&](double phi) { return f_i({-std::cos(phi), -std::sin(phi)}, 0, set); };
    return (at(h) - 2 * at(0) + at(-h)) / (h * h);
  };
  CHECK(second_difference(0.1) > 0.0);
  CHECK(second_difference(1.0) < 0.0);
  const auto sharp = regular_simplex(3, 2, 0.1);
  const Vec g = log_f_i_gradient({-1.0, 0.0}, 0, sharp);
  CHECK(std::sqrt(dot(g, g)) < 1e-12);
  const auto stuck = recover_embedding_from({-std::cos(1e-3), std::sin(1e-3)}, 0, sharp);
  CHECK(stuck.cosine_to_target < -0.999);
  CHECK(stuck.objective_gap > 1.0);

  // Multi-start recovery keeps the lowest objective and still finds R_i.
  const auto report = verify_prop1(sharp, RngStream(12, "antipode"), 1000, 32);
  REQUIRE(report.pass());
  std::size_t trapped = 0;
  for (const auto& row : report.rows) {
    CHECK(row.best_restart_cosine > kRecoveryCosine);
    trapped += 32 - row.restarts_recovered;
  }
  CHECK(trapped > 0);
}

TEST_CASE("balancedness alone does not make R_i the minimizer of F_i") {
  // {R1, -R1, R3, -R3} sums to zero, yet with <R1, R3> != 0 the target R1 is
  // not a stationary point of F_1.
  const double c = 0.6, s = 0.8;
  auto set = from_rows({{1, 0}, {-1, 0}, {c, s}, {-c, -s}}, 0.5);
  REQUIRE(set.balanced());
  const Vec g = log_f_i_gradient(set.row(0), 0, set);
  CHECK(std::sqrt(dot(g, g)) > 1e-3);
  auto r = recover_embedding(0, set, RngStream(10, "counter"));
  CHECK(r.objective_gap < -1e-6);
  auto report = verify_prop1(set, RngStream(11, "counter"), 10000, 2);
  CHECK_FALSE(report.precondition_violated);
  CHECK_FALSE(report.pass());
}

TEST_CASE("uniformity minimizer") {
  for (std::size_t d : {2, 3, 5}) {
    auto m = find_uniformity_minimizer(2, d, 0.5, RngStream(12, "two").child(d));
    CHECK(std::abs(dot(m.set.row(0), m.set.row(1)) + 1.0) < 1e-6);
    CHECK(m.sum_norm < 1e-6);
  }
  auto tri = find_uniformity_minimizer(3, 2, 0.5, RngStream(13, "tri"));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = i + 1; j < 3; ++j) CHECK(std::abs(dot(tri.set.row(i), tri.set.row(j)) + 0.5) < 1e-4);

  for (std::size_t n = 3; n <= 6; ++n)
    for (double tau : {0.1, 0.5}) {
      auto m = find_uniformity_minimizer(n, n - 1, tau, RngStream(14, "simplex").child(n));
      CHECK(m.sum_norm < 1e-4);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
          CHECK(std::abs(dot(m.set.row(i), m.set.row(j)) + 1.0 / (n - 1)) < 1e-4);
      CHECK(m.objective <= uniformity_objective(
                               [&] {
                                 std::vector<Vec> rows;
                                 auto ref = regular_simplex(n, n - 1, tau);
                                 for (std::size_t i = 0; i < n; ++i) rows.push_back(ref.row(i));
                                 return rows;
                               }(),
                               tau) +
                               1e-8);
    }
  // The optimizer output feeds straight into the recovery check.
  auto m = find_uniformity_minimizer(4, 5, 0.5, RngStream(15, "loose"));
  CHECK(m.sum_norm < 1e-4);
  CHECK_THROWS_AS(find_uniformity_minimizer(1, 3, 0.5, RngStream(1, "x")), DomainError);
}

TEST_CASE("recoverability precondition scan") {
  SynthSpec spec;
  spec.per_class = 100;
  auto data = synth_dataset(spec, RngStream(16, "recov"));
  EncoderConfig cfg;
  cfg.widths = {4, 4, 4};
  cfg.embed_dim = 8;
  auto teacher = build_encoder<float>(cfg, RngStream(16, "teacher"));
  teacher.set_frozen(true);

  auto identity = check_recoverability(data, ForwardOperator::identity(), teacher, RngStream(1, "id"));
  CHECK(identity.images == 1000);
  CHECK(identity.collision_groups == 0);
  CHECK(identity.recoverable());

  auto partial = check_recoverability(data, ForwardOperator::mask(Severity::fixed(0.9)), teacher, RngStream(1, "m"));
  CHECK(partial.collision_groups == 0);

  auto small = data.subset(std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9});
  auto total = check_recoverability(small, ForwardOperator::mask(Severity::fixed(1.0)), teacher, RngStream(1, "t"));
  CHECK(total.collision_groups == 1);
  CHECK(total.colliding_pairs == 45);
  CHECK(total.violations.size() == 45);
  CHECK_FALSE(total.recoverable());

  // Duplicated images collide but share their teacher embedding.
  auto dup = data.subset(std::vector<std::size_t>{3, 3, 4});
  auto d = check_recoverability(dup, ForwardOperator::identity(), teacher, RngStream(1, "d"));
  CHECK(d.colliding_pairs == 1);
  CHECK(d.recoverable());

  CHECK_THROWS_AS(check_recoverability(small, ForwardOperator::mask(Severity::range(0.1, 0.5)), teacher,
                                       RngStream(1, "r")),
                  ContractError);
}
