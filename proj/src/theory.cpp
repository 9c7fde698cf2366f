#include "rinv/theory.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <unordered_map>

#include "rinv/errors.hpp"

namespace rinv {

namespace {

double dot(const Vec& a, const Vec& b) {
  double s = 0;
  for (std::size_t k = 0; k < a.size(); ++k) s += a[k] * b[k];
  return s;
}

double norm(const Vec& a) { return std::sqrt(dot(a, a)); }

void normalize_in_place(Vec& a) {
  const double n = norm(a);
  if (!(n > 0)) throw DegenerateEmbeddingError("cannot normalize a zero vector");
  for (auto& v : a) v /= n;
}

// Removes the component along unit x.
void project_tangent(Vec& g, const Vec& x) {
  const double r = dot(g, x);
  for (std::size_t k = 0; k < g.size(); ++k) g[k] -= r * x[k];
}

double log_sum_exp(const Vec& v) {
  if (v.empty()) return -std::numeric_limits<double>::infinity();
  const double hi = *std::max_element(v.begin(), v.end());
  double s = 0;
  for (double e : v) s += std::exp(e - hi);
  return hi + std::log(s);
}

void require_unit(const Vec& x, std::size_t d, const char* op) {
  if (x.size() != d) throw DimensionError(std::string(op) + ": vector has the wrong dimension");
  if (std::abs(norm(x) - 1.0) > EmbeddingSet::kUnitTolerance) {
    throw ContractError(std::string(op) + ": x must be a unit vector");
  }
}

// log F_i(x) along with the softmax weights of the j != i terms and the
// factor A / ((1 + A) log1p(A)), where A = sum_{j != i} exp(b_j).
struct LogF {
  double value;
  Vec weights;
  double factor;
};

LogF log_f(const Vec& x, std::size_t i, const EmbeddingSet& set) {
  const std::size_t n = set.size();
  const double tau = set.tau();
  const Vec ri = set.row(i);
  const double xi = dot(x, ri);
  Vec b;
  b.reserve(n - 1);
  for (std::size_t j = 0; j < n; ++j)
    if (j != i) b.push_back((dot(x, set.row(j)) - xi) / tau);
  const double log_a = log_sum_exp(b);
  LogF out;
  out.weights.resize(b.size());
  for (std::size_t k = 0; k < b.size(); ++k) out.weights[k] = std::exp(b[k] - log_a);
  if (log_a < -30.0) {
    // log1p(A) = A (1 - A/2 + ...), so log F = log tau + log A - A/2.
    const double a = std::exp(log_a);
    out.value = std::log(tau) + log_a - a / 2;
    out.factor = 1.0;
  } else {
    const double a = std::exp(log_a);
    const double l1p = std::log1p(a);
    out.value = std::log(tau * l1p);
    out.factor = a / ((1 + a) * l1p);
  }
  return out;
}

Vec log_f_gradient_from(const LogF& lf, const Vec& x, std::size_t i, const EmbeddingSet& set) {
  const std::size_t d = set.dim();
  Vec g(d, 0.0);
  const Vec ri = set.row(i);
  std::size_t k = 0;
  for (std::size_t j = 0; j < set.size(); ++j) {
    if (j == i) continue;
    const Vec rj = set.row(j);
    for (std::size_t c = 0; c < d; ++c) g[c] += lf.weights[k] * (rj[c] - ri[c]);
    ++k;
  }
  const double s = lf.factor / set.tau();
  for (auto& v : g) v *= s;
  project_tangent(g, x);
  return g;
}

double rounding_noise(double v) { return 8 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(v)); }

// Armijo sufficient decrease, counted only when it clears rounding noise.
// Below that resolution a step is judged by whether it shrinks the gradient.
bool accept_step(double next, double cur, double armijo_drop, double next_grad, double cur_grad) {
  const double noise = rounding_noise(cur);
  if (next < cur - std::max(armijo_drop, noise)) return true;
  return next <= cur + noise && next_grad < cur_grad;
}

Vec retract(const Vec& x, const Vec& g, double step) {
  Vec y(x.size());
  for (std::size_t k = 0; k < x.size(); ++k) y[k] = x[k] - step * g[k];
  normalize_in_place(y);
  return y;
}

}  // namespace

EmbeddingSet::EmbeddingSet(Tensor<double> rows, double tau) : rows_(std::move(rows)), tau_(tau) {
  if (rows_.rank() != 2) throw DimensionError("EmbeddingSet: rows must be an N x d matrix");
  if (!(tau > 0)) throw DomainError("EmbeddingSet: tau must be > 0");
  for (std::size_t i = 0; i < size(); ++i) {
    if (std::abs(norm(row(i)) - 1.0) > kUnitTolerance) {
      throw ContractError("EmbeddingSet: row " + std::to_string(i) + " is not unit norm");
    }
  }
}

Vec EmbeddingSet::row(std::size_t i) const {
  if (i >= size()) throw DomainError("EmbeddingSet: row index out of range");
  auto d = rows_.data();
  return Vec(d.begin() + static_cast<std::ptrdiff_t>(i * dim()),
             d.begin() + static_cast<std::ptrdiff_t>((i + 1) * dim()));
}

double EmbeddingSet::sum_norm() const {
  Vec s(dim(), 0.0);
  for (std::size_t i = 0; i < size(); ++i)
    for (std::size_t k = 0; k < dim(); ++k) s[k] += rows_[i * dim() + k];
  return norm(s);
}

EmbeddingSet antipodal_pair(std::size_t d, double tau) {
  if (d < 1) throw DomainError("antipodal_pair: d must be >= 1");
  std::vector<double> v(2 * d, 0.0);
  v[0] = 1.0;
  v[d] = -1.0;
  return EmbeddingSet(Tensor<double>::from_data({2, d}, v), tau);
}

EmbeddingSet regular_simplex(std::size_t n, std::size_t d, double tau) {
  if (n < 2 || d + 1 < n) throw DomainError("regular_simplex needs 2 <= N <= d + 1");
  // Centred basis vectors of R^N span an (N-1)-dim subspace; express them in
  // an orthonormal basis of that subspace built by Gram-Schmidt.
  std::vector<Vec> centred(n, Vec(n, -1.0 / static_cast<double>(n)));
  for (std::size_t i = 0; i < n; ++i) centred[i][i] += 1.0;
  std::vector<Vec> basis;
  for (std::size_t i = 0; i + 1 < n; ++i) {
    Vec b = centred[i];
    for (const auto& q : basis) {
      const double r = dot(b, q);
      for (std::size_t k = 0; k < n; ++k) b[k] -= r * q[k];
    }
    normalize_in_place(b);
    basis.push_back(b);
  }
  std::vector<double> v(n * d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    Vec coords(n - 1);
    for (std::size_t k = 0; k + 1 < n; ++k) coords[k] = dot(centred[i], basis[k]);
    normalize_in_place(coords);
    std::copy(coords.begin(), coords.end(), v.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  return EmbeddingSet(Tensor<double>::from_data({n, d}, v), tau);
}

Vec random_unit_vector(std::size_t d, RngStream& rng) {
  Vec x(d);
  do {
    for (auto& v : x) v = rng.standard_normal();
  } while (norm(x) < 1e-12);
  normalize_in_place(x);
  return x;
}

double log_h_r(const Vec& x, const EmbeddingSet& set) {
  if (x.size() != set.dim()) throw DimensionError("log_h_r: vector has the wrong dimension");
  Vec e(set.size());
  for (std::size_t j = 0; j < set.size(); ++j) e[j] = dot(x, set.row(j)) / set.tau();
  return log_sum_exp(e);
}

double h_r(const Vec& x, const EmbeddingSet& set) { return std::exp(log_h_r(x, set)); }

double f_i(const Vec& x, std::size_t i, const EmbeddingSet& set) {
  if (x.size() != set.dim()) throw DimensionError("f_i: vector has the wrong dimension");
  (void)set.row(i);
  if (set.size() == 1) return 0.0;
  return std::exp(log_f(x, i, set).value);
}

Vec log_f_i_gradient(const Vec& x, std::size_t i, const EmbeddingSet& set) {
  require_unit(x, set.dim(), "log_f_i_gradient");
  if (set.size() == 1) {
    throw DomainError("log_f_i_gradient: F_i is identically 0 for a single embedding");
  }
  return log_f_gradient_from(log_f(x, i, set), x, i, set);
}

RecoveryRow recover_embedding_from(const Vec& start, std::size_t i, const EmbeddingSet& set,
                                   const RecoveryOptions& options) {
  require_unit(start, set.dim(), "recover_embedding");
  (void)set.row(i);
  RecoveryRow out;
  Vec x = start;
  if (set.size() == 1) {
    // F_i vanishes everywhere; every unit vector is a minimizer.
    out.recovered = x;
    out.converged = true;
  } else {
    double step = options.initial_step * set.tau();
    LogF cur = log_f(x, i, set);
    Vec g = log_f_gradient_from(cur, x, i, set);
    double gn = norm(g);
    for (; out.iterations < options.max_iters; ++out.iterations) {
      if (gn < options.gradient_tolerance) {
        out.converged = true;
        break;
      }
      bool moved = false;
      while (step > 1e-18) {
        const Vec y = retract(x, g, step);
        const LogF next = log_f(y, i, set);
        const Vec gy = log_f_gradient_from(next, y, i, set);
        const double gyn = norm(gy);
        if (accept_step(next.value, cur.value, 1e-4 * step * gn * gn, gyn, gn)) {
          x = y;
          cur = next;
          g = gy;
          gn = gyn;
          step *= 2.0;
          moved = true;
          break;
        }
        step *= 0.5;
      }
      if (!moved) break;
    }
    if (!out.converged && gn < options.gradient_tolerance) out.converged = true;
    out.final_gradient_norm = gn;
    out.recovered = x;
  }
  const Vec ri = set.row(i);
  out.cosine_to_target = std::clamp(dot(out.recovered, ri), -1.0, 1.0);
  out.objective_gap = f_i(out.recovered, i, set) - f_i(ri, i, set);
  return out;
}

RecoveryRow recover_embedding(std::size_t i, const EmbeddingSet& set, RngStream rng,
                              const RecoveryOptions& options) {
  return recover_embedding_from(random_unit_vector(set.dim(), rng), i, set, options);
}

bool Prop1Report::pass() const {
  if (precondition_violated || rows.empty()) return false;
  return std::all_of(rows.begin(), rows.end(), [](const Prop1Row& r) { return r.pass(); });
}

Prop1Report verify_prop1(const EmbeddingSet& set, RngStream rng, std::size_t n_samples, std::size_t n_restarts,
                         const RecoveryOptions& options) {
  Prop1Report report;
  report.n = set.size();
  report.d = set.dim();
  report.tau = set.tau();
  report.sum_norm = set.sum_norm();
  if (!set.balanced()) {
    report.precondition_violated = true;
    return report;
  }
  for (std::size_t i = 0; i < set.size(); ++i) {
    Prop1Row row;
    row.index = i;
    const double at_target = f_i(set.row(i), i, set);
    RngStream samples = rng.child("samples").child(i);
    row.min_sampled_gap = std::numeric_limits<double>::infinity();
    for (std::size_t s = 0; s < n_samples; ++s) {
      const Vec x = random_unit_vector(set.dim(), samples);
      row.min_sampled_gap = std::min(row.min_sampled_gap, f_i(x, i, set) - at_target);
    }
    row.rejection_pass = n_samples == 0 || row.min_sampled_gap >= -kRejectionSlack;
    RngStream starts = rng.child("restarts").child(i);
    double best_gap = std::numeric_limits<double>::infinity();
    for (std::size_t r = 0; r < n_restarts; ++r) {
      const RecoveryRow rec = recover_embedding(i, set, starts.child(r), options);
      row.min_restart_cosine = std::min(row.min_restart_cosine, rec.cosine_to_target);
      row.restarts_converged += rec.converged;
      row.restarts_recovered += rec.cosine_to_target > kRecoveryCosine;
      if (rec.objective_gap < best_gap) {
        best_gap = rec.objective_gap;
        row.best_restart_cosine = rec.cosine_to_target;
      }
    }
    row.optimization_pass = n_restarts > 0 && row.best_restart_cosine > kRecoveryCosine;
    report.rows.push_back(row);
  }
  return report;
}

double uniformity_objective(const std::vector<Vec>& rows, double tau) {
  double total = 0;
  for (const auto& fi : rows) {
    Vec e;
    for (const auto& fj : rows) e.push_back(dot(fi, fj) / tau);
    total += log_sum_exp(e);
  }
  return total;
}

namespace {

// log sum_i log1p(A_i) with A_i = sum_{j != i} exp((<f_i, f_j> - 1) / tau):
// the uniformity objective minus its constant N / tau, in log scale so the
// merit stays well conditioned when all A_i are tiny.
struct UniformityMerit {
  double value;
  std::vector<Vec> gradient;  // tangential, per row
  double gradient_norm;
};

UniformityMerit uniformity_merit(const std::vector<Vec>& f, double tau) {
  const std::size_t n = f.size(), d = f[0].size();
  std::vector<std::vector<double>> a(n, std::vector<double>(n, 0.0));
  std::vector<double> big_a(n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) {
        a[i][j] = std::exp((dot(f[i], f[j]) - 1.0) / tau);
        big_a[i] += a[i][j];
      }
  double u = 0;
  for (double ai : big_a) u += std::log1p(ai);
  UniformityMerit m;
  m.value = std::log(u);
  m.gradient.assign(n, Vec(d, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      // d log1p(A_i) / d f_i and / d f_j share the coefficient a_ij / (tau (1 + A_i)).
      const double c = a[i][j] / (tau * (1.0 + big_a[i]) * u);
      for (std::size_t k = 0; k < d; ++k) {
        m.gradient[i][k] += c * f[j][k];
        m.gradient[j][k] += c * f[i][k];
      }
    }
  double sq = 0;
  for (std::size_t i = 0; i < n; ++i) {
    project_tangent(m.gradient[i], f[i]);
    sq += dot(m.gradient[i], m.gradient[i]);
  }
  m.gradient_norm = std::sqrt(sq);
  return m;
}

}  // namespace

UniformityMinimizer find_uniformity_minimizer(std::size_t n, std::size_t d, double tau, RngStream rng,
                                              std::size_t restarts, std::size_t max_iters) {
  if (n < 2 || d < 1) throw DomainError("find_uniformity_minimizer needs N >= 2 and d >= 1");
  if (!(tau > 0)) throw DomainError("find_uniformity_minimizer: tau must be > 0");
  if (restarts < 1) throw DomainError("find_uniformity_minimizer: restarts must be >= 1");
  std::vector<Vec> best;
  double best_obj = std::numeric_limits<double>::infinity();
  std::size_t best_iters = 0;
  for (std::size_t r = 0; r < restarts; ++r) {
    RngStream init = rng.child(r);
    std::vector<Vec> f;
    for (std::size_t i = 0; i < n; ++i) f.push_back(random_unit_vector(d, init));
    UniformityMerit cur = uniformity_merit(f, tau);
    double step = 0.1 * tau;
    std::size_t it = 0;
    for (; it < max_iters && cur.gradient_norm > 1e-12; ++it) {
      bool moved = false;
      while (step > 1e-18) {
        std::vector<Vec> y(n);
        for (std::size_t i = 0; i < n; ++i) y[i] = retract(f[i], cur.gradient[i], step);
        UniformityMerit next = uniformity_merit(y, tau);
        const double g2 = cur.gradient_norm * cur.gradient_norm;
        if (accept_step(next.value, cur.value, 1e-4 * step * g2, next.gradient_norm, cur.gradient_norm)) {
          f = std::move(y);
          cur = std::move(next);
          step *= 2.0;
          moved = true;
          break;
        }
        step *= 0.5;
      }
      if (!moved) break;
    }
    const double obj = uniformity_objective(f, tau);
    if (obj < best_obj) {
      best_obj = obj;
      best = f;
      best_iters = it;
    }
  }
  std::vector<double> flat;
  for (const auto& v : best) flat.insert(flat.end(), v.begin(), v.end());
  EmbeddingSet set(Tensor<double>::from_data({n, d}, flat), tau);
  const double s = set.sum_norm();
  return {std::move(set), best_obj, s, restarts, best_iters};
}

template <typename T>
RecoverabilityReport check_recoverability(const Dataset& data, const ForwardOperator& op,
                                          const EncoderModel<T>& teacher, const RngStream& rng,
                                          const std::vector<double>& norm_mean,
                                          const std::vector<double>& norm_std) {
  op.validate();
  if (!op.is_fixed()) throw ContractError("check_recoverability needs a fixed-severity operator");
  RecoverabilityReport report;
  report.images = data.count;

  // Every image sees the same realization: a single-image batch always draws
  // from rng.child(0).
  std::vector<std::vector<T>> corrupted(data.count);
  std::unordered_map<std::uint64_t, std::vector<std::size_t>> buckets;
  for (std::size_t i = 0; i < data.count; ++i) {
    const std::size_t idx[] = {i};
    auto out = apply(op, gather_batch<T>(data, idx), rng);
    corrupted[i].assign(out.values.data().begin(), out.values.data().end());
    std::uint64_t h = 1469598103934665603ULL;
    for (T v : corrupted[i]) {
      // Normalize -0 so equal values hash equally.
      const T w = v == T(0) ? T(0) : v;
      const auto* bytes = reinterpret_cast<const unsigned char*>(&w);
      for (std::size_t b = 0; b < sizeof(T); ++b) h = (h ^ bytes[b]) * 1099511628211ULL;
    }
    buckets[h].push_back(i);
  }

  std::vector<std::vector<std::size_t>> groups;
  for (auto& [h, members] : buckets) {
    std::vector<std::vector<std::size_t>> classes;
    for (std::size_t m : members) {
      bool placed = false;
      for (auto& c : classes)
        if (corrupted[c.front()] == corrupted[m]) {
          c.push_back(m);
          placed = true;
          break;
        }
      if (!placed) classes.push_back({m});
    }
    for (auto& c : classes)
      if (c.size() > 1) groups.push_back(std::move(c));
  }
  std::sort(groups.begin(), groups.end());
  report.collision_groups = groups.size();
  if (groups.empty()) return report;

  std::vector<std::size_t> needed;
  for (const auto& g : groups) needed.insert(needed.end(), g.begin(), g.end());
  std::sort(needed.begin(), needed.end());
  std::unordered_map<std::size_t, Vec> emb;
  {
    NoGradGuard no_grad;
    for (std::size_t start = 0; start < needed.size(); start += 256) {
      const std::size_t end = std::min(needed.size(), start + 256);
      std::span<const std::size_t> idx(needed.data() + start, end - start);
      const Tensor<T> e = teacher.embed(normalize(gather_batch<T>(data, idx), norm_mean, norm_std));
      const std::size_t d = e.dim(1);
      for (std::size_t b = 0; b < idx.size(); ++b) {
        Vec v(d);
        for (std::size_t k = 0; k < d; ++k) v[k] = static_cast<double>(e[b * d + k]);
        normalize_in_place(v);
        emb[idx[b]] = std::move(v);
      }
    }
  }
  for (const auto& g : groups)
    for (std::size_t a = 0; a < g.size(); ++a)
      for (std::size_t b = a + 1; b < g.size(); ++b) {
        ++report.colliding_pairs;
        const double dist = 1.0 - dot(emb[g[a]], emb[g[b]]);
        if (dist > kCollisionCosineTolerance) report.violations.push_back({g[a], g[b], dist});
      }
  return report;
}

template RecoverabilityReport check_recoverability(const Dataset&, const ForwardOperator&, const EncoderModel<float>&,
                                                   const RngStream&, const std::vector<double>&,
                                                   const std::vector<double>&);
template RecoverabilityReport check_recoverability(const Dataset&, const ForwardOperator&,
                                                   const EncoderModel<double>&, const RngStream&,
                                                   const std::vector<double>&, const std::vector<double>&);

}  // namespace rinv
