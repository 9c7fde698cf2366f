#pragma once

#include <cstdint>
#include <vector>

#include "rinv/corruptions.hpp"
#include "rinv/dataset.hpp"
#include "rinv/encoders.hpp"
#include "rinv/rng.hpp"
#include "rinv/tensor.hpp"

namespace rinv {

using Vec = std::vector<double>;

/// Unit-norm target embeddings R (N x d) with a temperature.
class EmbeddingSet {
 public:
  static constexpr double kUnitTolerance = 1e-9;
  static constexpr double kBalanceTolerance = 1e-6;

  // Throws ContractError when a row is not unit norm within kUnitTolerance.
  EmbeddingSet(Tensor<double> rows, double tau);

  std::size_t size() const { return rows_.dim(0); }
  std::size_t dim() const { return rows_.dim(1); }
  double tau() const { return tau_; }
  const Tensor<double>& rows() const { return rows_; }
  Vec row(std::size_t i) const;
  double sum_norm() const;
  bool balanced(double tolerance = kBalanceTolerance) const { return sum_norm() < tolerance; }

 private:
  Tensor<double> rows_;
  double tau_;
};

// Fixture sets. Both are balanced.
EmbeddingSet antipodal_pair(std::size_t d, double tau);
// N unit vectors with pairwise inner product -1/(N-1) in d >= N-1 dimensions.
EmbeddingSet regular_simplex(std::size_t n, std::size_t d, double tau);

Vec random_unit_vector(std::size_t d, RngStream& rng);

/// log sum_j exp(<x, R_j> / tau).
double log_h_r(const Vec& x, const EmbeddingSet& set);
/// sum_j exp(<x, R_j> / tau). Overflows to inf for tiny tau; prefer log_h_r.
double h_r(const Vec& x, const EmbeddingSet& set);

/// F_i(x) = -<x, R_i> + tau log H_R(x), evaluated as
/// tau log1p(sum_{j != i} exp(<x, R_j - R_i> / tau)) so that values near
/// the minimum keep full relative precision.
double f_i(const Vec& x, std::size_t i, const EmbeddingSet& set);

/// Tangential gradient of log F_i at unit x.
Vec log_f_i_gradient(const Vec& x, std::size_t i, const EmbeddingSet& set);

struct RecoveryRow {
  Vec recovered;
  double cosine_to_target = 0.0;
  double objective_gap = 0.0;  // F_i(recovered) - F_i(R_i)
  std::size_t iterations = 0;
  bool converged = false;
  double final_gradient_norm = 0.0;
};

struct RecoveryOptions {
  std::size_t max_iters = 5000;
  double initial_step = 0.1;  // multiplied by tau
  double gradient_tolerance = 1e-9;
};

/// Riemannian descent on log F_i over the unit sphere with Armijo
/// backtracking and retraction by renormalization, from `start`.
RecoveryRow recover_embedding_from(const Vec& start, std::size_t i, const EmbeddingSet& set,
                                   const RecoveryOptions& options = {});
/// Same, from a uniformly random start drawn from `rng`.
RecoveryRow recover_embedding(std::size_t i, const EmbeddingSet& set, RngStream rng,
                              const RecoveryOptions& options = {});

struct Prop1Row {
  std::size_t index = 0;
  double min_sampled_gap = 0.0;  // min over samples of F_i(x) - F_i(R_i)
  // Cosine of the restart with the lowest F_i; the multi-start recovery.
  double best_restart_cosine = -1.0;
  // For small tau, F_i also has a local minimum at -R_i, so single restarts
  // can stall there.
  double min_restart_cosine = 1.0;
  std::size_t restarts_converged = 0;
  std::size_t restarts_recovered = 0;
  bool rejection_pass = false;
  bool optimization_pass = false;
  bool pass() const { return rejection_pass && optimization_pass; }
};

struct Prop1Report {
  std::size_t n = 0, d = 0;
  double tau = 0.0;
  double sum_norm = 0.0;
  bool precondition_violated = false;
  std::vector<Prop1Row> rows;
  bool pass() const;
};

inline constexpr double kRejectionSlack = 1e-9;
inline constexpr double kRecoveryCosine = 1.0 - 1e-6;

/// Per row: a rejection search over `n_samples` uniform unit vectors and a
/// multi-start descent over `n_restarts` random starts, keeping the restart
/// with the lowest F_i. An unbalanced set yields a report flagged
/// precondition_violated with no rows.
Prop1Report verify_prop1(const EmbeddingSet& set, RngStream rng, std::size_t n_samples, std::size_t n_restarts,
                         const RecoveryOptions& options = {});

struct UniformityMinimizer {
  EmbeddingSet set;
  double objective = 0.0;  // sum_i log sum_j exp(<f_i, f_j> / tau)
  double sum_norm = 0.0;
  std::size_t restarts = 0;
  std::size_t iterations = 0;  // of the winning restart
};

/// sum_i log sum_j exp(<f_i, f_j> / tau) over the rows of `rows` (N x d).
double uniformity_objective(const std::vector<Vec>& rows, double tau);

UniformityMinimizer find_uniformity_minimizer(std::size_t n, std::size_t d, double tau, RngStream rng,
                                              std::size_t restarts = 8, std::size_t max_iters = 20000);

struct CollisionPair {
  std::size_t i = 0, j = 0;
  double cosine_distance = 0.0;
};

struct RecoverabilityReport {
  std::size_t images = 0;
  std::size_t collision_groups = 0;   // groups of >= 2 identical corrupted images
  std::size_t colliding_pairs = 0;
  std::vector<CollisionPair> violations;  // teacher embeddings differ by > 1e-6
  bool recoverable() const { return violations.empty(); }
};

inline constexpr double kCollisionCosineTolerance = 1e-6;

/// Applies one realization of `op` (the same stream for every image) and
/// reports corrupted-input collisions whose clean teacher embeddings differ.
template <typename T>
RecoverabilityReport check_recoverability(const Dataset& data, const ForwardOperator& op,
                                          const EncoderModel<T>& teacher, const RngStream& rng,
                                          const std::vector<double>& norm_mean = {0.5},
                                          const std::vector<double>& norm_std = {0.5});

}  // namespace rinv
