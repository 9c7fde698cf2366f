#include "rinv/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "rinv/encoders.hpp"
#include "rinv/ops.hpp"

namespace rinv {

namespace {

struct Problem {
  EncoderModel<double> student;
  Tensor<double> input;
  Tensor<double> teacher;
  double tau;
};

Problem make_problem(const RngStream& rng, std::size_t batch) {
  EncoderConfig c;
  c.architecture = Architecture::MLP;
  c.channels = 1;
  c.height = 2;
  c.width = 3;
  c.widths = {6};
  c.embed_dim = 4;
  RngStream draws = rng.child("data");
  std::vector<double> x(batch * 6), t(batch * 4);
  for (auto& v : x) v = draws.standard_normal();
  for (std::size_t i = 0; i < batch; ++i) {
    double sq = 0;
    for (std::size_t k = 0; k < 4; ++k) {
      t[i * 4 + k] = draws.standard_normal();
      sq += t[i * 4 + k] * t[i * 4 + k];
    }
    for (std::size_t k = 0; k < 4; ++k) t[i * 4 + k] /= std::sqrt(sq);
  }
  static constexpr double taus[] = {0.1, 0.5, 1.0};
  return {build_encoder<double>(c, rng.child("init")), Tensor<double>::from_data({batch, 1, 2, 3}, std::move(x)),
          Tensor<double>::from_data({batch, 4}, std::move(t)), taus[draws.uniform_index(3)]};
}

// Central differences are only meaningful away from ReLU kinks and from rows
// whose pre-normalization norm is near zero.
bool well_conditioned(const Problem& p, double step) {
  NoGradGuard no_grad;
  const auto& w = p.student.parameter("fc1.weight");
  const auto& b = p.student.parameter("fc1.bias");
  const std::size_t batch = p.input.dim(0), in = w.dim(0), hidden = w.dim(1);
  for (std::size_t i = 0; i < batch; ++i)
    for (std::size_t j = 0; j < hidden; ++j) {
      double z = b[j];
      for (std::size_t k = 0; k < in; ++k) z += p.input[i * in + k] * w[k * hidden + j];
      if (std::abs(z) < 1e3 * step) return false;
    }
  const auto f = p.student.features(p.input);
  const std::size_t d = f.dim(1);
  for (std::size_t i = 0; i < batch; ++i) {
    double sq = 0;
    for (std::size_t k = 0; k < d; ++k) sq += f[i * d + k] * f[i * d + k];
    if (sq < 1e-2) return false;
  }
  return true;
}

double relative_error(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), 1e-12});
}

std::vector<LossSpec> all_losses() {
  std::vector<LossSpec> out{LossSpec{LossFamily::MSEOnly}};
  for (auto v : {UniformityVariant::StudentVsTeacher, UniformityVariant::StudentVsStudent,
                 UniformityVariant::StudentVsBoth, UniformityVariant::NTXent})
    out.push_back(LossSpec{LossFamily::Contrastive, v});
  return out;
}

std::string loss_name(const LossSpec& s) {
  return s.family == LossFamily::MSEOnly ? "mse" : to_string(s.variant);
}

}  // namespace

bool GradcheckSuite::pass() const {
  return std::all_of(finite_difference.begin(), finite_difference.end(), [](const auto& c) { return c.pass; }) &&
         std::all_of(decomposition.begin(), decomposition.end(), [](const auto& c) { return c.pass; }) &&
         !finite_difference.empty() && !decomposition.empty();
}

nlohmann::json GradcheckSuite::to_json() const {
  nlohmann::json fd = nlohmann::json::array(), dec = nlohmann::json::array();
  double worst_fd = 0, worst_dec = 0;
  for (const auto& c : finite_difference) {
    worst_fd = std::max(worst_fd, c.relative_error);
    fd.push_back({{"loss", c.loss}, {"instance", c.instance}, {"batch", c.batch}, {"tau", c.tau},
                  {"relative_error", c.relative_error}, {"pass", c.pass}});
  }
  for (const auto& c : decomposition) {
    worst_dec = std::max(worst_dec, c.report.max_relative_deviation);
    dec.push_back({{"loss", c.loss},
                   {"instance", c.instance},
                   {"batch", c.batch},
                   {"tau", c.tau},
                   {"max_relative_deviation", c.report.max_relative_deviation},
                   {"max_row_sum_error", c.report.max_row_sum_error},
                   {"pass", c.pass}});
  }
  return {{"seed", seed},
          {"step", step},
          {"fd_tolerance", fd_tolerance},
          {"decomposition_tolerance", decomposition_tolerance},
          {"worst_fd_relative_error", worst_fd},
          {"worst_decomposition_deviation", worst_dec},
          {"finite_difference", fd},
          {"decomposition", dec},
          {"pass", pass()}};
}

GradcheckSuite run_gradcheck_suite(std::uint64_t seed, std::size_t instances) {
  GradcheckSuite suite;
  suite.seed = seed;
  const RngStream root(seed, "gradcheck");
  for (const LossSpec& base : all_losses()) {
    for (std::size_t k = 0; k < instances; ++k) {
      const RngStream rng = root.child(loss_name(base)).child(k);
      const std::size_t batch = 2 + k % 5;
      Problem p = make_problem(rng, batch);
      for (std::size_t attempt = 1; !well_conditioned(p, suite.step); ++attempt)
        p = make_problem(rng.child(attempt), batch);
      LossSpec spec = base;
      spec.tau = p.tau;
      auto params = p.student.parameters();
      auto loss_value = [&] {
        NoGradGuard no_grad;
        return compute_loss(p.student.embed({p.input, true, true}), p.teacher, spec).item();
      };
      for (auto& t : params) t.zero_grad();
      backward(compute_loss(p.student.embed({p.input, true, true}), p.teacher, spec));
      std::vector<double> analytic, numeric;
      for (auto& t : params) {
        const auto g = t.grad();
        analytic.insert(analytic.end(), g.begin(), g.end());
        auto data = t.data_mut();
        for (std::size_t i = 0; i < data.size(); ++i) {
          const double keep = data[i];
          data[i] = keep + suite.step;
          const double up = loss_value();
          data[i] = keep - suite.step;
          const double down = loss_value();
          data[i] = keep;
          numeric.push_back((up - down) / (2 * suite.step));
        }
      }
      const double err = relative_error(analytic, numeric);
      suite.finite_difference.push_back({loss_name(spec), k, batch, spec.tau, err, err < suite.fd_tolerance});

      if (base.family == LossFamily::MSEOnly || base.variant == UniformityVariant::StudentVsTeacher) {
        auto forward = [&] { return p.student.embed({p.input, true, true}); };
        const auto rep = gradient_decomposition_check<double>(forward, params, p.teacher, spec);
        const bool ok = rep.max_relative_deviation < suite.decomposition_tolerance &&
                        rep.max_row_sum_error < suite.row_sum_tolerance;
        suite.decomposition.push_back({loss_name(spec), k, batch, spec.tau, rep, ok});
      }
    }
  }
  return suite;
}

}  // namespace rinv
