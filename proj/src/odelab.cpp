#include "pctk/odelab.hpp"

#include <cmath>
#include <sstream>

namespace odelab {

using odekit::CoefficientSchedule;
using odekit::DerivativeHistory;
using pctk::ConfigError;
using pctk::NumericsError;

TestProblem make_decay(double horizon) {
  TestProblem p;
  p.name = "decay";
  p.y0 = StateVector::scalar(1.0);
  p.horizon = horizon;
  p.f = [](const StateVector& y) { return -1.0 * y; };
  p.exact = [](double t) { return StateVector::scalar(std::exp(-t)); };
  return p;
}

TestProblem make_oscillator() {
  TestProblem p;
  p.name = "oscillator";
  p.y0 = StateVector({1.0, 0.0}, {2});
  p.horizon = 2.0 * M_PI;
  p.f = [](const StateVector& y) {
    return StateVector({y.data[1], -y.data[0]}, {2});
  };
  p.exact = [](double t) {
    return StateVector({std::cos(t), -std::sin(t)}, {2});
  };
  return p;
}

TestProblem problem_by_name(const std::string& name) {
  if (name == "decay") return make_decay();
  if (name == "oscillator") return make_oscillator();
  throw ConfigError("unknown test problem: " + name + " (expected decay|oscillator)");
}

Method method_by_name(const std::string& name) {
  if (name == "euler") return Method::Euler;
  if (name == "rk2") return Method::Rk2;
  if (name == "rk4") return Method::Rk4;
  if (name == "ab4") return Method::Ab4;
  if (name == "am4") return Method::Am4;
  if (name == "abm4") return Method::Abm4;
  throw ConfigError("unknown method: " + name +
                    " (expected euler|rk2|rk4|ab4|am4|abm4)");
}

std::string method_name(Method m) {
  switch (m) {
    case Method::Euler: return "euler";
    case Method::Rk2: return "rk2";
    case Method::Rk4: return "rk4";
    case Method::Ab4: return "ab4";
    case Method::Am4: return "am4";
    case Method::Abm4: return "abm4";
  }
  return "?";
}

const std::vector<Method>& all_methods() {
  static const std::vector<Method> ms = {Method::Euler, Method::Rk2, Method::Rk4,
                                         Method::Ab4,   Method::Am4, Method::Abm4};
  return ms;
}

OrderBand order_band(Method m) {
  switch (m) {
    case Method::Euler: return {0.9, 1.1};
    case Method::Rk2: return {1.8, 2.2};
    case Method::Rk4: return {3.7, 4.3};
    case Method::Ab4: return {3.5, 4.5};
    case Method::Abm4: return {3.5, 4.5};
    // Euler-predicted single correction: first-order predictor caps the
    // composite at second order.
    case Method::Am4: return {1.6, 2.4};
  }
  return {0.0, 0.0};
}

namespace {

long step_count(const TestProblem& p, double h) {
  if (!(h > 0.0)) throw ConfigError("integrate: step size must be positive");
  const double steps = p.horizon / h;
  const long n = std::lround(steps);
  if (n < 1 || std::abs(steps - static_cast<double>(n)) > 1e-9 * std::max(1.0, steps))
    throw ConfigError("integrate: horizon / h must be a positive integer");
  return n;
}

// Copy of the newest up-to-3 history entries, for the AM4 correction.
DerivativeHistory<StateVector> newest_three(const DerivativeHistory<StateVector>& hist) {
  DerivativeHistory<StateVector> out(3);
  for (int i = std::max(0, hist.size() - 3); i < hist.size(); ++i) out.push(hist.entry(i));
  return out;
}

}  // namespace

StateVector integrate(const TestProblem& p, Method m, double h) {
  const long n = step_count(p, h);
  auto g = [&](const StateVector& y) { return h * p.f(y); };

  StateVector y = p.y0;
  switch (m) {
    case Method::Euler:
      for (long k = 0; k < n; ++k) y = odekit::euler_step(y, g).next_state;
      return y;
    case Method::Rk2: {
      const auto sched = CoefficientSchedule::classical_rk2();
      for (long k = 0; k < n; ++k) y = odekit::rk2_step(y, g, sched).next_state;
      return y;
    }
    case Method::Rk4: {
      const auto sched = CoefficientSchedule::classical_rk4();
      for (long k = 0; k < n; ++k) y = odekit::rk4_step(y, g, sched).next_state;
      return y;
    }
    default:
      break;
  }

  // Multistep methods: store G at every visited state, bootstrap the first
  // three steps with classical RK4, then switch to the Adams formulas.
  const auto rk4 = CoefficientSchedule::classical_rk4();
  const auto am4 = CoefficientSchedule::classical(odekit::am4_classical_weights());
  DerivativeHistory<StateVector> hist(4);
  for (long k = 0; k < n; ++k) {
    StateVector fk = g(y);
    hist.push(fk);
    if (k < 3) {
      y = odekit::rk4_step(y, g, rk4).next_state;
      continue;
    }
    switch (m) {
      case Method::Ab4:
        y = odekit::ab4_step(y, hist);
        break;
      case Method::Abm4: {
        StateVector pred = odekit::ab4_step(y, hist);
        StateVector f_new = g(pred);
        y = odekit::am4_correct(y, f_new, newest_three(hist), am4);
        break;
      }
      case Method::Am4: {
        StateVector pred = y + fk;  // Euler predictor
        StateVector f_new = g(pred);
        y = odekit::am4_correct(y, f_new, newest_three(hist), am4);
        break;
      }
      default:
        throw ConfigError("integrate: unhandled method");
    }
  }
  return y;
}

double global_error(const TestProblem& p, Method m, double h) {
  const StateVector yh = integrate(p, m, h);
  const StateVector yx = p.exact(p.horizon);
  double err = 0.0;
  for (std::size_t i = 0; i < yh.data.size(); ++i)
    err = std::max(err, std::abs(yh.data[i] - yx.data[i]));
  return err;
}

double OrderReport::estimated_order() const {
  for (auto it = levels.rbegin(); it != levels.rend(); ++it)
    if (it->has_p_hat) return it->p_hat;
  throw NumericsError("OrderReport: no order estimate available (need >= 2 usable levels)");
}

std::string OrderReport::to_csv() const {
  std::ostringstream out;
  out << "method,h,global_error,p_hat\n";
  out.precision(17);
  for (const auto& l : levels) {
    out << method << ',' << l.h << ',' << l.err << ',';
    if (l.has_p_hat) out << l.p_hat;
    out << '\n';
  }
  return out.str();
}

OrderReport empirical_order(const TestProblem& p, Method m, double h0, int levels) {
  if (levels < 2) throw ConfigError("empirical_order: need at least 2 levels");
  OrderReport report;
  report.problem = p.name;
  report.method = method_name(m);
  double h = h0;
  for (int k = 0; k < levels; ++k, h *= 0.5) {
    const double err = global_error(p, m, h);
    if (err < 1e-13) {  // below this floor the ratio is rounding noise
      report.underflow_truncated = true;
      break;
    }
    OrderLevel level;
    level.h = h;
    level.err = err;
    if (!report.levels.empty()) {
      level.has_p_hat = true;
      level.p_hat = std::log2(report.levels.back().err / err);
    }
    report.levels.push_back(level);
  }
  return report;
}

}  // namespace odelab
