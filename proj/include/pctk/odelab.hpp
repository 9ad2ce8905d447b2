#pragma once
//
// odelab — numerical validation harness for the solver combinators.
//
// Integrates small autonomous test problems at a ladder of step sizes and
// estimates each method's empirical convergence order
//   p_hat = log2( E(h) / E(h/2) )
// from max-norm global errors against the closed-form solution. Multistep
// methods bootstrap their first three steps with classical RK4.
//

#include <functional>
#include <string>
#include <vector>

#include "pctk/odekit.hpp"

namespace odelab {

using odekit::StateVector;

struct TestProblem {
  std::string name;
  StateVector y0;
  double horizon = 1.0;
  std::function<StateVector(const StateVector&)> f;      // dy/dt = f(y)
  std::function<StateVector(double)> exact;              // y(t)
};

// dy/dt = -y, y(0) = 1, y(t) = exp(-t). Default horizon matches the
// convergence study configuration.
TestProblem make_decay(double horizon = 2.0);

// Circular oscillator: y1' = y2, y2' = -y1, y(0) = (1, 0),
// y(t) = (cos t, -sin t). One full period by default.
TestProblem make_oscillator();

TestProblem problem_by_name(const std::string& name);

enum class Method { Euler, Rk2, Rk4, Ab4, Am4, Abm4 };

Method method_by_name(const std::string& name);
std::string method_name(Method m);
const std::vector<Method>& all_methods();

// Fixed-step integration over the full horizon; horizon/h must be a positive
// integer (to 1e-9 relative slack).
StateVector integrate(const TestProblem& p, Method m, double h);

// Max-norm distance between integrate(...) at horizon and exact(horizon).
double global_error(const TestProblem& p, Method m, double h);

struct OrderLevel {
  double h = 0.0;
  double err = 0.0;
  bool has_p_hat = false;  // first level has no ratio
  double p_hat = 0.0;
};

struct OrderReport {
  std::string problem;
  std::string method;
  std::vector<OrderLevel> levels;
  bool underflow_truncated = false;  // hit the 1e-13 error floor early

  // Order estimate at the finest non-underflowing level.
  double estimated_order() const;
  std::string to_csv() const;  // header + one row per level
};

// Errors at h0, h0/2, ..., h0/2^(levels-1); stops early if the error
// underflows 1e-13.
OrderReport empirical_order(const TestProblem& p, Method m, double h0, int levels);

struct OrderBand {
  double lo = 0.0;
  double hi = 0.0;
};

// Expected empirical-order band per method (used as the pass/fail gate).
OrderBand order_band(Method m);

}  // namespace odelab
