#pragma once
//
// odekit — solver combinators for explicit ODE steps.
//
// Everything here is generic over a State type. A State must support, via
// ADL-found free functions/operators:
//
//   State operator+(const State&, const State&)   // elementwise, shape-checked
//   State operator*(double, const State&)         // scalar scale
//   bool  all_finite(const State&)
//
// Weighted combinations additionally use `Weight * State`, where Weight is
// either `double` or a differentiable scalar handle supplied by the caller.
// The step size h is absorbed into the stage function G (i.e. G = h·f), so a
// combinator never sees h explicitly; for unit-step residual blocks, G is the
// sublayer itself.
//
// The concrete StateVector below is the plain dense state used by the
// integration lab and the oracle tests.
//

#include <cmath>
#include <deque>
#include <string>
#include <vector>

#include "pctk/common.hpp"

namespace odekit {

using pctk::ConfigError;
using pctk::DomainError;
using pctk::InsufficientHistoryError;
using pctk::NumericsError;
using pctk::ShapeError;

// ====================================================================
//  StateVector — dense f64 state, rank 1..3
// ====================================================================

struct StateVector {
  std::vector<double> data;
  std::vector<int> shape;  // product of dims == data.size()

  StateVector() = default;
  StateVector(std::vector<double> d, std::vector<int> s)
      : data(std::move(d)), shape(std::move(s)) {}

  static StateVector scalar(double v) { return StateVector({v}, {1}); }
  static StateVector zeros(std::vector<int> s) {
    std::size_t n = 1;
    for (int d : s) n *= static_cast<std::size_t>(d);
    return StateVector(std::vector<double>(n, 0.0), std::move(s));
  }

  std::size_t size() const { return data.size(); }
};

inline bool same_shape(const StateVector& a, const StateVector& b) {
  return a.shape == b.shape;
}

inline StateVector operator+(const StateVector& a, const StateVector& b) {
  if (!same_shape(a, b)) throw ShapeError("state shapes differ in +");
  StateVector out = a;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.data[i];
  return out;
}

inline StateVector operator*(double c, const StateVector& a) {
  StateVector out = a;
  for (double& v : out.data) v *= c;
  return out;
}

inline bool all_finite(const StateVector& a) {
  for (double v : a.data)
    if (!std::isfinite(v)) return false;
  return true;
}

// ====================================================================
//  Coefficient schedules
// ====================================================================

// EMA stage weights: w_i = gamma * (1-gamma)^(n-i) for i = 1..n, so the last
// (most recent) stage carries weight gamma. gamma = 1 is allowed for testing
// and collapses the combination onto the final stage.
inline std::vector<double> ema_weights(double gamma, int n) {
  if (!(gamma > 0.0 && gamma <= 1.0))
    throw DomainError("ema_weights: gamma must lie in (0, 1]");
  if (n < 1) throw ConfigError("ema_weights: n must be positive");
  std::vector<double> w(static_cast<std::size_t>(n));
  w[static_cast<std::size_t>(n) - 1] = gamma;
  for (int i = n - 2; i >= 0; --i)
    w[static_cast<std::size_t>(i)] = w[static_cast<std::size_t>(i) + 1] * (1.0 - gamma);
  return w;
}

struct CoefficientSchedule {
  enum class Kind { Classical, Ema, LearnedVector };

  Kind kind = Kind::Classical;
  double gamma = 0.5;           // Ema only
  std::vector<double> weights;  // Classical / LearnedVector only

  static CoefficientSchedule classical(std::vector<double> w) {
    CoefficientSchedule s;
    s.kind = Kind::Classical;
    s.weights = std::move(w);
    return s;
  }
  static CoefficientSchedule classical_rk2() { return classical({0.5, 0.5}); }
  static CoefficientSchedule classical_rk4() {
    return classical({1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0});
  }
  static CoefficientSchedule ema(double gamma) {
    if (!(gamma > 0.0 && gamma <= 1.0))
      throw DomainError("CoefficientSchedule: gamma must lie in (0, 1]");
    CoefficientSchedule s;
    s.kind = Kind::Ema;
    s.gamma = gamma;
    return s;
  }
  static CoefficientSchedule learned(std::vector<double> w) {
    CoefficientSchedule s;
    s.kind = Kind::LearnedVector;
    s.weights = std::move(w);
    return s;
  }

  // Resolve to n concrete stage weights (oldest stage first).
  std::vector<double> effective_weights(int n) const {
    switch (kind) {
      case Kind::Ema:
        return ema_weights(gamma, n);
      case Kind::Classical:
      case Kind::LearnedVector:
        if (static_cast<int>(weights.size()) != n)
          throw ConfigError("CoefficientSchedule: expected " + std::to_string(n) +
                            " weights, have " + std::to_string(weights.size()));
        return weights;
    }
    throw ConfigError("CoefficientSchedule: bad kind");
  }
};

// ====================================================================
//  Derivative history — bounded FIFO, oldest entry first
// ====================================================================

template <class State>
class DerivativeHistory {
 public:
  explicit DerivativeHistory(int capacity) : capacity_(capacity) {
    if (capacity <= 0) throw ConfigError("DerivativeHistory: capacity must be positive");
  }

  void push(State s) {
    if (static_cast<int>(entries_.size()) == capacity_) entries_.pop_front();
    entries_.push_back(std::move(s));
  }
  void clear() { entries_.clear(); }

  int size() const { return static_cast<int>(entries_.size()); }
  int capacity() const { return capacity_; }
  bool full() const { return size() == capacity_; }

  // i = 0 is the oldest stored entry, i = size()-1 the newest.
  const State& entry(int i) const { return entries_.at(static_cast<std::size_t>(i)); }
  const State& newest() const { return entries_.back(); }

 private:
  std::deque<State> entries_;
  int capacity_;
};

// ====================================================================
//  Step results and single-step combinators
// ====================================================================

template <class State>
struct StepResult {
  State next_state;
  std::vector<State> stages;  // the stage values actually combined, in order
};

namespace detail {

template <class State>
void require_finite(const State& s, const char* what) {
  if (!all_finite(s)) throw NumericsError(std::string("non-finite value in ") + what);
}

}  // namespace detail

// Forward Euler: y + G(y).
template <class State, class Field>
StepResult<State> euler_step(const State& y, Field&& g) {
  detail::require_finite(y, "euler_step input");
  State f1 = g(y);
  detail::require_finite(f1, "euler_step stage 1");
  State next = y + f1;
  detail::require_finite(next, "euler_step output");
  return {std::move(next), {std::move(f1)}};
}

// Two-stage step with caller-supplied stage weights (oldest stage first).
// Stage structure: F1 = G(y), F2 = G(y + F1).
template <class State, class Field, class Weight>
StepResult<State> rk2_step_weighted(const State& y, Field&& g,
                                    const std::vector<Weight>& w) {
  if (w.size() != 2) throw ConfigError("rk2_step: schedule must resolve to 2 weights");
  detail::require_finite(y, "rk2_step input");
  State f1 = g(y);
  detail::require_finite(f1, "rk2_step stage 1");
  State f2 = g(y + f1);
  detail::require_finite(f2, "rk2_step stage 2");
  State next = y + w[0] * f1 + w[1] * f2;
  detail::require_finite(next, "rk2_step output");
  return {std::move(next), {std::move(f1), std::move(f2)}};
}

// Four-stage step with caller-supplied stage weights (oldest stage first).
// Stage structure: F1 = G(y), F2 = G(y + F1/2), F3 = G(y + F2/2), F4 = G(y + F3).
template <class State, class Field, class Weight>
StepResult<State> rk4_step_weighted(const State& y, Field&& g,
                                    const std::vector<Weight>& w) {
  if (w.size() != 4) throw ConfigError("rk4_step: schedule must resolve to 4 weights");
  detail::require_finite(y, "rk4_step input");
  State f1 = g(y);
  detail::require_finite(f1, "rk4_step stage 1");
  State f2 = g(y + 0.5 * f1);
  detail::require_finite(f2, "rk4_step stage 2");
  State f3 = g(y + 0.5 * f2);
  detail::require_finite(f3, "rk4_step stage 3");
  State f4 = g(y + f3);
  detail::require_finite(f4, "rk4_step stage 4");
  State next = y + w[0] * f1 + w[1] * f2 + w[2] * f3 + w[3] * f4;
  detail::require_finite(next, "rk4_step output");
  return {std::move(next), {std::move(f1), std::move(f2), std::move(f3), std::move(f4)}};
}

template <class State, class Field>
StepResult<State> rk2_step(const State& y, Field&& g, const CoefficientSchedule& sched) {
  return rk2_step_weighted(y, std::forward<Field>(g), sched.effective_weights(2));
}

template <class State, class Field>
StepResult<State> rk4_step(const State& y, Field&& g, const CoefficientSchedule& sched) {
  return rk4_step_weighted(y, std::forward<Field>(g), sched.effective_weights(4));
}

// y + sum_i alphas[i] * fs[i]. Empty lists are allowed and return y.
template <class State, class Weight>
State multistep_combine(const State& y, const std::vector<State>& fs,
                        const std::vector<Weight>& alphas) {
  if (fs.size() != alphas.size())
    throw ConfigError("multistep_combine: weight count does not match value count");
  detail::require_finite(y, "multistep_combine input");
  State acc = y;
  for (std::size_t i = 0; i < fs.size(); ++i) acc = acc + alphas[i] * fs[i];
  detail::require_finite(acc, "multistep_combine output");
  return acc;
}

// EMA aggregation of already-computed stages (the stage list replaces the
// classical weighted sum): y + sum_i gamma (1-gamma)^(n-i) * F_i.
template <class State>
State ema_predict(const State& y, const std::vector<State>& stages, double gamma) {
  if (stages.empty()) throw ConfigError("ema_predict: stage list is empty");
  return multistep_combine(y, stages, ema_weights(gamma, static_cast<int>(stages.size())));
}

// ====================================================================
//  Multistep formulas (history-based)
// ====================================================================

// 4-step Adams-Bashforth: y + (55 F_t - 59 F_{t-1} + 37 F_{t-2} - 9 F_{t-3}) / 24.
// hist must hold exactly 4 entries, oldest first.
template <class State>
State ab4_step(const State& y, const DerivativeHistory<State>& hist) {
  if (hist.size() != 4)
    throw InsufficientHistoryError("ab4_step: needs exactly 4 stored derivatives, have " +
                                   std::to_string(hist.size()));
  detail::require_finite(y, "ab4_step input");
  State next = y + (55.0 / 24.0) * hist.entry(3) + (-59.0 / 24.0) * hist.entry(2) +
               (37.0 / 24.0) * hist.entry(1) + (-9.0 / 24.0) * hist.entry(0);
  detail::require_finite(next, "ab4_step output");
  return next;
}

// 4-step Adams-Moulton correction with caller-supplied weights, newest first:
// y + w[0] f_new + w[1] F_t + w[2] F_{t-1} + w[3] F_{t-2}.
// hist holds up to 3 entries (oldest first); missing terms are dropped.
template <class State, class Weight>
State am4_correct_weighted(const State& y, const State& f_new,
                           const DerivativeHistory<State>& hist,
                           const std::vector<Weight>& newest_first) {
  if (newest_first.size() != 4)
    throw ConfigError("am4_correct: corrector needs 4 weights, newest first");
  if (hist.size() > 3)
    throw ConfigError("am4_correct: history holds at most 3 entries");
  detail::require_finite(y, "am4_correct input");
  detail::require_finite(f_new, "am4_correct f_new");
  State acc = y + newest_first[0] * f_new;
  for (int j = 0; j < hist.size(); ++j)  // j = 0 is the newest stored entry
    acc = acc + newest_first[static_cast<std::size_t>(j) + 1] * hist.entry(hist.size() - 1 - j);
  detail::require_finite(acc, "am4_correct output");
  return acc;
}

// Classical AM4 weights, newest first: (9, 19, -5, 1) / 24.
inline std::vector<double> am4_classical_weights() {
  return {9.0 / 24.0, 19.0 / 24.0, -5.0 / 24.0, 1.0 / 24.0};
}

// Spec'd double-weight corrector: classical uses the AM4 row above,
// learned-vector uses sched.weights (4 values, newest first).
template <class State>
State am4_correct(const State& y, const State& f_new, const DerivativeHistory<State>& hist,
                  const CoefficientSchedule& sched) {
  switch (sched.kind) {
    case CoefficientSchedule::Kind::Classical:
      return am4_correct_weighted(y, f_new, hist, am4_classical_weights());
    case CoefficientSchedule::Kind::LearnedVector:
      if (sched.weights.size() != 4)
        throw ConfigError("am4_correct: learned corrector needs 4 weights");
      return am4_correct_weighted(y, f_new, hist, sched.weights);
    case CoefficientSchedule::Kind::Ema:
      throw ConfigError("am4_correct: schedule kind must be classical or learned-vector");
  }
  throw ConfigError("am4_correct: bad schedule kind");
}

// Backward-Euler style correction realized by predictor substitution:
// y_{t+1} = y_t + F(P_{t+1}), where f_at_p is the already-evaluated F(P).
template <class State>
State backward_euler_correct(const State& y, const State& f_at_p) {
  detail::require_finite(y, "backward_euler_correct input");
  detail::require_finite(f_at_p, "backward_euler_correct f_at_p");
  State next = y + f_at_p;
  detail::require_finite(next, "backward_euler_correct output");
  return next;
}

}  // namespace odekit
