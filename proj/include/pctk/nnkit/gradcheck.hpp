#pragma once
//
// Finite-difference verification of reverse-mode gradients.
//
// The caller supplies a deterministic loss closure: loss_fn(true) must run a
// full forward+backward pass and flush gradients into the store; loss_fn(false)
// must run the identical forward pass (same rng streams, same data) and just
// return the loss. Central differences with step fd_eps are then compared
// against the recorded analytic gradients at `samples` randomly chosen
// parameter scalars:
//
//   rel_err = |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)
//

#include <functional>
#include <string>

#include "pctk/nnkit/param.hpp"
#include "pctk/nnkit/rng.hpp"

namespace nnkit {

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_ad = 0.0;
  double worst_fd = 0.0;
  int samples = 0;
};

GradCheckReport grad_check(const std::function<double(bool)>& loss_fn, ParamStore& store,
                           int samples, Rng& rng, double fd_eps = 1e-5);

}  // namespace nnkit
