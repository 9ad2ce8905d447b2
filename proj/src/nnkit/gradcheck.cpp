#include "pctk/nnkit/gradcheck.hpp"

#include <cmath>
#include <vector>

namespace nnkit {

GradCheckReport grad_check(const std::function<double(bool)>& loss_fn, ParamStore& store,
                           int samples, Rng& rng, double fd_eps) {
  if (samples < 1) throw pctk::ConfigError("grad_check: samples must be positive");
  if (!(fd_eps > 0.0)) throw pctk::DomainError("grad_check: fd_eps must be positive");

  store.zero_grads();
  loss_fn(true);

  // snapshot the analytic gradients before any perturbation
  std::vector<Tensor> ad(store.size());
  for (std::size_t i = 0; i < store.size(); ++i) ad[i] = store.item(i).grad;

  const std::size_t total = store.total_params();
  if (total == 0) throw pctk::ConfigError("grad_check: store holds no parameters");

  GradCheckReport report;
  report.samples = samples;
  for (int s = 0; s < samples; ++s) {
    // pick a uniformly random scalar across all parameter tensors
    std::uint64_t flat = rng.uniform_index(total);
    std::size_t pi = 0;
    while (flat >= store.item(pi).value.numel()) {
      flat -= store.item(pi).value.numel();
      ++pi;
    }
    Parameter& p = store.item(pi);
    const std::size_t k = static_cast<std::size_t>(flat);
    const double orig = p.value[k];

    p.value[k] = orig + fd_eps;
    const double lp = loss_fn(false);
    p.value[k] = orig - fd_eps;
    const double lm = loss_fn(false);
    p.value[k] = orig;

    const double g_fd = (lp - lm) / (2.0 * fd_eps);
    const double g_ad = ad[pi][k];
    const double rel =
        std::abs(g_ad - g_fd) / std::max(1e-8, std::abs(g_ad) + std::abs(g_fd));
    if (rel > report.max_rel_err) {
      report.max_rel_err = rel;
      report.worst_param = p.name;
      report.worst_index = k;
      report.worst_ad = g_ad;
      report.worst_fd = g_fd;
    }
  }
  return report;
}

}  // namespace nnkit
