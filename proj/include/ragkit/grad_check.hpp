#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "ragkit/rng.hpp"
#include "ragkit/tensor.hpp"

namespace ragkit {

// Compares analytic gradients against central finite differences on sampled
// parameter coordinates:
//
//     err = max over samples of |analytic - cd| / max(|analytic|, |cd|, 1e-8)
//
// loss_fn must be deterministic and close over the given parameters. Run the
// check on the double instantiation of the templated ops: the quotient
// (f(x+h) - f(x-h)) / 2h needs more precision than f32 carries at h = 1e-3,
// while the backward rules under test are the same template code the f32
// build uses.
template <typename T, typename LossFn>
double grad_check(LossFn&& loss_fn, std::vector<Tensor<T>*> params, double h,
                  int samples_per_param = 16, uint64_t seed = 0) {
  for (auto* p : params) p->zero_grad();
  Tensor<T> loss = loss_fn();
  backward(loss);

  Rng rng(seed);
  double max_rel = 0.0;
  for (auto* p : params) {
    const size_t n = p->numel();
    const int samples = std::min<int>(samples_per_param, static_cast<int>(n));
    for (int s = 0; s < samples; ++s) {
      const size_t i = n <= static_cast<size_t>(samples_per_param)
                           ? static_cast<size_t>(s)
                           : static_cast<size_t>(rng.uniform_int(n));
      const T orig = p->at(i);
      p->at(i) = orig + static_cast<T>(h);
      const double f_plus = static_cast<double>(loss_fn().item());
      p->at(i) = orig - static_cast<T>(h);
      const double f_minus = static_cast<double>(loss_fn().item());
      p->at(i) = orig;
      const double cd = (f_plus - f_minus) / (2.0 * h);
      const double analytic = static_cast<double>((*p->grad)[i]);
      const double denom = std::max({std::fabs(analytic), std::fabs(cd), 1e-8});
      max_rel = std::max(max_rel, std::fabs(analytic - cd) / denom);
    }
  }
  return max_rel;
}

}  // namespace ragkit
