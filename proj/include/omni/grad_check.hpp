#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "omni/error.hpp"
#include "omni/layout.hpp"
#include "omni/model.hpp"

namespace omni {

struct GradCheckResult {
  double max_rel_error = 0;
  int checked = 0;
  std::string worst;  // "tensor[index]" of the worst entry
};

// Central finite differences on `samples` randomly chosen scalars of the
// trainable groups, evaluated in double precision.
inline GradCheckResult grad_check(const Parameters<float>& params, const InputLayout& layout, double epsilon,
                                  int samples = 200, std::uint64_t seed = 7, GroupSet trainable = GroupSet::all()) {
  require(epsilon >= 1e-6 && epsilon <= 1e-3, "grad_check epsilon must lie in [1e-6, 1e-3]");
  require(samples > 0, "grad_check needs at least one sample");
  auto p = params.cast<double>();
  Parameters<double> grad(p.config());
  loss_and_grad(p, layout, trainable, &grad, 1.0);

  std::vector<int> candidates;
  for (int i = 0; i < static_cast<int>(p.tensors().size()); ++i)
    if (trainable.has(p[i].group)) candidates.push_back(i);
  require(!candidates.empty(), "no trainable tensors to check");

  std::mt19937_64 rng(seed);
  GradCheckResult res;
  for (int s = 0; s < samples; ++s) {
    const int ti = candidates[std::uniform_int_distribution<std::size_t>(0, candidates.size() - 1)(rng)];
    auto& t = p[ti];
    const std::size_t e = std::uniform_int_distribution<std::size_t>(0, t.data.size() - 1)(rng);
    const double orig = t.data[e];
    t.data[e] = orig + epsilon;
    const double up = loss_and_grad(p, layout, trainable, nullptr, 1.0).loss;
    t.data[e] = orig - epsilon;
    const double down = loss_and_grad(p, layout, trainable, nullptr, 1.0).loss;
    t.data[e] = orig;
    const double fd = (up - down) / (2 * epsilon);
    const double an = grad[ti].data[e];
    const double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-8});
    ++res.checked;
    if (rel > res.max_rel_error || res.worst.empty()) {
      if (rel >= res.max_rel_error) {
        res.max_rel_error = rel;
        res.worst = t.name + "[" + std::to_string(e) + "]";
      }
    }
  }
  return res;
}

}  // namespace omni
