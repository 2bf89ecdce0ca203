#pragma once

// Precision-neutral interface to the 64-bit gradient check, so the f32
// acceptance driver can call it.

#include <cstddef>
#include <string>
#include <vector>

namespace acceptance {

struct GradientGroup {
  std::string name;
  std::size_t seed = 0;
  std::size_t count = 0;
  double error = 0;
  double grad_norm = 0;
};

std::vector<GradientGroup> pathway_gradients();

// Attention-bound counters of the 64-bit library.
std::size_t f64_bound_checks();
std::size_t f64_bound_violations();

}  // namespace acceptance
