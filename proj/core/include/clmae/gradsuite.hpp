#pragma once

// Central finite-difference checks over every differentiable operation, the
// model components and the masking-module objectives, in double precision.

#include <cstdint>
#include <string>
#include <vector>

namespace clmae {

struct GradCheckReport {
  std::string component;
  double max_rel_error = 0;
};

/// Inputs are drawn from `seed`; each entry is the worst coordinate of one
/// component (see grad_check for the error measure).
std::vector<GradCheckReport> run_grad_suite(std::uint64_t seed = 0);

}  // namespace clmae
