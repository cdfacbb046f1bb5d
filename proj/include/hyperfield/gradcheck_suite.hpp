// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace hyperfield {

struct GradCheckEntry {
  std::string component;
  double max_relative_error = 0.0;
  std::size_t coordinates = 0;
};

/// Finite-difference checks in double precision for every differentiable
/// component, ending with the full hypernetwork loss on a toy configuration
/// (width 16, two blocks, a two-layer INR of width 2).
std::vector<GradCheckEntry> run_gradcheck_suite(std::uint64_t seed = 0);

}  // namespace hyperfield
