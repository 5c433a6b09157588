#pragma once

// Finite-difference verification of every hand-written backward pass, run in
// double precision. Coordinates whose +-h probes change any hash index are
// skipped (the loss is discontinuous there) and counted.

#include <cstdint>
#include <string>

namespace mf {

enum class GradcheckScope { lsh, memory_layer, block, model };

GradcheckScope parse_gradcheck_scope(const std::string& s);
std::string to_string(GradcheckScope s);
double gradcheck_tolerance(GradcheckScope s);

struct GradcheckResult {
  GradcheckScope scope = GradcheckScope::lsh;
  double worst = 0.0;  // worst relative error over all checked coordinates
  std::string worst_at;
  double tolerance = 0.0;
  std::size_t seeds = 0, checked = 0, skipped = 0;
  bool pass() const { return worst < tolerance && checked > skipped; }
};

struct GradcheckOptions {
  std::uint64_t seed = 0;
  std::size_t seeds = 20;
  bool inject_bug = false;  // flips the sign of one bucket-weight gradient term
};

GradcheckResult run_gradcheck(GradcheckScope scope, const GradcheckOptions& options = {});

}  // namespace mf
