#pragma once

#include <ostream>

namespace otok::cli {

// Fast invariant checks; prints one PASS/FAIL line per check. Returns 0 when all pass.
int run_selftest(std::ostream& out);

}  // namespace otok::cli
