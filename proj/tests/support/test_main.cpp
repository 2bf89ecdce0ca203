#define DOCTEST_CONFIG_IMPLEMENT
#include <doctest.h>

#include <cstdio>

#include "multilane/vit.hpp"
#include "support/bound_budget.hpp"

// Runs the suite, then fails the binary if any attention matrix exceeded its
// bound outside the tests that provoke a violation on purpose.
int main(int argc, char** argv) {
  doctest::Context context(argc, argv);
  const int result = context.run();
  if (context.shouldExit()) return result;
  const std::size_t violations = multilane::diagnostics::attention_bound_violations();
  const std::size_t expected = g_expected_bound_violations.load();
  std::printf("attention bound: %zu checks, %zu violations (%zu provoked)\n",
              multilane::diagnostics::attention_bound_checks(), violations, expected);
  return violations == expected ? result : 1;
}
