// Acceptance suite: one pass/fail line per criterion.
#include <cstdio>

int main() {
  std::printf("[FAIL] acceptance suite not yet implemented\n");
  return 1;
}
