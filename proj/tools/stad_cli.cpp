#include <cstdio>

int main() {
  std::fprintf(stderr, "stad: command-line interface not wired up yet\n");
  return 1;
}
