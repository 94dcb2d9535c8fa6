#include <cstdio>

int main() {
  std::puts("odtr: not wired up yet");
  return 1;
}
