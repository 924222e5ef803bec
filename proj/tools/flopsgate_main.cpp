#include <iostream>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "flopsgate/cli.hpp"

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  // Activation buffers are tens of MB and reallocated every step; keep them on
  // the heap instead of round-tripping through mmap.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  return flopsgate::run_cli({argv + 1, argv + argc}, std::cout, std::cerr);
}
