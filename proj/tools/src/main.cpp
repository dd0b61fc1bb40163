#include <malloc.h>

#include <iostream>
#include <string>
#include <vector>

#include "carm/app.hpp"

int main(int argc, char** argv) {
  // Training allocates many large short-lived buffers; keep them on the heap.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  std::vector<std::string> args(argv + 1, argv + argc);
  return carm::app::run_command(args, std::cout, std::cerr);
}
