#include "app.hpp"

#include <malloc.h>

#include <iostream>

int main(int argc, char** argv) {
  // Training allocates and frees many mid-sized matrices per step; keeping
  // them off mmap and untrimmed avoids most of the kernel time.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  return rvae::app::run_cli(argc, argv, std::cout, std::cerr);
}
