#include "uconv/kernels.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace uconv::kernels {

namespace {
#ifdef _OPENMP
int g_max_threads = omp_get_max_threads();
#else
int g_max_threads = 1;
#endif
}  // namespace

int max_threads() { return g_max_threads; }

void set_max_threads(int n) { g_max_threads = n < 1 ? 1 : n; }

}  // namespace uconv::kernels
