#ifndef CMC_PARALLEL_HPP
#define CMC_PARALLEL_HPP

#ifdef CMC_OPENMP
#include <omp.h>
#define CMC_OMP_PRAGMA(content) _Pragma(content)
#else
#define CMC_OMP_PRAGMA(content)
#endif

namespace cmc {

inline int max_threads() {
#ifdef CMC_OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

inline int thread_id() {
#ifdef CMC_OPENMP
    return omp_get_thread_num();
#else
    return 0;
#endif
}

inline void set_threads(int n) {
#ifdef CMC_OPENMP
    if (n > 0) omp_set_num_threads(n);
#else
    (void)n;
#endif
}

}  // namespace cmc

#endif
