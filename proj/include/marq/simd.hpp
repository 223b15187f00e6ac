#pragma once

// Inner-loop kernels shared by the DSP front-ends, the quantizers and the
// autodiff matmuls. Each kernel has a scalar reference implementation and
// vectorized variants (AVX2+FMA on x86-64, NEON on aarch64). The variant is
// chosen once at startup from CPU capabilities; MARQ_SIMD=scalar|avx2|neon
// overrides the choice.
//
// Vector variants reassociate sums, so they agree with the scalar reference to
// rounding, not bit-for-bit. Within one variant every kernel is deterministic.

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

namespace marq::simd {

enum class Isa { scalar, avx2, neon };

std::string_view to_string(Isa isa);

struct Kernels {
  double (*dot)(const double* a, const double* b, std::size_t n);
  // y += a * x
  void (*axpy)(double a, const double* x, double* y, std::size_t n);
  double (*squared_distance)(const double* a, const double* b, std::size_t n);
};

const Kernels& kernels_for(Isa isa);
// Variants compiled in and supported by the running CPU. Always contains scalar.
std::vector<Isa> available_isas();
Isa active_isa();
// Switch the dispatch target (tests and benchmarks). Throws if unavailable.
void set_active_isa(Isa isa);

const Kernels& active();

inline double dot(std::span<const double> a, std::span<const double> b) {
  return active().dot(a.data(), b.data(), a.size());
}
inline void axpy(double a, std::span<const double> x, std::span<double> y) {
  active().axpy(a, x.data(), y.data(), x.size());
}
inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  return active().squared_distance(a.data(), b.data(), a.size());
}

namespace detail {
extern const Kernels scalar_kernels;
#if defined(MARQ_HAVE_AVX2)
extern const Kernels avx2_kernels;
#endif
#if defined(MARQ_HAVE_NEON)
extern const Kernels neon_kernels;
#endif
}  // namespace detail

}  // namespace marq::simd
