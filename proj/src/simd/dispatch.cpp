#include <atomic>
#include <cstdlib>
#include <string>

#include "marq/error.hpp"
#include "marq/simd.hpp"

namespace marq::simd {
namespace {

bool cpu_supports(Isa isa) {
  switch (isa) {
    case Isa::scalar:
      return true;
    case Isa::avx2:
#if defined(MARQ_HAVE_AVX2)
      return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
      return false;
#endif
    case Isa::neon:
#if defined(MARQ_HAVE_NEON)
      return true;
#else
      return false;
#endif
  }
  return false;
}

const Kernels& table_for(Isa isa) {
  switch (isa) {
#if defined(MARQ_HAVE_AVX2)
    case Isa::avx2: return detail::avx2_kernels;
#endif
#if defined(MARQ_HAVE_NEON)
    case Isa::neon: return detail::neon_kernels;
#endif
    default: return detail::scalar_kernels;
  }
}

Isa detect() {
  if (const char* env = std::getenv("MARQ_SIMD")) {
    const std::string want(env);
    for (Isa isa : {Isa::scalar, Isa::avx2, Isa::neon}) {
      if (want == to_string(isa) && cpu_supports(isa)) return isa;
    }
  }
  if (cpu_supports(Isa::avx2)) return Isa::avx2;
  if (cpu_supports(Isa::neon)) return Isa::neon;
  return Isa::scalar;
}

struct Dispatch {
  std::atomic<Isa> isa;
  std::atomic<const Kernels*> table;

  Dispatch() {
    const Isa chosen = detect();
    isa.store(chosen);
    table.store(&table_for(chosen));
  }
};

Dispatch& dispatch() {
  static Dispatch d;
  return d;
}

}  // namespace

std::string_view to_string(Isa isa) {
  switch (isa) {
    case Isa::scalar: return "scalar";
    case Isa::avx2: return "avx2";
    case Isa::neon: return "neon";
  }
  return "unknown";
}

const Kernels& kernels_for(Isa isa) {
  require(cpu_supports(isa), Errc::invalid_argument,
          "SIMD variant " + std::string(to_string(isa)) + " is not available");
  return table_for(isa);
}

std::vector<Isa> available_isas() {
  std::vector<Isa> out;
  for (Isa isa : {Isa::scalar, Isa::avx2, Isa::neon}) {
    if (cpu_supports(isa)) out.push_back(isa);
  }
  return out;
}

Isa active_isa() { return dispatch().isa.load(std::memory_order_relaxed); }

void set_active_isa(Isa isa) {
  const Kernels& table = kernels_for(isa);
  dispatch().isa.store(isa, std::memory_order_relaxed);
  dispatch().table.store(&table, std::memory_order_relaxed);
}

const Kernels& active() { return *dispatch().table.load(std::memory_order_relaxed); }

}  // namespace marq::simd
