#pragma once

#include <fftw3.h>

#include <complex>
#include <cstddef>
#include <map>
#include <memory>
#include <mutex>
#include <new>
#include <tuple>
#include <vector>

#include "metacs/core.hpp"

namespace metacs::fft {

/// Allocator backed by fftw_malloc so every buffer satisfies the alignment
/// the cached plans were created with.
template <class T>
struct FftwAllocator {
  using value_type = T;
  FftwAllocator() = default;
  template <class U>
  FftwAllocator(const FftwAllocator<U>&) noexcept {}
  T* allocate(std::size_t n) {
    void* p = fftw_malloc(n * sizeof(T));
    if (!p) throw std::bad_alloc();
    return static_cast<T*>(p);
  }
  void deallocate(T* p, std::size_t) noexcept { fftw_free(p); }
  template <class U>
  bool operator==(const FftwAllocator<U>&) const noexcept { return true; }
};

using RealBuffer = std::vector<double, FftwAllocator<double>>;
using ComplexBuffer = std::vector<Complex, FftwAllocator<Complex>>;

/// Smallest n' >= n whose only prime factors are 2, 3, 5, 7.
inline Index fast_size(Index n) {
  if (n <= 1) return 1;
  for (Index m = n;; ++m) {
    Index r = m;
    for (Index p : {2, 3, 5, 7})
      while (r % p == 0) r /= p;
    if (r == 1) return m;
  }
}

namespace detail {

enum class PlanKind { r2c, c2r, c2c_forward, c2c_backward };

struct PlanDeleter {
  void operator()(fftw_plan_s* p) const { fftw_destroy_plan(p); }
};
using PlanHandle = std::unique_ptr<fftw_plan_s, PlanDeleter>;

// Planning in FFTW is not thread-safe; execution through the new-array
// interface is. All plans use FFTW_ESTIMATE so results do not depend on
// timing measurements.
class PlanCache {
 public:
  static PlanCache& instance() {
    static PlanCache cache;
    return cache;
  }

  fftw_plan get(PlanKind kind, Index n0, Index n1) {
    std::lock_guard lock(mutex_);
    auto key = std::make_tuple(kind, n0, n1);
    auto it = plans_.find(key);
    if (it != plans_.end()) return it->second.get();
    const int a = static_cast<int>(n0);
    const int b = static_cast<int>(n1);
    const std::size_t real_n = static_cast<std::size_t>(n0 * n1);
    const std::size_t half_n = static_cast<std::size_t>(n0 * (n1 / 2 + 1));
    fftw_plan plan = nullptr;
    switch (kind) {
      case PlanKind::r2c: {
        RealBuffer in(real_n);
        ComplexBuffer out(half_n);
        plan = fftw_plan_dft_r2c_2d(a, b, in.data(), reinterpret_cast<fftw_complex*>(out.data()),
                                    FFTW_ESTIMATE);
        break;
      }
      case PlanKind::c2r: {
        ComplexBuffer in(half_n);
        RealBuffer out(real_n);
        plan = fftw_plan_dft_c2r_2d(a, b, reinterpret_cast<fftw_complex*>(in.data()), out.data(),
                                    FFTW_ESTIMATE);
        break;
      }
      case PlanKind::c2c_forward:
      case PlanKind::c2c_backward: {
        ComplexBuffer in(real_n), out(real_n);
        plan = fftw_plan_dft_2d(a, b, reinterpret_cast<fftw_complex*>(in.data()),
                                reinterpret_cast<fftw_complex*>(out.data()),
                                kind == PlanKind::c2c_forward ? FFTW_FORWARD : FFTW_BACKWARD,
                                FFTW_ESTIMATE);
        break;
      }
    }
    if (!plan) throw Error("FFTW plan creation failed");
    auto [pos, inserted] = plans_.emplace(key, PlanHandle(plan));
    return pos->second.get();
  }

 private:
  std::mutex mutex_;
  std::map<std::tuple<PlanKind, Index, Index>, PlanHandle> plans_;
};

}  // namespace detail

/// Real <-> half-spectrum 2D transform of an n0 x n1 row-major array.
/// Inverse is unnormalized (multiply by 1/size()).
class RealFft2d {
 public:
  RealFft2d() = default;
  RealFft2d(Index n0, Index n1) : n0_(n0), n1_(n1) {
    auto& cache = detail::PlanCache::instance();
    forward_ = cache.get(detail::PlanKind::r2c, n0, n1);
    inverse_ = cache.get(detail::PlanKind::c2r, n0, n1);
  }

  Index rows() const { return n0_; }
  Index cols() const { return n1_; }
  Index size() const { return n0_ * n1_; }
  Index spectrum_size() const { return n0_ * (n1_ / 2 + 1); }

  RealBuffer real_buffer() const { return RealBuffer(static_cast<std::size_t>(size()), 0.0); }
  ComplexBuffer spectrum_buffer() const {
    return ComplexBuffer(static_cast<std::size_t>(spectrum_size()));
  }

  void forward(RealBuffer& in, ComplexBuffer& out) const {
    fftw_execute_dft_r2c(forward_, in.data(), reinterpret_cast<fftw_complex*>(out.data()));
  }
  /// Destroys `in`.
  void inverse(ComplexBuffer& in, RealBuffer& out) const {
    fftw_execute_dft_c2r(inverse_, reinterpret_cast<fftw_complex*>(in.data()), out.data());
  }

 private:
  Index n0_ = 0, n1_ = 0;
  fftw_plan forward_ = nullptr;
  fftw_plan inverse_ = nullptr;
};

/// Complex 2D transform; inverse is unnormalized.
class ComplexFft2d {
 public:
  ComplexFft2d(Index n0, Index n1) : n0_(n0), n1_(n1) {
    auto& cache = detail::PlanCache::instance();
    forward_ = cache.get(detail::PlanKind::c2c_forward, n0, n1);
    backward_ = cache.get(detail::PlanKind::c2c_backward, n0, n1);
  }

  Index size() const { return n0_ * n1_; }

  void forward(ComplexBuffer& in, ComplexBuffer& out) const {
    fftw_execute_dft(forward_, reinterpret_cast<fftw_complex*>(in.data()),
                     reinterpret_cast<fftw_complex*>(out.data()));
  }
  void backward(ComplexBuffer& in, ComplexBuffer& out) const {
    fftw_execute_dft(backward_, reinterpret_cast<fftw_complex*>(in.data()),
                     reinterpret_cast<fftw_complex*>(out.data()));
  }

 private:
  Index n0_, n1_;
  fftw_plan forward_ = nullptr;
  fftw_plan backward_ = nullptr;
};

}  // namespace metacs::fft
