// fft.hpp — unitary batched multi-dimensional FFT backed by FFTW
#pragma once

#include "closedsys/tensor.hpp"

#include <fftw3.h>

#include <memory>
#include <mutex>

namespace closedsys {

namespace detail {
inline std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}
}  // namespace detail

// Transforms `howmany` interleaved arrays of the given shape: element (batch b, site s) sits at s*howmany + b.
// FFTW_ESTIMATE keeps plans (and therefore results) deterministic across runs.
class UnitaryFft {
 public:
  UnitaryFft(std::vector<int> shape, int howmany = 1) : shape_(std::move(shape)), howmany_(howmany) {
    if (shape_.empty() || howmany_ < 1) throw std::invalid_argument("UnitaryFft: bad shape");
    points_ = 1;
    for (int n : shape_) {
      if (n < 1) throw std::invalid_argument("UnitaryFft: nonpositive extent");
      points_ *= static_cast<std::size_t>(n);
    }
    const std::size_t total = points_ * static_cast<std::size_t>(howmany_);
    auto* buf = fftw_alloc_complex(total);
    std::lock_guard<std::mutex> lock(detail::fftw_planner_mutex());
    const unsigned flags = FFTW_ESTIMATE | FFTW_UNALIGNED;
    fwd_ = fftw_plan_many_dft(static_cast<int>(shape_.size()), shape_.data(), howmany_, buf, nullptr, howmany_, 1, buf,
                              nullptr, howmany_, 1, FFTW_FORWARD, flags);
    bwd_ = fftw_plan_many_dft(static_cast<int>(shape_.size()), shape_.data(), howmany_, buf, nullptr, howmany_, 1, buf,
                              nullptr, howmany_, 1, FFTW_BACKWARD, flags);
    fftw_free(buf);
    if (!fwd_ || !bwd_) throw std::runtime_error("UnitaryFft: FFTW planning failed");
  }
  UnitaryFft(const UnitaryFft&) = delete;
  UnitaryFft& operator=(const UnitaryFft&) = delete;
  ~UnitaryFft() {
    std::lock_guard<std::mutex> lock(detail::fftw_planner_mutex());
    if (fwd_) fftw_destroy_plan(fwd_);
    if (bwd_) fftw_destroy_plan(bwd_);
  }

  std::size_t points() const { return points_; }
  std::size_t size() const { return points_ * static_cast<std::size_t>(howmany_); }

  // sum_x e^{-i k x} f(x) / sqrt(N), in place.
  void forward(cplx* data) const { run(fwd_, data); }
  void backward(cplx* data) const { run(bwd_, data); }
  void forward(Vec& v) const { check(v); run(fwd_, v.data()); }
  void backward(Vec& v) const { check(v); run(bwd_, v.data()); }

 private:
  void check(const Vec& v) const {
    if (static_cast<std::size_t>(v.size()) != size()) throw std::invalid_argument("UnitaryFft: size mismatch");
  }
  void run(fftw_plan p, cplx* data) const {
    auto* d = reinterpret_cast<fftw_complex*>(data);
    fftw_execute_dft(p, d, d);
    const double s = 1.0 / std::sqrt(static_cast<double>(points_));
    Eigen::Map<Vec>(data, static_cast<Eigen::Index>(size())) *= s;
  }

  std::vector<int> shape_;
  int howmany_ = 1;
  std::size_t points_ = 0;
  fftw_plan fwd_ = nullptr;
  fftw_plan bwd_ = nullptr;
};

// Signed integer frequency index for position m of an n-point FFT (0, 1, ..., n/2-1, -n/2, ..., -1).
inline int fft_frequency_index(int m, int n) { return m < (n + 1) / 2 ? m : m - n; }

}  // namespace closedsys
