#include "fft.hpp"

#include <fftw3.h>

#include <algorithm>
#include <mutex>
#include <stdexcept>

namespace sleepstage::detail {

namespace {
std::mutex& planner_mutex() {
  static std::mutex m;
  return m;
}
}  // namespace

RealFft::RealFft(std::size_t n, Direction dir) : n_(n), dir_(dir) {
  if (n == 0) throw std::invalid_argument("FFT size must be positive");
  std::lock_guard lock(planner_mutex());
  real_ = fftw_alloc_real(n);
  auto* spec = fftw_alloc_complex(n / 2 + 1);
  spectrum_ = spec;
  const int size = static_cast<int>(n);
  plan_ = dir == Direction::Forward
              ? fftw_plan_dft_r2c_1d(size, real_, spec, FFTW_ESTIMATE)
              : fftw_plan_dft_c2r_1d(size, spec, real_, FFTW_ESTIMATE);
  if (plan_ == nullptr) throw std::runtime_error("FFTW planning failed");
}

RealFft::~RealFft() {
  std::lock_guard lock(planner_mutex());
  fftw_destroy_plan(static_cast<fftw_plan>(plan_));
  fftw_free(real_);
  fftw_free(spectrum_);
}

void RealFft::forward(std::span<const double> in,
                      std::span<std::complex<double>> out) {
  if (dir_ != Direction::Forward || in.size() != n_ || out.size() != bins()) {
    throw std::invalid_argument("forward FFT size mismatch");
  }
  std::copy(in.begin(), in.end(), real_);
  fftw_execute(static_cast<fftw_plan>(plan_));
  const auto* spec = static_cast<const fftw_complex*>(spectrum_);
  for (std::size_t k = 0; k < bins(); ++k) out[k] = {spec[k][0], spec[k][1]};
}

void RealFft::inverse(std::span<const std::complex<double>> in,
                      std::span<double> out) {
  if (dir_ != Direction::Inverse || in.size() != bins() || out.size() != n_) {
    throw std::invalid_argument("inverse FFT size mismatch");
  }
  auto* spec = static_cast<fftw_complex*>(spectrum_);
  for (std::size_t k = 0; k < bins(); ++k) {
    spec[k][0] = in[k].real();
    spec[k][1] = in[k].imag();
  }
  fftw_execute(static_cast<fftw_plan>(plan_));
  std::copy(real_, real_ + n_, out.begin());
}

}  // namespace sleepstage::detail
