#pragma once

#include <complex>
#include <cstddef>
#include <span>
#include <vector>

namespace sleepstage::detail {

/// Owning wrapper around one FFTW real-to-complex or complex-to-real plan.
/// Plan creation is serialized internally; execution is safe from any thread
/// that owns the object.
class RealFft {
 public:
  enum class Direction { Forward, Inverse };

  RealFft(std::size_t n, Direction dir);
  ~RealFft();
  RealFft(const RealFft&) = delete;
  RealFft& operator=(const RealFft&) = delete;

  std::size_t size() const { return n_; }
  std::size_t bins() const { return n_ / 2 + 1; }

  // Forward: n real samples -> n/2+1 complex bins (unnormalized).
  void forward(std::span<const double> in, std::span<std::complex<double>> out);
  // Inverse: n/2+1 bins -> n real samples (unnormalized, scaled by n).
  void inverse(std::span<const std::complex<double>> in, std::span<double> out);

 private:
  std::size_t n_;
  Direction dir_;
  double* real_ = nullptr;
  void* spectrum_ = nullptr;
  void* plan_ = nullptr;
};

}  // namespace sleepstage::detail
