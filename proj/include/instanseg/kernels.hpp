#pragma once

// Raw NCHW compute kernels behind the autodiff ops.
//
// Every hot kernel has two versions: the production one (OpenMP over
// planes/channels, BLAS for the convolution GEMMs) and a plain serial
// `*_reference` loop nest kept for tests and the benchmark tool. Both use a
// fixed accumulation order per output element, so results are reproducible
// run to run; they agree with each other to rounding.

#include <cstddef>
#include <cstdint>
#include <span>

namespace instanseg::kernels {

struct Conv2dDims {
  std::size_t batch, in_channels, out_channels, height, width, kernel;
  std::size_t pad() const { return (kernel - 1) / 2; }
};

void conv2d_forward(const Conv2dDims& d, std::span<const double> input, std::span<const double> weight,
                    std::span<const double> bias, std::span<double> output);
// Accumulates (+=) into whichever gradient spans are non-empty.
void conv2d_backward(const Conv2dDims& d, std::span<const double> input, std::span<const double> weight,
                     std::span<const double> grad_output, std::span<double> grad_input,
                     std::span<double> grad_weight, std::span<double> grad_bias);

void conv2d_forward_reference(const Conv2dDims& d, std::span<const double> input,
                              std::span<const double> weight, std::span<const double> bias,
                              std::span<double> output);
void conv2d_backward_reference(const Conv2dDims& d, std::span<const double> input,
                               std::span<const double> weight, std::span<const double> grad_output,
                               std::span<double> grad_input, std::span<double> grad_weight,
                               std::span<double> grad_bias);

// planes = N*C. `argmax` receives the flat input index chosen per output.
void maxpool2x2_forward(std::size_t planes, std::size_t height, std::size_t width,
                        std::span<const double> input, std::span<double> output,
                        std::span<std::uint32_t> argmax);
void maxpool2x2_forward_reference(std::size_t planes, std::size_t height, std::size_t width,
                                  std::span<const double> input, std::span<double> output,
                                  std::span<std::uint32_t> argmax);

void upsample2x_forward(std::size_t planes, std::size_t height, std::size_t width,
                        std::span<const double> input, std::span<double> output);
void upsample2x_backward(std::size_t planes, std::size_t height, std::size_t width,
                         std::span<const double> grad_output, std::span<double> grad_input);

struct BatchNormDims {
  std::size_t batch, channels, spatial;
};

// Per-channel statistics over batch and space (biased variance).
void batchnorm_stats(const BatchNormDims& d, std::span<const double> input, std::span<double> mean,
                     std::span<double> var);
void batchnorm_stats_reference(const BatchNormDims& d, std::span<const double> input,
                               std::span<double> mean, std::span<double> var);

// y = gamma * (x - mean) / sqrt(var + eps) + beta
void batchnorm_apply(const BatchNormDims& d, std::span<const double> input, std::span<const double> mean,
                     std::span<const double> var, std::span<const double> gamma,
                     std::span<const double> beta, double eps, std::span<double> output);

// Caps both the OpenMP pool and the BLAS threads.
void set_thread_count(int threads);

}  // namespace instanseg::kernels
