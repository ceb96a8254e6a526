#include "instanseg/kernels.hpp"

#include <cblas.h>
#include <omp.h>

#include <cmath>
#include <vector>

namespace instanseg::kernels {

namespace {

using Index = std::ptrdiff_t;

// Unfolds one image (C x H x W) into a (C*k*k) x (H*W) column matrix, zero padded.
void im2col(const double* img, std::size_t channels, std::size_t height, std::size_t width,
            std::size_t k, double* cols) {
  const Index pad = static_cast<Index>((k - 1) / 2);
  const Index h = static_cast<Index>(height), w = static_cast<Index>(width);
  const Index rows = static_cast<Index>(channels * k * k);
#pragma omp parallel for schedule(static)
  for (Index row = 0; row < rows; ++row) {
    const Index c = row / static_cast<Index>(k * k);
    const Index ky = (row / static_cast<Index>(k)) % static_cast<Index>(k);
    const Index kx = row % static_cast<Index>(k);
    const double* plane = img + c * h * w;
    double* dst = cols + row * h * w;
    for (Index y = 0; y < h; ++y) {
      const Index sy = y + ky - pad;
      double* drow = dst + y * w;
      if (sy < 0 || sy >= h) {
        for (Index x = 0; x < w; ++x) drow[x] = 0.0;
        continue;
      }
      const double* srow = plane + sy * w;
      for (Index x = 0; x < w; ++x) {
        const Index sx = x + kx - pad;
        drow[x] = (sx >= 0 && sx < w) ? srow[sx] : 0.0;
      }
    }
  }
}

// Adjoint of im2col: scatters columns back onto the padded image grid.
void col2im_add(const double* cols, std::size_t channels, std::size_t height, std::size_t width,
                std::size_t k, double* img) {
  const Index pad = static_cast<Index>((k - 1) / 2);
  const Index h = static_cast<Index>(height), w = static_cast<Index>(width);
  const Index kk = static_cast<Index>(k);
#pragma omp parallel for schedule(static)
  for (Index c = 0; c < static_cast<Index>(channels); ++c) {
    double* plane = img + c * h * w;
    for (Index ky = 0; ky < kk; ++ky) {
      for (Index kx = 0; kx < kk; ++kx) {
        const double* src = cols + ((c * kk + ky) * kk + kx) * h * w;
        for (Index y = 0; y < h; ++y) {
          const Index sy = y + ky - pad;
          if (sy < 0 || sy >= h) continue;
          for (Index x = 0; x < w; ++x) {
            const Index sx = x + kx - pad;
            if (sx >= 0 && sx < w) plane[sy * w + sx] += src[y * w + x];
          }
        }
      }
    }
  }
}

}  // namespace

void conv2d_forward(const Conv2dDims& d, std::span<const double> input, std::span<const double> weight,
                    std::span<const double> bias, std::span<double> output) {
  const std::size_t hw = d.height * d.width;
  const std::size_t ckk = d.in_channels * d.kernel * d.kernel;
  std::vector<double> cols(d.kernel == 1 ? 0 : ckk * hw);
  for (std::size_t n = 0; n < d.batch; ++n) {
    const double* x = input.data() + n * d.in_channels * hw;
    double* y = output.data() + n * d.out_channels * hw;
    const double* b = x;
    if (d.kernel != 1) {
      im2col(x, d.in_channels, d.height, d.width, d.kernel, cols.data());
      b = cols.data();
    }
#pragma omp parallel for schedule(static)
    for (std::size_t o = 0; o < d.out_channels; ++o) {
      const double v = bias.empty() ? 0.0 : bias[o];
      for (std::size_t i = 0; i < hw; ++i) y[o * hw + i] = v;
    }
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, static_cast<int>(d.out_channels),
                static_cast<int>(hw), static_cast<int>(ckk), 1.0, weight.data(), static_cast<int>(ckk), b,
                static_cast<int>(hw), 1.0, y, static_cast<int>(hw));
  }
}

void conv2d_backward(const Conv2dDims& d, std::span<const double> input, std::span<const double> weight,
                     std::span<const double> grad_output, std::span<double> grad_input,
                     std::span<double> grad_weight, std::span<double> grad_bias) {
  const std::size_t hw = d.height * d.width;
  const std::size_t ckk = d.in_channels * d.kernel * d.kernel;
  const bool unfold = d.kernel != 1;
  std::vector<double> cols(unfold && !grad_weight.empty() ? ckk * hw : 0);
  std::vector<double> dcols(unfold && !grad_input.empty() ? ckk * hw : 0);
  for (std::size_t n = 0; n < d.batch; ++n) {
    const double* x = input.data() + n * d.in_channels * hw;
    const double* dy = grad_output.data() + n * d.out_channels * hw;
    if (!grad_bias.empty()) {
#pragma omp parallel for schedule(static)
      for (std::size_t o = 0; o < d.out_channels; ++o) {
        double s = 0.0;
        for (std::size_t i = 0; i < hw; ++i) s += dy[o * hw + i];
        grad_bias[o] += s;
      }
    }
    if (!grad_weight.empty()) {
      const double* b = x;
      if (unfold) {
        im2col(x, d.in_channels, d.height, d.width, d.kernel, cols.data());
        b = cols.data();
      }
      cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, static_cast<int>(d.out_channels),
                  static_cast<int>(ckk), static_cast<int>(hw), 1.0, dy, static_cast<int>(hw), b,
                  static_cast<int>(hw), 1.0, grad_weight.data(), static_cast<int>(ckk));
    }
    if (!grad_input.empty()) {
      double* dx = grad_input.data() + n * d.in_channels * hw;
      if (unfold) {
        cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, static_cast<int>(ckk), static_cast<int>(hw),
                    static_cast<int>(d.out_channels), 1.0, weight.data(), static_cast<int>(ckk), dy,
                    static_cast<int>(hw), 0.0, dcols.data(), static_cast<int>(hw));
        col2im_add(dcols.data(), d.in_channels, d.height, d.width, d.kernel, dx);
      } else {
        cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, static_cast<int>(ckk), static_cast<int>(hw),
                    static_cast<int>(d.out_channels), 1.0, weight.data(), static_cast<int>(ckk), dy,
                    static_cast<int>(hw), 1.0, dx, static_cast<int>(hw));
      }
    }
  }
}

void conv2d_forward_reference(const Conv2dDims& d, std::span<const double> input,
                              std::span<const double> weight, std::span<const double> bias,
                              std::span<double> output) {
  const Index h = static_cast<Index>(d.height), w = static_cast<Index>(d.width);
  const Index k = static_cast<Index>(d.kernel), pad = static_cast<Index>(d.pad());
  const Index cin = static_cast<Index>(d.in_channels);
  for (Index n = 0; n < static_cast<Index>(d.batch); ++n) {
    for (Index o = 0; o < static_cast<Index>(d.out_channels); ++o) {
      for (Index y = 0; y < h; ++y) {
        for (Index x = 0; x < w; ++x) {
          double s = bias.empty() ? 0.0 : bias[o];
          for (Index c = 0; c < cin; ++c) {
            for (Index ky = 0; ky < k; ++ky) {
              const Index sy = y + ky - pad;
              if (sy < 0 || sy >= h) continue;
              for (Index kx = 0; kx < k; ++kx) {
                const Index sx = x + kx - pad;
                if (sx < 0 || sx >= w) continue;
                s += weight[((o * cin + c) * k + ky) * k + kx] * input[((n * cin + c) * h + sy) * w + sx];
              }
            }
          }
          output[((n * static_cast<Index>(d.out_channels) + o) * h + y) * w + x] = s;
        }
      }
    }
  }
}

void conv2d_backward_reference(const Conv2dDims& d, std::span<const double> input,
                               std::span<const double> weight, std::span<const double> grad_output,
                               std::span<double> grad_input, std::span<double> grad_weight,
                               std::span<double> grad_bias) {
  const Index h = static_cast<Index>(d.height), w = static_cast<Index>(d.width);
  const Index k = static_cast<Index>(d.kernel), pad = static_cast<Index>(d.pad());
  const Index cin = static_cast<Index>(d.in_channels), cout = static_cast<Index>(d.out_channels);
  for (Index n = 0; n < static_cast<Index>(d.batch); ++n) {
    for (Index o = 0; o < cout; ++o) {
      for (Index y = 0; y < h; ++y) {
        for (Index x = 0; x < w; ++x) {
          const double g = grad_output[((n * cout + o) * h + y) * w + x];
          if (!grad_bias.empty()) grad_bias[o] += g;
          for (Index c = 0; c < cin; ++c) {
            for (Index ky = 0; ky < k; ++ky) {
              const Index sy = y + ky - pad;
              if (sy < 0 || sy >= h) continue;
              for (Index kx = 0; kx < k; ++kx) {
                const Index sx = x + kx - pad;
                if (sx < 0 || sx >= w) continue;
                const Index wi = ((o * cin + c) * k + ky) * k + kx;
                const Index xi = ((n * cin + c) * h + sy) * w + sx;
                if (!grad_weight.empty()) grad_weight[wi] += g * input[xi];
                if (!grad_input.empty()) grad_input[xi] += g * weight[wi];
              }
            }
          }
        }
      }
    }
  }
}

void maxpool2x2_forward(std::size_t planes, std::size_t height, std::size_t width,
                        std::span<const double> input, std::span<double> output,
                        std::span<std::uint32_t> argmax) {
  const std::size_t oh = height / 2, ow = width / 2;
#pragma omp parallel for schedule(static)
  for (std::size_t p = 0; p < planes; ++p) {
    const std::size_t in_base = p * height * width;
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x) {
        // Scan order (0,0),(0,1),(1,0),(1,1); strict > keeps the first of ties.
        std::size_t best = in_base + 2 * y * width + 2 * x;
        const std::size_t cand[3] = {best + 1, best + width, best + width + 1};
        for (std::size_t c : cand) {
          if (input[c] > input[best]) best = c;
        }
        const std::size_t o = (p * oh + y) * ow + x;
        output[o] = input[best];
        argmax[o] = static_cast<std::uint32_t>(best);
      }
    }
  }
}

void maxpool2x2_forward_reference(std::size_t planes, std::size_t height, std::size_t width,
                                  std::span<const double> input, std::span<double> output,
                                  std::span<std::uint32_t> argmax) {
  const std::size_t oh = height / 2, ow = width / 2;
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x) {
        std::size_t best = 0;
        bool first = true;
        for (std::size_t dy = 0; dy < 2; ++dy) {
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t i = (p * height + 2 * y + dy) * width + 2 * x + dx;
            if (first || input[i] > input[best]) best = i;
            first = false;
          }
        }
        const std::size_t o = (p * oh + y) * ow + x;
        output[o] = input[best];
        argmax[o] = static_cast<std::uint32_t>(best);
      }
    }
  }
}

void upsample2x_forward(std::size_t planes, std::size_t height, std::size_t width,
                        std::span<const double> input, std::span<double> output) {
  const std::size_t oh = 2 * height, ow = 2 * width;
#pragma omp parallel for schedule(static)
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t y = 0; y < oh; ++y) {
      const double* src = input.data() + (p * height + y / 2) * width;
      double* dst = output.data() + (p * oh + y) * ow;
      for (std::size_t x = 0; x < ow; ++x) dst[x] = src[x / 2];
    }
  }
}

void upsample2x_backward(std::size_t planes, std::size_t height, std::size_t width,
                         std::span<const double> grad_output, std::span<double> grad_input) {
  const std::size_t ow = 2 * width;
#pragma omp parallel for schedule(static)
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t y = 0; y < height; ++y) {
      const double* r0 = grad_output.data() + (p * 2 * height + 2 * y) * ow;
      const double* r1 = r0 + ow;
      double* dst = grad_input.data() + (p * height + y) * width;
      for (std::size_t x = 0; x < width; ++x) {
        dst[x] += (r0[2 * x] + r0[2 * x + 1]) + (r1[2 * x] + r1[2 * x + 1]);
      }
    }
  }
}

void batchnorm_stats(const BatchNormDims& d, std::span<const double> input, std::span<double> mean,
                     std::span<double> var) {
  const double count = static_cast<double>(d.batch * d.spatial);
#pragma omp parallel for schedule(static)
  for (std::size_t c = 0; c < d.channels; ++c) {
    double s = 0.0;
    for (std::size_t n = 0; n < d.batch; ++n) {
      const double* x = input.data() + (n * d.channels + c) * d.spatial;
      for (std::size_t i = 0; i < d.spatial; ++i) s += x[i];
    }
    const double m = s / count;
    double q = 0.0;
    for (std::size_t n = 0; n < d.batch; ++n) {
      const double* x = input.data() + (n * d.channels + c) * d.spatial;
      for (std::size_t i = 0; i < d.spatial; ++i) q += (x[i] - m) * (x[i] - m);
    }
    mean[c] = m;
    var[c] = q / count;
  }
}

void batchnorm_stats_reference(const BatchNormDims& d, std::span<const double> input,
                               std::span<double> mean, std::span<double> var) {
  const double count = static_cast<double>(d.batch * d.spatial);
  for (std::size_t c = 0; c < d.channels; ++c) {
    double s = 0.0;
    for (std::size_t n = 0; n < d.batch; ++n)
      for (std::size_t i = 0; i < d.spatial; ++i) s += input[(n * d.channels + c) * d.spatial + i];
    mean[c] = s / count;
    double q = 0.0;
    for (std::size_t n = 0; n < d.batch; ++n)
      for (std::size_t i = 0; i < d.spatial; ++i) {
        const double v = input[(n * d.channels + c) * d.spatial + i] - mean[c];
        q += v * v;
      }
    var[c] = q / count;
  }
}

void batchnorm_apply(const BatchNormDims& d, std::span<const double> input, std::span<const double> mean,
                     std::span<const double> var, std::span<const double> gamma,
                     std::span<const double> beta, double eps, std::span<double> output) {
#pragma omp parallel for schedule(static)
  for (std::size_t c = 0; c < d.channels; ++c) {
    const double scale = gamma[c] / std::sqrt(var[c] + eps);
    const double shift = beta[c] - mean[c] * scale;
    for (std::size_t n = 0; n < d.batch; ++n) {
      const std::size_t base = (n * d.channels + c) * d.spatial;
      for (std::size_t i = 0; i < d.spatial; ++i) output[base + i] = input[base + i] * scale + shift;
    }
  }
}

void set_thread_count(int threads) {
  if (threads < 1) return;
  omp_set_num_threads(threads);
  openblas_set_num_threads(threads);
}

}  // namespace instanseg::kernels
