#include "instanseg/ops.hpp"

#include <cmath>
#include <stdexcept>

#include "instanseg/kernels.hpp"

namespace instanseg {

namespace {

using Impl = std::shared_ptr<TensorImpl>;

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
}

void require_rank4(const char* op, const Tensor& x) {
  if (x.rank() != 4) {
    throw std::invalid_argument(std::string(op) + ": expected NCHW tensor, got " + shape_str(x.shape()));
  }
}

template <typename F, typename G>
Tensor unary(const char* name, const Tensor& x, F f, G df) {
  std::vector<double> out(x.numel());
  auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  Impl xi = x.impl();
  return detail::make_result(name, x.shape(), std::move(out), {x}, [xi, df](const TensorImpl& o) {
    if (!xi->requires_grad) return;
    auto& g = xi->grad;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * df(xi->data[i], o.data[i]);
  });
}

// Reflect index into [0, n) without repeating the edge sample.
std::size_t reflect_index(std::ptrdiff_t i, std::size_t n) {
  if (n == 1) return 0;
  const std::ptrdiff_t period = 2 * static_cast<std::ptrdiff_t>(n) - 2;
  i %= period;
  if (i < 0) i += period;
  if (i >= static_cast<std::ptrdiff_t>(n)) i = period - i;
  return static_cast<std::size_t>(i);
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, std::size_t padding) {
  require_rank4("conv2d", input);
  if (weight.rank() != 4 || weight.dim(2) != weight.dim(3) || (weight.dim(2) != 1 && weight.dim(2) != 3)) {
    throw std::invalid_argument("conv2d: weight must be OutC x InC x k x k with k in {1,3}, got " +
                                shape_str(weight.shape()));
  }
  if (weight.dim(1) != input.dim(1)) {
    throw std::invalid_argument("conv2d: input " + shape_str(input.shape()) + " has " +
                                std::to_string(input.dim(1)) + " channels but weight " +
                                shape_str(weight.shape()) + " expects " + std::to_string(weight.dim(1)));
  }
  if (padding != (weight.dim(2) - 1) / 2) {
    throw std::invalid_argument("conv2d: padding must be (k-1)/2 for a shape-preserving convolution");
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != weight.dim(0))) {
    throw std::invalid_argument("conv2d: bias " + shape_str(bias.shape()) + " does not match weight " +
                                shape_str(weight.shape()));
  }
  const kernels::Conv2dDims d{input.dim(0), input.dim(1), weight.dim(0), input.dim(2), input.dim(3),
                              weight.dim(2)};
  std::vector<double> out(d.batch * d.out_channels * d.height * d.width);
  kernels::conv2d_forward(d, input.data(), weight.data(),
                          bias.defined() ? bias.data() : std::span<const double>{}, out);
  Impl xi = input.impl(), wi = weight.impl(), bi = bias.defined() ? bias.impl() : nullptr;
  Shape shape{d.batch, d.out_channels, d.height, d.width};
  auto backward = [xi, wi, bi, d](const TensorImpl& o) {
    std::span<double> gx, gw, gb;
    if (xi->requires_grad) gx = xi->grad;
    if (wi->requires_grad) gw = wi->grad;
    if (bi && bi->requires_grad) gb = bi->grad;
    kernels::conv2d_backward(d, xi->data, wi->data, o.grad, gx, gw, gb);
  };
  if (bias.defined()) {
    return detail::make_result("conv2d", std::move(shape), std::move(out), {input, weight, bias}, backward);
  }
  return detail::make_result("conv2d", std::move(shape), std::move(out), {input, weight}, backward);
}

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  const std::size_t k = weight.rank() == 4 ? weight.dim(2) : 1;
  return conv2d(input, weight, bias, (k - 1) / 2);
}

Tensor maxpool2x2(const Tensor& input) {
  require_rank4("maxpool2x2", input);
  const std::size_t h = input.dim(2), w = input.dim(3);
  if (h % 2 || w % 2) {
    throw std::invalid_argument("maxpool2x2: spatial extent " + shape_str(input.shape()) +
                                " is odd; pad to even size first");
  }
  const std::size_t planes = input.dim(0) * input.dim(1);
  std::vector<double> out(planes * (h / 2) * (w / 2));
  auto argmax = std::make_shared<std::vector<std::uint32_t>>(out.size());
  kernels::maxpool2x2_forward(planes, h, w, input.data(), out, *argmax);
  Impl xi = input.impl();
  return detail::make_result("maxpool2x2", {input.dim(0), input.dim(1), h / 2, w / 2}, std::move(out),
                             {input}, [xi, argmax](const TensorImpl& o) {
                               if (!xi->requires_grad) return;
                               for (std::size_t i = 0; i < o.grad.size(); ++i) {
                                 xi->grad[(*argmax)[i]] += o.grad[i];
                               }
                             });
}

Tensor upsample_nearest2x(const Tensor& input) {
  require_rank4("upsample_nearest2x", input);
  const std::size_t h = input.dim(2), w = input.dim(3), planes = input.dim(0) * input.dim(1);
  std::vector<double> out(planes * 4 * h * w);
  kernels::upsample2x_forward(planes, h, w, input.data(), out);
  Impl xi = input.impl();
  return detail::make_result("upsample_nearest2x", {input.dim(0), input.dim(1), 2 * h, 2 * w},
                             std::move(out), {input}, [xi, planes, h, w](const TensorImpl& o) {
                               if (xi->requires_grad) kernels::upsample2x_backward(planes, h, w, o.grad, xi->grad);
                             });
}

Tensor relu(const Tensor& x) {
  return unary(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      "sigmoid", x,
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor log(const Tensor& x) {
  return unary(
      "log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor abs(const Tensor& x) {
  return unary(
      "abs", x, [](double v) { return std::fabs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  return unary(
      "clamp", x, [lo, hi](double v) { return v < lo ? lo : (v > hi ? hi : v); },
      [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

Tensor scale(const Tensor& x, double s) {
  return unary(
      "scale", x, [s](double v) { return s * v; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& x, double s) {
  return unary(
      "add_scalar", x, [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  Impl ai = a.impl(), bi = b.impl();
  return detail::make_result("add", a.shape(), std::move(out), {a, b}, [ai, bi](const TensorImpl& o) {
    for (auto* t : {ai.get(), bi.get()}) {
      if (!t->requires_grad) continue;
      for (std::size_t i = 0; i < o.grad.size(); ++i) t->grad[i] += o.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  Impl ai = a.impl(), bi = b.impl();
  return detail::make_result("sub", a.shape(), std::move(out), {a, b}, [ai, bi](const TensorImpl& o) {
    if (ai->requires_grad)
      for (std::size_t i = 0; i < o.grad.size(); ++i) ai->grad[i] += o.grad[i];
    if (bi->requires_grad)
      for (std::size_t i = 0; i < o.grad.size(); ++i) bi->grad[i] -= o.grad[i];
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  Impl ai = a.impl(), bi = b.impl();
  return detail::make_result("mul", a.shape(), std::move(out), {a, b}, [ai, bi](const TensorImpl& o) {
    if (ai->requires_grad)
      for (std::size_t i = 0; i < o.grad.size(); ++i) ai->grad[i] += o.grad[i] * bi->data[i];
    if (bi->requires_grad)
      for (std::size_t i = 0; i < o.grad.size(); ++i) bi->grad[i] += o.grad[i] * ai->data[i];
  });
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_same_shape("div", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] / b[i];
  Impl ai = a.impl(), bi = b.impl();
  return detail::make_result("div", a.shape(), std::move(out), {a, b}, [ai, bi](const TensorImpl& o) {
    if (ai->requires_grad)
      for (std::size_t i = 0; i < o.grad.size(); ++i) ai->grad[i] += o.grad[i] / bi->data[i];
    if (bi->requires_grad)
      for (std::size_t i = 0; i < o.grad.size(); ++i) bi->grad[i] -= o.grad[i] * o.data[i] / bi->data[i];
  });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  Impl xi = x.impl();
  return detail::make_result("sum", {1}, {s}, {x}, [xi](const TensorImpl& o) {
    if (!xi->requires_grad) return;
    for (auto& g : xi->grad) g += o.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw std::invalid_argument("mean of an empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

BatchNormState BatchNormState::create(std::size_t channels) {
  return BatchNormState{Tensor::zeros({channels}), Tensor::full({channels}, 1.0)};
}

Tensor batchnorm2d(const Tensor& input, const Tensor& gamma, const Tensor& beta, BatchNormState& state,
                   Mode mode) {
  require_rank4("batchnorm2d", input);
  const std::size_t c = input.dim(1);
  if (gamma.numel() != c || beta.numel() != c || state.running_mean.numel() != c) {
    throw std::invalid_argument("batchnorm2d: " + std::to_string(c) + " channels but gamma " +
                                shape_str(gamma.shape()) + ", beta " + shape_str(beta.shape()));
  }
  const kernels::BatchNormDims d{input.dim(0), c, input.dim(2) * input.dim(3)};
  std::vector<double> out(input.numel());
  if (mode == Mode::kEval) {
    kernels::batchnorm_apply(d, input.data(), state.running_mean.data(), state.running_var.data(),
                             gamma.data(), beta.data(), state.eps, out);
    Impl xi = input.impl(), gi = gamma.impl(), bi = beta.impl();
    auto rv = state.running_var.data();
    auto rm = state.running_mean.data();
    std::vector<double> inv_std(c), run_mean(rm.begin(), rm.end());
    for (std::size_t k = 0; k < c; ++k) inv_std[k] = 1.0 / std::sqrt(rv[k] + state.eps);
    return detail::make_result(
        "batchnorm2d_eval", input.shape(), std::move(out), {input, gamma, beta},
        [xi, gi, bi, d, inv_std, run_mean](const TensorImpl& o) {
          for (std::size_t k = 0; k < d.channels; ++k) {
            double sg = 0.0, sgx = 0.0;
            for (std::size_t n = 0; n < d.batch; ++n) {
              const std::size_t base = (n * d.channels + k) * d.spatial;
              for (std::size_t i = 0; i < d.spatial; ++i) {
                const double g = o.grad[base + i];
                sg += g;
                sgx += g * (xi->data[base + i] - run_mean[k]) * inv_std[k];
                if (xi->requires_grad) xi->grad[base + i] += g * gi->data[k] * inv_std[k];
              }
            }
            if (gi->requires_grad) gi->grad[k] += sgx;
            if (bi->requires_grad) bi->grad[k] += sg;
          }
        });
  }

  std::vector<double> mu(c), var(c);
  kernels::batchnorm_stats(d, input.data(), mu, var);
  kernels::batchnorm_apply(d, input.data(), mu, var, gamma.data(), beta.data(), state.eps, out);
  {
    const double count = static_cast<double>(d.batch * d.spatial);
    const double unbias = count > 1.0 ? count / (count - 1.0) : 1.0;
    auto rm = state.running_mean.mutable_data();
    auto rv = state.running_var.mutable_data();
    for (std::size_t k = 0; k < c; ++k) {
      rm[k] = state.momentum * rm[k] + (1.0 - state.momentum) * mu[k];
      rv[k] = state.momentum * rv[k] + (1.0 - state.momentum) * var[k] * unbias;
    }
  }
  std::vector<double> inv_std(c);
  for (std::size_t k = 0; k < c; ++k) inv_std[k] = 1.0 / std::sqrt(var[k] + state.eps);
  Impl xi = input.impl(), gi = gamma.impl(), bi = beta.impl();
  return detail::make_result(
      "batchnorm2d", input.shape(), std::move(out), {input, gamma, beta},
      [xi, gi, bi, d, mu, inv_std](const TensorImpl& o) {
        const double count = static_cast<double>(d.batch * d.spatial);
#pragma omp parallel for schedule(static)
        for (std::size_t k = 0; k < d.channels; ++k) {
          double sg = 0.0, sgx = 0.0;
          for (std::size_t n = 0; n < d.batch; ++n) {
            const std::size_t base = (n * d.channels + k) * d.spatial;
            for (std::size_t i = 0; i < d.spatial; ++i) {
              const double g = o.grad[base + i];
              sg += g;
              sgx += g * (xi->data[base + i] - mu[k]) * inv_std[k];
            }
          }
          if (gi->requires_grad) gi->grad[k] += sgx;
          if (bi->requires_grad) bi->grad[k] += sg;
          if (!xi->requires_grad) continue;
          const double gk = gi->data[k] * inv_std[k];
          const double mg = sg / count, mgx = sgx / count;
          for (std::size_t n = 0; n < d.batch; ++n) {
            const std::size_t base = (n * d.channels + k) * d.spatial;
            for (std::size_t i = 0; i < d.spatial; ++i) {
              const double xhat = (xi->data[base + i] - mu[k]) * inv_std[k];
              xi->grad[base + i] += gk * (o.grad[base + i] - mg - xhat * mgx);
            }
          }
        }
      });
}

Tensor pad_reflect(const Tensor& input, std::size_t top, std::size_t bottom, std::size_t left,
                   std::size_t right) {
  require_rank4("pad_reflect", input);
  const std::size_t planes = input.dim(0) * input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t oh = h + top + bottom, ow = w + left + right;
  auto src_index = std::make_shared<std::vector<std::uint32_t>>(oh * ow);
  for (std::size_t y = 0; y < oh; ++y) {
    const std::size_t sy = reflect_index(static_cast<std::ptrdiff_t>(y) - static_cast<std::ptrdiff_t>(top), h);
    for (std::size_t x = 0; x < ow; ++x) {
      const std::size_t sx =
          reflect_index(static_cast<std::ptrdiff_t>(x) - static_cast<std::ptrdiff_t>(left), w);
      (*src_index)[y * ow + x] = static_cast<std::uint32_t>(sy * w + sx);
    }
  }
  std::vector<double> out(planes * oh * ow);
  auto in = input.data();
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t i = 0; i < oh * ow; ++i) out[p * oh * ow + i] = in[p * h * w + (*src_index)[i]];
  }
  Impl xi = input.impl();
  return detail::make_result("pad_reflect", {input.dim(0), input.dim(1), oh, ow}, std::move(out), {input},
                             [xi, src_index, planes, h, w, oh, ow](const TensorImpl& o) {
                               if (!xi->requires_grad) return;
                               for (std::size_t p = 0; p < planes; ++p)
                                 for (std::size_t i = 0; i < oh * ow; ++i)
                                   xi->grad[p * h * w + (*src_index)[i]] += o.grad[p * oh * ow + i];
                             });
}

namespace {

Tensor crop_impl(const Tensor& input, std::size_t first, std::size_t count, std::size_t top,
                 std::size_t left, std::size_t ch, std::size_t cw) {
  require_rank4("crop", input);
  const std::size_t c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (first + count > input.dim(0) || top + ch > h || left + cw > w) {
    throw std::invalid_argument("crop: window exceeds tensor " + shape_str(input.shape()));
  }
  std::vector<double> out(count * c * ch * cw);
  auto in = input.data();
  for (std::size_t n = 0; n < count; ++n)
    for (std::size_t k = 0; k < c; ++k)
      for (std::size_t y = 0; y < ch; ++y) {
        const double* src = in.data() + (((first + n) * c + k) * h + top + y) * w + left;
        double* dst = out.data() + ((n * c + k) * ch + y) * cw;
        for (std::size_t x = 0; x < cw; ++x) dst[x] = src[x];
      }
  Impl xi = input.impl();
  return detail::make_result("crop", {count, c, ch, cw}, std::move(out), {input},
                             [xi, first, count, c, h, w, top, left, ch, cw](const TensorImpl& o) {
                               if (!xi->requires_grad) return;
                               for (std::size_t n = 0; n < count; ++n)
                                 for (std::size_t k = 0; k < c; ++k)
                                   for (std::size_t y = 0; y < ch; ++y) {
                                     double* dst = xi->grad.data() + (((first + n) * c + k) * h + top + y) * w + left;
                                     const double* src = o.grad.data() + ((n * c + k) * ch + y) * cw;
                                     for (std::size_t x = 0; x < cw; ++x) dst[x] += src[x];
                                   }
                             });
}

}  // namespace

Tensor crop(const Tensor& input, std::size_t top, std::size_t left, std::size_t h, std::size_t w) {
  return crop_impl(input, 0, input.dim(0), top, left, h, w);
}

Tensor crop(const Tensor& input, std::size_t batch_index, std::size_t top, std::size_t left,
            std::size_t h, std::size_t w) {
  return crop_impl(input, batch_index, 1, top, left, h, w);
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  require_rank4("concat_channels", a);
  require_rank4("concat_channels", b);
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    throw std::invalid_argument("concat_channels: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const std::size_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1), hw = a.dim(2) * a.dim(3);
  std::vector<double> out(n * (ca + cb) * hw);
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(a.data().data() + i * ca * hw, ca * hw, out.data() + i * (ca + cb) * hw);
    std::copy_n(b.data().data() + i * cb * hw, cb * hw, out.data() + (i * (ca + cb) + ca) * hw);
  }
  Impl ai = a.impl(), bi = b.impl();
  return detail::make_result("concat_channels", {n, ca + cb, a.dim(2), a.dim(3)}, std::move(out), {a, b},
                             [ai, bi, n, ca, cb, hw](const TensorImpl& o) {
                               for (std::size_t i = 0; i < n; ++i) {
                                 if (ai->requires_grad)
                                   for (std::size_t j = 0; j < ca * hw; ++j)
                                     ai->grad[i * ca * hw + j] += o.grad[i * (ca + cb) * hw + j];
                                 if (bi->requires_grad)
                                   for (std::size_t j = 0; j < cb * hw; ++j)
                                     bi->grad[i * cb * hw + j] += o.grad[(i * (ca + cb) + ca) * hw + j];
                               }
                             });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw std::invalid_argument("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  Impl xi = x.impl();
  return detail::make_result("reshape", std::move(shape), std::vector<double>(x.data().begin(), x.data().end()),
                             {x}, [xi](const TensorImpl& o) {
                               if (!xi->requires_grad) return;
                               for (std::size_t i = 0; i < o.grad.size(); ++i) xi->grad[i] += o.grad[i];
                             });
}

Tensor offsets_from(const Tensor& window, const Tensor& anchor) {
  require_rank4("offsets_from", window);
  if (window.dim(0) != 1 || anchor.shape() != Shape{1, window.dim(1), 1, 1}) {
    throw std::invalid_argument("offsets_from: window " + shape_str(window.shape()) + " vs anchor " +
                                shape_str(anchor.shape()));
  }
  const std::size_t c = window.dim(1), hw = window.dim(2) * window.dim(3);
  std::vector<double> out(c * hw);
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t i = 0; i < hw; ++i) out[k * hw + i] = window[k * hw + i] - anchor[k];
  Impl wi = window.impl(), ai = anchor.impl();
  return detail::make_result("offsets_from", window.shape(), std::move(out), {window, anchor},
                             [wi, ai, c, hw](const TensorImpl& o) {
                               for (std::size_t k = 0; k < c; ++k) {
                                 double s = 0.0;
                                 for (std::size_t i = 0; i < hw; ++i) {
                                   s += o.grad[k * hw + i];
                                   if (wi->requires_grad) wi->grad[k * hw + i] += o.grad[k * hw + i];
                                 }
                                 if (ai->requires_grad) ai->grad[k] -= s;
                               }
                             });
}

}  // namespace instanseg
