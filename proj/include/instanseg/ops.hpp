#pragma once

// Differentiable operations over Tensor. Shapes must match exactly for the
// binary ops; the only implicit broadcast is scalar scaling.

#include "instanseg/tensor.hpp"

namespace instanseg {

enum class Mode { kTrain, kEval };

// Shape-preserving convolution, stride 1. weight is OutC x InC x k x k with
// k in {1, 3}; padding must equal (k - 1) / 2. bias may be undefined.
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, std::size_t padding);
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias);

Tensor maxpool2x2(const Tensor& input);
Tensor upsample_nearest2x(const Tensor& input);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor log(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor clamp(const Tensor& x, double lo, double hi);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double s);
Tensor add_scalar(const Tensor& x, double s);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

struct BatchNormState {
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.9;  // running <- momentum * running + (1 - momentum) * batch
  double eps = 1e-5;

  static BatchNormState create(std::size_t channels);
};

Tensor batchnorm2d(const Tensor& input, const Tensor& gamma, const Tensor& beta, BatchNormState& state,
                   Mode mode);

// NCHW spatial padding by mirror reflection (edge pixel not repeated). Pads
// larger than the extent fold back repeatedly.
Tensor pad_reflect(const Tensor& input, std::size_t top, std::size_t bottom, std::size_t left,
                   std::size_t right);
// Spatial window [top, top+h) x [left, left+w) of every batch entry.
Tensor crop(const Tensor& input, std::size_t top, std::size_t left, std::size_t h, std::size_t w);
// Same window of one batch entry; output is 1 x C x h x w.
Tensor crop(const Tensor& input, std::size_t batch_index, std::size_t top, std::size_t left,
            std::size_t h, std::size_t w);
Tensor concat_channels(const Tensor& a, const Tensor& b);
Tensor reshape(const Tensor& x, Shape shape);

// window (1 x C x h x w) minus the per-channel vector `anchor` (1 x C x 1 x 1)
// at every pixel.
Tensor offsets_from(const Tensor& window, const Tensor& anchor);

}  // namespace instanseg
