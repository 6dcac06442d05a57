#pragma once

#include "multiref/tensor.hpp"

namespace multiref::kernels {

// Plain-tensor NN kernels. The autodiff layer wraps these; evaluation-only
// code (feature extractors) calls the forward halves directly.

Tensor conv2d_forward(const Tensor& x, const Tensor& w, const Tensor* b, int stride, int pad);
void conv2d_backward(const Tensor& x, const Tensor& w, const Tensor& gout, int stride, int pad,
                     Tensor* gx, Tensor* gw, Tensor* gb);

Tensor avg_pool2_forward(const Tensor& x);
Tensor avg_pool2_backward(const Tensor& gout, int H, int W);

Tensor upsample_nearest2_forward(const Tensor& x);
Tensor upsample_nearest2_backward(const Tensor& gout);

Tensor maxpool2d_forward(const Tensor& x, int kernel, int stride);

Tensor grid_sample_forward(const Tensor& x, const Tensor& grid);
void grid_sample_backward(const Tensor& x, const Tensor& grid, const Tensor& gout, Tensor* gx,
                          Tensor* ggrid);

Tensor instance_norm_forward(const Tensor& x, const Tensor& gamma, const Tensor& beta, real eps,
                             Tensor* save_mean, Tensor* save_istd);
void instance_norm_backward(const Tensor& x, const Tensor& gamma, const Tensor& mean,
                            const Tensor& istd, const Tensor& gout, Tensor* gx, Tensor* ggamma,
                            Tensor* gbeta);

/// Identity sampling grid (H,W,2), coordinates in [-1,1], x first.
Tensor identity_grid(int H, int W);

}  // namespace multiref::kernels
