#include "multiref/kernels.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>

namespace multiref::kernels {

using RowMat = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

namespace {

void check_conv_args(const Tensor& x, const Tensor& w, const Tensor* b, int stride, int pad) {
    if (x.ndim() != 4 || w.ndim() != 4)
        throw config_error("conv2d: expected x (N,C,H,W) and w (Cout,Cin,kh,kw)");
    if (x.dim(1) != w.dim(1))
        throw config_error("conv2d: input channels " + std::to_string(x.dim(1)) +
                           " do not match weight " + std::to_string(w.dim(1)));
    if (b && (b->ndim() != 1 || b->dim(0) != w.dim(0)))
        throw config_error("conv2d: bias shape mismatch");
    if (stride < 1 || pad < 0) throw config_error("conv2d: bad stride/pad");
}

// Gather one sample into a (Cin*kh*kw, Ho*Wo) matrix.
void im2col(const real* x, int C, int H, int W, int kh, int kw, int stride, int pad, int Ho,
            int Wo, real* col) {
    const int cols = Ho * Wo;
    for (int c = 0; c < C; ++c) {
        for (int ki = 0; ki < kh; ++ki) {
            for (int kj = 0; kj < kw; ++kj) {
                real* dst = col + ((static_cast<size_t>(c) * kh + ki) * kw + kj) * cols;
                for (int oi = 0; oi < Ho; ++oi) {
                    const int ii = oi * stride - pad + ki;
                    if (ii < 0 || ii >= H) {
                        std::fill(dst, dst + Wo, 0.0);
                        dst += Wo;
                        continue;
                    }
                    const real* src = x + (static_cast<size_t>(c) * H + ii) * W;
                    for (int oj = 0; oj < Wo; ++oj) {
                        const int jj = oj * stride - pad + kj;
                        *dst++ = (jj >= 0 && jj < W) ? src[jj] : 0.0;
                    }
                }
            }
        }
    }
}

void col2im_accumulate(const real* col, int C, int H, int W, int kh, int kw, int stride, int pad,
                       int Ho, int Wo, real* x) {
    const int cols = Ho * Wo;
    for (int c = 0; c < C; ++c) {
        for (int ki = 0; ki < kh; ++ki) {
            for (int kj = 0; kj < kw; ++kj) {
                const real* src = col + ((static_cast<size_t>(c) * kh + ki) * kw + kj) * cols;
                for (int oi = 0; oi < Ho; ++oi) {
                    const int ii = oi * stride - pad + ki;
                    if (ii < 0 || ii >= H) {
                        src += Wo;
                        continue;
                    }
                    real* dst = x + (static_cast<size_t>(c) * H + ii) * W;
                    for (int oj = 0; oj < Wo; ++oj) {
                        const int jj = oj * stride - pad + kj;
                        if (jj >= 0 && jj < W) dst[jj] += src[oj];
                    }
                    src += Wo;
                }
            }
        }
    }
}

}  // namespace

Tensor conv2d_forward(const Tensor& x, const Tensor& w, const Tensor* b, int stride, int pad) {
    check_conv_args(x, w, b, stride, pad);
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    const int Ho = (H + 2 * pad - kh) / stride + 1;
    const int Wo = (W + 2 * pad - kw) / stride + 1;
    if (Ho <= 0 || Wo <= 0) throw config_error("conv2d: output would be empty");

    Tensor out({N, Cout, Ho, Wo});
    const int krows = C * kh * kw;
    std::vector<real> col(static_cast<size_t>(krows) * Ho * Wo);
    CMapMat wm(w.data(), Cout, krows);
    for (int n = 0; n < N; ++n) {
        im2col(x.data() + static_cast<size_t>(n) * C * H * W, C, H, W, kh, kw, stride, pad, Ho, Wo,
               col.data());
        CMapMat cm(col.data(), krows, Ho * Wo);
        MapMat om(out.data() + static_cast<size_t>(n) * Cout * Ho * Wo, Cout, Ho * Wo);
        om.noalias() = wm * cm;
        if (b) {
            for (int co = 0; co < Cout; ++co) om.row(co).array() += (*b)[static_cast<size_t>(co)];
        }
    }
    return out;
}

void conv2d_backward(const Tensor& x, const Tensor& w, const Tensor& gout, int stride, int pad,
                     Tensor* gx, Tensor* gw, Tensor* gb) {
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    const int Ho = gout.dim(2), Wo = gout.dim(3);
    const int krows = C * kh * kw;

    std::vector<real> col(static_cast<size_t>(krows) * Ho * Wo);
    std::vector<real> dcol(static_cast<size_t>(krows) * Ho * Wo);
    CMapMat wm(w.data(), Cout, krows);
    for (int n = 0; n < N; ++n) {
        CMapMat gm(gout.data() + static_cast<size_t>(n) * Cout * Ho * Wo, Cout, Ho * Wo);
        if (gw) {
            im2col(x.data() + static_cast<size_t>(n) * C * H * W, C, H, W, kh, kw, stride, pad, Ho,
                   Wo, col.data());
            CMapMat cm(col.data(), krows, Ho * Wo);
            MapMat gwm(gw->data(), Cout, krows);
            gwm.noalias() += gm * cm.transpose();
        }
        if (gb) {
            for (int co = 0; co < Cout; ++co) (*gb)[static_cast<size_t>(co)] += gm.row(co).sum();
        }
        if (gx) {
            MapMat dcm(dcol.data(), krows, Ho * Wo);
            dcm.noalias() = wm.transpose() * gm;
            col2im_accumulate(dcol.data(), C, H, W, kh, kw, stride, pad, Ho, Wo,
                              gx->data() + static_cast<size_t>(n) * C * H * W);
        }
    }
}

Tensor avg_pool2_forward(const Tensor& x) {
    if (x.ndim() != 4) throw config_error("avg_pool2: expected (N,C,H,W)");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (H % 2 || W % 2) throw config_error("avg_pool2: spatial dims must be even");
    Tensor out({N, C, H / 2, W / 2});
    const real* src = x.data();
    real* dst = out.data();
    for (int nc = 0; nc < N * C; ++nc) {
        const real* plane = src + static_cast<size_t>(nc) * H * W;
        for (int i = 0; i < H / 2; ++i) {
            for (int j = 0; j < W / 2; ++j) {
                const real* p = plane + (2 * i) * W + 2 * j;
                *dst++ = 0.25 * (p[0] + p[1] + p[W] + p[W + 1]);
            }
        }
    }
    return out;
}

Tensor avg_pool2_backward(const Tensor& gout, int H, int W) {
    const int N = gout.dim(0), C = gout.dim(1), Ho = gout.dim(2), Wo = gout.dim(3);
    Tensor gx({N, C, H, W});
    const real* src = gout.data();
    real* dst = gx.data();
    for (int nc = 0; nc < N * C; ++nc) {
        real* plane = dst + static_cast<size_t>(nc) * H * W;
        for (int i = 0; i < Ho; ++i) {
            for (int j = 0; j < Wo; ++j) {
                const real g = 0.25 * (*src++);
                real* p = plane + (2 * i) * W + 2 * j;
                p[0] += g;
                p[1] += g;
                p[W] += g;
                p[W + 1] += g;
            }
        }
    }
    return gx;
}

Tensor upsample_nearest2_forward(const Tensor& x) {
    if (x.ndim() != 4) throw config_error("upsample_nearest2: expected (N,C,H,W)");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    Tensor out({N, C, 2 * H, 2 * W});
    for (int nc = 0; nc < N * C; ++nc) {
        const real* sp = x.data() + static_cast<size_t>(nc) * H * W;
        real* dp = out.data() + static_cast<size_t>(nc) * 4 * H * W;
        for (int i = 0; i < H; ++i) {
            for (int j = 0; j < W; ++j) {
                const real v = sp[i * W + j];
                real* q = dp + (2 * i) * (2 * W) + 2 * j;
                q[0] = v;
                q[1] = v;
                q[2 * W] = v;
                q[2 * W + 1] = v;
            }
        }
    }
    return out;
}

Tensor upsample_nearest2_backward(const Tensor& gout) {
    const int N = gout.dim(0), C = gout.dim(1), Ho = gout.dim(2), Wo = gout.dim(3);
    const int H = Ho / 2, W = Wo / 2;
    Tensor gx({N, C, H, W});
    for (int nc = 0; nc < N * C; ++nc) {
        const real* gp = gout.data() + static_cast<size_t>(nc) * Ho * Wo;
        real* xp = gx.data() + static_cast<size_t>(nc) * H * W;
        for (int i = 0; i < H; ++i) {
            for (int j = 0; j < W; ++j) {
                const real* q = gp + (2 * i) * Wo + 2 * j;
                xp[i * W + j] = q[0] + q[1] + q[Wo] + q[Wo + 1];
            }
        }
    }
    return gx;
}

Tensor maxpool2d_forward(const Tensor& x, int kernel, int stride) {
    if (x.ndim() != 4) throw config_error("maxpool2d: expected (N,C,H,W)");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Ho = (H - kernel) / stride + 1;
    const int Wo = (W - kernel) / stride + 1;
    if (Ho <= 0 || Wo <= 0) throw config_error("maxpool2d: output would be empty");
    Tensor out({N, C, Ho, Wo});
    real* dst = out.data();
    for (int nc = 0; nc < N * C; ++nc) {
        const real* plane = x.data() + static_cast<size_t>(nc) * H * W;
        for (int oi = 0; oi < Ho; ++oi) {
            for (int oj = 0; oj < Wo; ++oj) {
                real m = -1e300;
                for (int ki = 0; ki < kernel; ++ki)
                    for (int kj = 0; kj < kernel; ++kj)
                        m = std::max(m, plane[(oi * stride + ki) * W + oj * stride + kj]);
                *dst++ = m;
            }
        }
    }
    return out;
}

namespace {

inline real clampr(real v, real lo, real hi) { return v < lo ? lo : (v > hi ? hi : v); }

}  // namespace

Tensor grid_sample_forward(const Tensor& x, const Tensor& grid) {
    if (x.ndim() != 4 || grid.ndim() != 4 || grid.dim(3) != 2)
        throw config_error("grid_sample: expected x (N,C,H,W), grid (N,Ho,Wo,2)");
    if (x.dim(0) != grid.dim(0)) throw config_error("grid_sample: batch mismatch");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Ho = grid.dim(1), Wo = grid.dim(2);
    Tensor out({N, C, Ho, Wo});
    for (int n = 0; n < N; ++n) {
        const real* g = grid.data() + static_cast<size_t>(n) * Ho * Wo * 2;
        for (int oi = 0; oi < Ho; ++oi) {
            for (int oj = 0; oj < Wo; ++oj) {
                const real gx = g[(static_cast<size_t>(oi) * Wo + oj) * 2 + 0];
                const real gy = g[(static_cast<size_t>(oi) * Wo + oj) * 2 + 1];
                // align_corners mapping with border clamp
                real xp = clampr(0.5 * (gx + 1.0) * (W - 1), 0.0, static_cast<real>(W - 1));
                real yp = clampr(0.5 * (gy + 1.0) * (H - 1), 0.0, static_cast<real>(H - 1));
                int x0 = static_cast<int>(std::floor(xp));
                int y0 = static_cast<int>(std::floor(yp));
                if (x0 >= W - 1) x0 = W - 1;
                if (y0 >= H - 1) y0 = H - 1;
                const int x1 = std::min(x0 + 1, W - 1);
                const int y1 = std::min(y0 + 1, H - 1);
                const real wx = xp - x0;
                const real wy = yp - y0;
                for (int c = 0; c < C; ++c) {
                    const real* plane = x.data() + (static_cast<size_t>(n) * C + c) * H * W;
                    const real v00 = plane[y0 * W + x0];
                    const real v01 = plane[y0 * W + x1];
                    const real v10 = plane[y1 * W + x0];
                    const real v11 = plane[y1 * W + x1];
                    const real top = v00 + wx * (v01 - v00);
                    const real bot = v10 + wx * (v11 - v10);
                    out.at(n, c, oi, oj) = top + wy * (bot - top);
                }
            }
        }
    }
    return out;
}

void grid_sample_backward(const Tensor& x, const Tensor& grid, const Tensor& gout, Tensor* gx,
                          Tensor* ggrid) {
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Ho = grid.dim(1), Wo = grid.dim(2);
    for (int n = 0; n < N; ++n) {
        const real* g = grid.data() + static_cast<size_t>(n) * Ho * Wo * 2;
        for (int oi = 0; oi < Ho; ++oi) {
            for (int oj = 0; oj < Wo; ++oj) {
                const real gxv = g[(static_cast<size_t>(oi) * Wo + oj) * 2 + 0];
                const real gyv = g[(static_cast<size_t>(oi) * Wo + oj) * 2 + 1];
                const real xp_raw = 0.5 * (gxv + 1.0) * (W - 1);
                const real yp_raw = 0.5 * (gyv + 1.0) * (H - 1);
                const bool x_in = xp_raw > 0.0 && xp_raw < static_cast<real>(W - 1);
                const bool y_in = yp_raw > 0.0 && yp_raw < static_cast<real>(H - 1);
                const real xp = clampr(xp_raw, 0.0, static_cast<real>(W - 1));
                const real yp = clampr(yp_raw, 0.0, static_cast<real>(H - 1));
                int x0 = static_cast<int>(std::floor(xp));
                int y0 = static_cast<int>(std::floor(yp));
                if (x0 >= W - 1) x0 = W - 1;
                if (y0 >= H - 1) y0 = H - 1;
                const int x1 = std::min(x0 + 1, W - 1);
                const int y1 = std::min(y0 + 1, H - 1);
                const real wx = xp - x0;
                const real wy = yp - y0;
                real dx_acc = 0.0, dy_acc = 0.0;
                for (int c = 0; c < C; ++c) {
                    const real go = gout.at(n, c, oi, oj);
                    const size_t base = (static_cast<size_t>(n) * C + c) * H * W;
                    if (gx) {
                        real* plane = gx->data() + base;
                        plane[y0 * W + x0] += go * (1 - wx) * (1 - wy);
                        plane[y0 * W + x1] += go * wx * (1 - wy);
                        plane[y1 * W + x0] += go * (1 - wx) * wy;
                        plane[y1 * W + x1] += go * wx * wy;
                    }
                    if (ggrid) {
                        const real* plane = x.data() + base;
                        const real v00 = plane[y0 * W + x0];
                        const real v01 = plane[y0 * W + x1];
                        const real v10 = plane[y1 * W + x0];
                        const real v11 = plane[y1 * W + x1];
                        dx_acc += go * ((v01 - v00) * (1 - wy) + (v11 - v10) * wy);
                        dy_acc += go * ((v10 - v00) * (1 - wx) + (v11 - v01) * wx);
                    }
                }
                if (ggrid) {
                    real* gg = ggrid->data() + (static_cast<size_t>(n) * Ho * Wo +
                                                static_cast<size_t>(oi) * Wo + oj) * 2;
                    gg[0] += x_in ? dx_acc * 0.5 * (W - 1) : 0.0;
                    gg[1] += y_in ? dy_acc * 0.5 * (H - 1) : 0.0;
                }
            }
        }
    }
}

Tensor instance_norm_forward(const Tensor& x, const Tensor& gamma, const Tensor& beta, real eps,
                             Tensor* save_mean, Tensor* save_istd) {
    if (x.ndim() != 4) throw config_error("instance_norm: expected (N,C,H,W)");
    const int N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    if (gamma.ndim() != 1 || gamma.dim(0) != C || beta.ndim() != 1 || beta.dim(0) != C)
        throw config_error("instance_norm: affine parameter shape mismatch");
    Tensor out(x.shape());
    if (save_mean) *save_mean = Tensor({N, C});
    if (save_istd) *save_istd = Tensor({N, C});
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
            const real* src = x.data() + (static_cast<size_t>(n) * C + c) * HW;
            real mu = 0.0;
            for (int i = 0; i < HW; ++i) mu += src[i];
            mu /= HW;
            real var = 0.0;
            for (int i = 0; i < HW; ++i) {
                const real d = src[i] - mu;
                var += d * d;
            }
            var /= HW;
            const real istd = 1.0 / std::sqrt(var + eps);
            const real gsc = gamma[static_cast<size_t>(c)];
            const real bof = beta[static_cast<size_t>(c)];
            real* dst = out.data() + (static_cast<size_t>(n) * C + c) * HW;
            for (int i = 0; i < HW; ++i) dst[i] = (src[i] - mu) * istd * gsc + bof;
            if (save_mean) save_mean->at(n, c) = mu;
            if (save_istd) save_istd->at(n, c) = istd;
        }
    }
    return out;
}

void instance_norm_backward(const Tensor& x, const Tensor& gamma, const Tensor& mean,
                            const Tensor& istd, const Tensor& gout, Tensor* gx, Tensor* ggamma,
                            Tensor* gbeta) {
    const int N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
            const real* src = x.data() + (static_cast<size_t>(n) * C + c) * HW;
            const real* go = gout.data() + (static_cast<size_t>(n) * C + c) * HW;
            const real mu = mean.at(n, c);
            const real is = istd.at(n, c);
            real sum_g = 0.0, sum_gx = 0.0;
            for (int i = 0; i < HW; ++i) {
                const real xh = (src[i] - mu) * is;
                sum_g += go[i];
                sum_gx += go[i] * xh;
            }
            if (gbeta) (*gbeta)[static_cast<size_t>(c)] += sum_g;
            if (ggamma) (*ggamma)[static_cast<size_t>(c)] += sum_gx;
            if (gx) {
                const real gsc = gamma[static_cast<size_t>(c)];
                const real mg = sum_g / HW;
                const real mgx = sum_gx / HW;
                real* dst = gx->data() + (static_cast<size_t>(n) * C + c) * HW;
                for (int i = 0; i < HW; ++i) {
                    const real xh = (src[i] - mu) * is;
                    dst[i] += gsc * is * (go[i] - mg - xh * mgx);
                }
            }
        }
    }
}

Tensor identity_grid(int H, int W) {
    Tensor g({H, W, 2});
    for (int i = 0; i < H; ++i) {
        const real gy = (H == 1) ? 0.0 : (2.0 * i - (H - 1)) / static_cast<real>(H - 1);
        for (int j = 0; j < W; ++j) {
            const real gx = (W == 1) ? 0.0 : (2.0 * j - (W - 1)) / static_cast<real>(W - 1);
            g.at(i, j, 0) = gx;
            g.at(i, j, 1) = gy;
        }
    }
    return g;
}

}  // namespace multiref::kernels
