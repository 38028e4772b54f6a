// OpenMP kernels. Each output element is owned by exactly one loop iteration
// and inner sums run in the same order as the serial reference, so results
// match the serial kernels bit for bit.

#include "eraser/kernels.hpp"

#include <algorithm>
#include <cmath>

namespace eraser::kernels {

void matmul_parallel(const double* A, const double* B, double* C, int m, int k,
                     int n, bool trans_a, bool trans_b, bool accumulate) {
    const long lda = trans_a ? m : k;
    const long ldb = trans_b ? k : n;
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int p = 0; p < k; ++p) {
                const double a = trans_a ? A[p * lda + i] : A[i * lda + p];
                const double b = trans_b ? B[j * ldb + p] : B[p * ldb + j];
                acc += a * b;
            }
            if (accumulate)
                C[static_cast<long>(i) * n + j] += acc;
            else
                C[static_cast<long>(i) * n + j] = acc;
        }
    }
}

void conv2d_forward_parallel(const double* in, const double* w, const double* bias,
                             double* out, const ConvDims& d) {
    const int oh = d.oh(), ow = d.ow();
#pragma omp parallel for collapse(2) schedule(static)
    for (int img = 0; img < d.n; ++img) {
        for (int oc = 0; oc < d.oc; ++oc) {
            double* o = out + ((static_cast<long>(img) * d.oc + oc) * oh) * ow;
            for (int y = 0; y < oh; ++y) {
                for (int x = 0; x < ow; ++x) {
                    double acc = bias ? bias[oc] : 0.0;
                    for (int ic = 0; ic < d.c; ++ic) {
                        const double* ip =
                            in + ((static_cast<long>(img) * d.c + ic) * d.h + y) * d.w + x;
                        const double* wp =
                            w + ((static_cast<long>(oc) * d.c + ic) * d.kh) * d.kw;
                        for (int ky = 0; ky < d.kh; ++ky)
                            for (int kx = 0; kx < d.kw; ++kx)
                                acc += ip[ky * d.w + kx] * wp[ky * d.kw + kx];
                    }
                    o[y * ow + x] = acc;
                }
            }
        }
    }
}

void conv2d_grad_input_parallel(const double* gout, const double* w, double* gin,
                                const ConvDims& d) {
    const int oh = d.oh(), ow = d.ow();
#pragma omp parallel for collapse(2) schedule(static)
    for (int img = 0; img < d.n; ++img) {
        for (int ic = 0; ic < d.c; ++ic) {
            double* gi = gin + ((static_cast<long>(img) * d.c + ic) * d.h) * d.w;
            for (int y = 0; y < d.h; ++y) {
                for (int x = 0; x < d.w; ++x) {
                    double acc = 0.0;
                    for (int oc = 0; oc < d.oc; ++oc) {
                        const double* go =
                            gout + ((static_cast<long>(img) * d.oc + oc) * oh) * ow;
                        const double* wp =
                            w + ((static_cast<long>(oc) * d.c + ic) * d.kh) * d.kw;
                        for (int ky = 0; ky < d.kh; ++ky) {
                            const int sy = y - ky;
                            if (sy < 0 || sy >= oh) continue;
                            for (int kx = 0; kx < d.kw; ++kx) {
                                const int sx = x - kx;
                                if (sx < 0 || sx >= ow) continue;
                                acc += go[sy * ow + sx] * wp[ky * d.kw + kx];
                            }
                        }
                    }
                    gi[y * d.w + x] += acc;
                }
            }
        }
    }
}

void conv2d_grad_weight_parallel(const double* gout, const double* in, double* gw,
                                 double* gbias, const ConvDims& d) {
    const int oh = d.oh(), ow = d.ow();
#pragma omp parallel for collapse(2) schedule(static)
    for (int oc = 0; oc < d.oc; ++oc) {
        for (int ic = 0; ic < d.c; ++ic) {
            for (int ky = 0; ky < d.kh; ++ky) {
                for (int kx = 0; kx < d.kw; ++kx) {
                    double acc = 0.0;
                    for (int img = 0; img < d.n; ++img) {
                        const double* go =
                            gout + ((static_cast<long>(img) * d.oc + oc) * oh) * ow;
                        const double* ip =
                            in + ((static_cast<long>(img) * d.c + ic) * d.h + ky) * d.w + kx;
                        for (int y = 0; y < oh; ++y)
                            for (int x = 0; x < ow; ++x)
                                acc += go[y * ow + x] * ip[y * d.w + x];
                    }
                    gw[((static_cast<long>(oc) * d.c + ic) * d.kh + ky) * d.kw + kx] += acc;
                }
            }
        }
    }
    if (gbias) {
#pragma omp parallel for schedule(static)
        for (int oc = 0; oc < d.oc; ++oc) {
            double acc = 0.0;
            for (int img = 0; img < d.n; ++img) {
                const double* go = gout + ((static_cast<long>(img) * d.oc + oc) * oh) * ow;
                for (int i = 0; i < oh * ow; ++i) acc += go[i];
            }
            gbias[oc] += acc;
        }
    }
}

void maxpool2_forward_parallel(const double* in, double* out, int* argmax,
                               const PoolDims& d) {
    const int oh = d.oh(), ow = d.ow();
#pragma omp parallel for collapse(2) schedule(static)
    for (int img = 0; img < d.n; ++img) {
        for (int ch = 0; ch < d.c; ++ch) {
            const long base = (static_cast<long>(img) * d.c + ch) * d.h * d.w;
            const long obase = (static_cast<long>(img) * d.c + ch) * oh * ow;
            for (int y = 0; y < oh; ++y) {
                for (int x = 0; x < ow; ++x) {
                    long best = base + (2 * y) * d.w + 2 * x;
                    double bv = in[best];
                    for (int dy = 0; dy < 2; ++dy)
                        for (int dx = 0; dx < 2; ++dx) {
                            const long idx = base + (2 * y + dy) * d.w + (2 * x + dx);
                            if (in[idx] > bv) {
                                bv = in[idx];
                                best = idx;
                            }
                        }
                    out[obase + y * ow + x] = bv;
                    argmax[obase + y * ow + x] = static_cast<int>(best);
                }
            }
        }
    }
}

}  // namespace eraser::kernels
