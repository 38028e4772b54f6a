// Backend dispatch plus the elementwise helpers that share one implementation.

#include "eraser/kernels.hpp"

#include <algorithm>
#include <cmath>

namespace eraser::kernels {

Backend& backend() {
#ifdef _OPENMP
    static Backend b = Backend::parallel;
#else
    static Backend b = Backend::serial;
#endif
    return b;
}

void matmul(const double* A, const double* B, double* C, int m, int k, int n,
            bool trans_a, bool trans_b, bool accumulate) {
    if (backend() == Backend::parallel)
        matmul_parallel(A, B, C, m, k, n, trans_a, trans_b, accumulate);
    else
        matmul_serial(A, B, C, m, k, n, trans_a, trans_b, accumulate);
}

void conv2d_forward(const double* in, const double* w, const double* bias,
                    double* out, const ConvDims& d) {
    if (backend() == Backend::parallel)
        conv2d_forward_parallel(in, w, bias, out, d);
    else
        conv2d_forward_serial(in, w, bias, out, d);
}

void conv2d_grad_input(const double* gout, const double* w, double* gin,
                       const ConvDims& d) {
    if (backend() == Backend::parallel)
        conv2d_grad_input_parallel(gout, w, gin, d);
    else
        conv2d_grad_input_serial(gout, w, gin, d);
}

void conv2d_grad_weight(const double* gout, const double* in, double* gw,
                        double* gbias, const ConvDims& d) {
    if (backend() == Backend::parallel)
        conv2d_grad_weight_parallel(gout, in, gw, gbias, d);
    else
        conv2d_grad_weight_serial(gout, in, gw, gbias, d);
}

void maxpool2_forward(const double* in, double* out, int* argmax, const PoolDims& d) {
    if (backend() == Backend::parallel)
        maxpool2_forward_parallel(in, out, argmax, d);
    else
        maxpool2_forward_serial(in, out, argmax, d);
}

void maxpool2_backward(const double* gout, const int* argmax, double* gin,
                       const PoolDims& d) {
    const long n = static_cast<long>(d.n) * d.c * d.oh() * d.ow();
    // Distinct outputs have distinct argmax slots (2x2 windows do not overlap),
    // so scatter accumulation is race-free.
    const bool par = backend() == Backend::parallel;
#pragma omp parallel for schedule(static) if (par)
    for (long i = 0; i < n; ++i) gin[argmax[i]] += gout[i];
}

void relu_forward(const double* x, double* y, long n) {
    const bool par = backend() == Backend::parallel;
#pragma omp parallel for schedule(static) if (par)
    for (long i = 0; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
}

void relu_backward(const double* x, const double* gy, double* gx, long n) {
    const bool par = backend() == Backend::parallel;
#pragma omp parallel for schedule(static) if (par)
    for (long i = 0; i < n; ++i)
        if (x[i] > 0.0) gx[i] += gy[i];
}

void tanh_forward(const double* x, double* y, long n) {
    const bool par = backend() == Backend::parallel;
#pragma omp parallel for schedule(static) if (par)
    for (long i = 0; i < n; ++i) y[i] = std::tanh(x[i]);
}

void axpy(double a, const double* x, double* y, long n) {
    const bool par = backend() == Backend::parallel;
#pragma omp parallel for schedule(static) if (par)
    for (long i = 0; i < n; ++i) y[i] += a * x[i];
}

void scale(const double* x, double a, double* y, long n) {
    const bool par = backend() == Backend::parallel;
#pragma omp parallel for schedule(static) if (par)
    for (long i = 0; i < n; ++i) y[i] = a * x[i];
}

void add(const double* a, const double* b, double* y, long n) {
    const bool par = backend() == Backend::parallel;
#pragma omp parallel for schedule(static) if (par)
    for (long i = 0; i < n; ++i) y[i] = a[i] + b[i];
}

void mul(const double* a, const double* b, double* y, long n) {
    const bool par = backend() == Backend::parallel;
#pragma omp parallel for schedule(static) if (par)
    for (long i = 0; i < n; ++i) y[i] = a[i] * b[i];
}

void softmax_rows(const double* x, double* y, int rows, int cols) {
    const bool par = backend() == Backend::parallel;
#pragma omp parallel for schedule(static) if (par)
    for (int r = 0; r < rows; ++r) {
        const double* xr = x + static_cast<long>(r) * cols;
        double* yr = y + static_cast<long>(r) * cols;
        double mx = xr[0];
        for (int c = 1; c < cols; ++c) mx = std::max(mx, xr[c]);
        double z = 0.0;
        for (int c = 0; c < cols; ++c) {
            yr[c] = std::exp(xr[c] - mx);
            z += yr[c];
        }
        for (int c = 0; c < cols; ++c) yr[c] /= z;
    }
}

}  // namespace eraser::kernels
