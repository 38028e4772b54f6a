#pragma once
// Hot numeric loops behind the tensor/autograd layer.
//
// Every kernel exists twice: a plain serial reference (*_serial) and an
// OpenMP version (*_parallel). The parallel versions assign each output
// element to exactly one thread and keep the inner summation order identical
// to the serial code, so the two variants produce bit-identical results and
// runs are reproducible regardless of thread count. The unsuffixed functions
// dispatch on the process-wide backend.

namespace eraser::kernels {

enum class Backend { serial, parallel };

Backend& backend();  // default: parallel when compiled with OpenMP

// ---------------------------------------------------------------------------
// matmul: C[m,n] = op(A) * op(B), where op is optional transpose.
// A is m x k after op, B is k x n after op. accumulate=true adds into C.
// ---------------------------------------------------------------------------
void matmul_serial(const double* A, const double* B, double* C, int m, int k,
                   int n, bool trans_a, bool trans_b, bool accumulate);
void matmul_parallel(const double* A, const double* B, double* C, int m, int k,
                     int n, bool trans_a, bool trans_b, bool accumulate);
void matmul(const double* A, const double* B, double* C, int m, int k, int n,
            bool trans_a = false, bool trans_b = false, bool accumulate = false);

// ---------------------------------------------------------------------------
// conv2d, stride 1, valid padding.
// in [N,C,H,W], w [OC,C,KH,KW], bias [OC], out [N,OC,OH,OW]
// with OH = H-KH+1, OW = W-KW+1.
// ---------------------------------------------------------------------------
struct ConvDims {
    int n, c, h, w;    // input
    int oc, kh, kw;    // filters
    int oh() const { return h - kh + 1; }
    int ow() const { return w - kw + 1; }
};

void conv2d_forward_serial(const double* in, const double* w, const double* bias,
                           double* out, const ConvDims& d);
void conv2d_forward_parallel(const double* in, const double* w, const double* bias,
                             double* out, const ConvDims& d);
void conv2d_forward(const double* in, const double* w, const double* bias,
                    double* out, const ConvDims& d);

void conv2d_grad_input_serial(const double* gout, const double* w, double* gin,
                              const ConvDims& d);
void conv2d_grad_input_parallel(const double* gout, const double* w, double* gin,
                                const ConvDims& d);
void conv2d_grad_input(const double* gout, const double* w, double* gin,
                       const ConvDims& d);

void conv2d_grad_weight_serial(const double* gout, const double* in, double* gw,
                               double* gbias, const ConvDims& d);
void conv2d_grad_weight_parallel(const double* gout, const double* in, double* gw,
                                 double* gbias, const ConvDims& d);
void conv2d_grad_weight(const double* gout, const double* in, double* gw,
                        double* gbias, const ConvDims& d);

// ---------------------------------------------------------------------------
// 2x2 max pooling, stride 2, floor semantics. argmax stores the flat input
// offset of each output's winner for the backward pass.
// in [N,C,H,W] -> out [N,C,H/2,W/2]
// ---------------------------------------------------------------------------
struct PoolDims {
    int n, c, h, w;
    int oh() const { return h / 2; }
    int ow() const { return w / 2; }
};

void maxpool2_forward_serial(const double* in, double* out, int* argmax,
                             const PoolDims& d);
void maxpool2_forward_parallel(const double* in, double* out, int* argmax,
                               const PoolDims& d);
void maxpool2_forward(const double* in, double* out, int* argmax, const PoolDims& d);

void maxpool2_backward(const double* gout, const int* argmax, double* gin,
                       const PoolDims& d);

// ---------------------------------------------------------------------------
// Elementwise / reduction helpers (single implementation, omp if-clause).
// ---------------------------------------------------------------------------
void relu_forward(const double* x, double* y, long n);
void relu_backward(const double* x, const double* gy, double* gx, long n);  // accumulates
void tanh_forward(const double* x, double* y, long n);
void axpy(double a, const double* x, double* y, long n);  // y += a*x
void scale(const double* x, double a, double* y, long n);
void add(const double* a, const double* b, double* y, long n);
void mul(const double* a, const double* b, double* y, long n);

// row-wise softmax, in place safe (x and y may alias): x [rows, cols]
void softmax_rows(const double* x, double* y, int rows, int cols);

}  // namespace eraser::kernels
