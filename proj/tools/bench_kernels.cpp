// Benchmark: serial reference kernels vs their OpenMP counterparts.
//
// Prints a table of wall times and speedups, and verifies on every shape that
// both variants produce bit-identical outputs (the parallelization contract:
// one thread per output element, identical inner summation order).
//
//   bench_kernels [--repeats N] [--threads N]

#include <algorithm>
#include <array>
#include <chrono>
#include <cstdio>
#include <cstring>
#include <functional>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include <CLI11.hpp>

#include "eraser/kernels.hpp"
#include "eraser/rng.hpp"

using namespace eraser;
using clock_type = std::chrono::steady_clock;

namespace {

double time_best_of(int repeats, const std::function<void()>& fn) {
    double best = 1e300;
    for (int r = 0; r < repeats; ++r) {
        const auto t0 = clock_type::now();
        fn();
        const auto t1 = clock_type::now();
        best = std::min(best,
                        std::chrono::duration<double>(t1 - t0).count());
    }
    return best;
}

std::vector<double> random_vec(std::size_t n, Rng& rng) {
    std::vector<double> v(n);
    for (double& x : v) x = rng.normal();
    return v;
}

struct Row {
    std::string name;
    double serial_s = 0, parallel_s = 0;
    bool identical = false;
};

void print_table(const std::vector<Row>& rows) {
    std::printf("\n%-34s %12s %12s %9s %10s\n", "kernel", "serial (ms)",
                "parallel(ms)", "speedup", "identical");
    std::printf("%-34s %12s %12s %9s %10s\n", std::string(34, '-').c_str(),
                "-----------", "------------", "-------", "---------");
    for (const auto& r : rows)
        std::printf("%-34s %12.3f %12.3f %8.2fx %10s\n", r.name.c_str(),
                    r.serial_s * 1e3, r.parallel_s * 1e3,
                    r.serial_s / std::max(r.parallel_s, 1e-12),
                    r.identical ? "yes" : "NO");
}

}  // namespace

int main(int argc, char** argv) {
    int repeats = 5;
    int threads = 0;
    CLI::App app{"serial vs OpenMP kernel benchmark"};
    app.add_option("--repeats", repeats, "timing repeats, best-of (default 5)");
    app.add_option("--threads", threads, "OpenMP thread count (default: runtime)");
    CLI11_PARSE(app, argc, argv);

#ifdef _OPENMP
    if (threads > 0) omp_set_num_threads(threads);
    std::printf("OpenMP enabled, max threads: %d\n", omp_get_max_threads());
#else
    std::printf("compiled without OpenMP; 'parallel' falls back to serial\n");
#endif

    Rng rng(20240817);
    std::vector<Row> rows;

    // ---- matmul ------------------------------------------------------------
    for (const auto& [m, k, n] : std::vector<std::array<int, 3>>{
             {128, 256, 128}, {512, 512, 512}}) {
        const auto A = random_vec(static_cast<std::size_t>(m) * k, rng);
        const auto B = random_vec(static_cast<std::size_t>(k) * n, rng);
        std::vector<double> Cs(static_cast<std::size_t>(m) * n),
            Cp(static_cast<std::size_t>(m) * n);
        Row row;
        row.name = "matmul " + std::to_string(m) + "x" + std::to_string(k) +
                   "x" + std::to_string(n);
        row.serial_s = time_best_of(repeats, [&] {
            kernels::matmul_serial(A.data(), B.data(), Cs.data(), m, k, n,
                                   false, false, false);
        });
        row.parallel_s = time_best_of(repeats, [&] {
            kernels::matmul_parallel(A.data(), B.data(), Cp.data(), m, k, n,
                                     false, false, false);
        });
        row.identical =
            std::memcmp(Cs.data(), Cp.data(), Cs.size() * sizeof(double)) == 0;
        rows.push_back(row);
    }

    // ---- conv2d forward + gradients -----------------------------------------
    {
        const kernels::ConvDims d{64, 8, 28, 28, 16, 3, 3};
        const auto in = random_vec(
            static_cast<std::size_t>(d.n) * d.c * d.h * d.w, rng);
        const auto w = random_vec(
            static_cast<std::size_t>(d.oc) * d.c * d.kh * d.kw, rng);
        const auto bias = random_vec(static_cast<std::size_t>(d.oc), rng);
        const std::size_t out_n =
            static_cast<std::size_t>(d.n) * d.oc * d.oh() * d.ow();
        std::vector<double> outs(out_n), outp(out_n);

        Row fwd;
        fwd.name = "conv2d fwd 64x8x28x28 -> 16x3x3";
        fwd.serial_s = time_best_of(repeats, [&] {
            kernels::conv2d_forward_serial(in.data(), w.data(), bias.data(),
                                           outs.data(), d);
        });
        fwd.parallel_s = time_best_of(repeats, [&] {
            kernels::conv2d_forward_parallel(in.data(), w.data(), bias.data(),
                                             outp.data(), d);
        });
        fwd.identical = std::memcmp(outs.data(), outp.data(),
                                    out_n * sizeof(double)) == 0;
        rows.push_back(fwd);

        const auto gout = random_vec(out_n, rng);
        std::vector<double> gis(in.size()), gip(in.size());
        Row gin;
        gin.name = "conv2d grad-input (same shape)";
        gin.serial_s = time_best_of(repeats, [&] {
            std::fill(gis.begin(), gis.end(), 0.0);
            kernels::conv2d_grad_input_serial(gout.data(), w.data(), gis.data(), d);
        });
        gin.parallel_s = time_best_of(repeats, [&] {
            std::fill(gip.begin(), gip.end(), 0.0);
            kernels::conv2d_grad_input_parallel(gout.data(), w.data(), gip.data(), d);
        });
        gin.identical = std::memcmp(gis.data(), gip.data(),
                                    gis.size() * sizeof(double)) == 0;
        rows.push_back(gin);

        std::vector<double> gws(w.size()), gwp(w.size()), gbs(bias.size()),
            gbp(bias.size());
        Row gw_row;
        gw_row.name = "conv2d grad-weight (same shape)";
        gw_row.serial_s = time_best_of(repeats, [&] {
            std::fill(gws.begin(), gws.end(), 0.0);
            std::fill(gbs.begin(), gbs.end(), 0.0);
            kernels::conv2d_grad_weight_serial(gout.data(), in.data(),
                                               gws.data(), gbs.data(), d);
        });
        gw_row.parallel_s = time_best_of(repeats, [&] {
            std::fill(gwp.begin(), gwp.end(), 0.0);
            std::fill(gbp.begin(), gbp.end(), 0.0);
            kernels::conv2d_grad_weight_parallel(gout.data(), in.data(),
                                                 gwp.data(), gbp.data(), d);
        });
        gw_row.identical =
            std::memcmp(gws.data(), gwp.data(), gws.size() * sizeof(double)) == 0 &&
            std::memcmp(gbs.data(), gbp.data(), gbs.size() * sizeof(double)) == 0;
        rows.push_back(gw_row);
    }

    // ---- max pooling ---------------------------------------------------------
    {
        const kernels::PoolDims d{128, 16, 26, 26};
        const auto in = random_vec(
            static_cast<std::size_t>(d.n) * d.c * d.h * d.w, rng);
        const std::size_t out_n =
            static_cast<std::size_t>(d.n) * d.c * d.oh() * d.ow();
        std::vector<double> outs(out_n), outp(out_n);
        std::vector<int> args(out_n), argp(out_n);

        Row row;
        row.name = "maxpool2 fwd 128x16x26x26";
        row.serial_s = time_best_of(repeats, [&] {
            kernels::maxpool2_forward_serial(in.data(), outs.data(),
                                             args.data(), d);
        });
        row.parallel_s = time_best_of(repeats, [&] {
            kernels::maxpool2_forward_parallel(in.data(), outp.data(),
                                               argp.data(), d);
        });
        row.identical =
            std::memcmp(outs.data(), outp.data(), out_n * sizeof(double)) == 0 &&
            std::memcmp(args.data(), argp.data(), out_n * sizeof(int)) == 0;
        rows.push_back(row);
    }

    print_table(rows);

    const bool all_identical =
        std::all_of(rows.begin(), rows.end(),
                    [](const Row& r) { return r.identical; });
    if (!all_identical) {
        std::printf("\nERROR: serial and parallel outputs differ\n");
        return 1;
    }
    return 0;
}
