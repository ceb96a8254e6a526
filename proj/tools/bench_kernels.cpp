// Times the production kernels against their serial reference loops on
// backbone-sized shapes and reports the largest output difference.
//
//   bench_kernels [--repeat N] [--threads N]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <vector>

#include <CLI11.hpp>

#include "instanseg/kernels.hpp"

using namespace instanseg::kernels;

namespace {

double seconds(const std::function<void()>& f, int repeat) {
  f();  // warm-up
  const auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < repeat; ++i) f();
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / repeat;
}

std::vector<double> noise(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> v(n);
  for (double& x : v) x = u(rng);
  return v;
}

double max_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

void row(const char* name, double fast, double ref, double diff) {
  std::printf("%-28s %10.3f ms %10.3f ms %8.1fx   max|diff| %.2e\n", name, fast * 1e3, ref * 1e3, ref / fast, diff);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Kernel benchmark"};
  int repeat = 5, threads = 0;
  app.add_option("--repeat", repeat)->check(CLI::PositiveNumber);
  app.add_option("--threads", threads);
  CLI11_PARSE(app, argc, argv);
  if (threads > 0) set_thread_count(threads);

  std::mt19937_64 rng(1);
  std::printf("%-28s %13s %13s %9s\n", "kernel", "parallel", "reference", "speedup");

  for (const Conv2dDims d : {Conv2dDims{3, 16, 16, 128, 128, 3}, Conv2dDims{3, 64, 64, 32, 32, 3},
                             Conv2dDims{3, 128, 128, 16, 16, 3}, Conv2dDims{3, 32, 16, 128, 128, 1}}) {
    const std::size_t in_n = d.batch * d.in_channels * d.height * d.width;
    const std::size_t out_n = d.batch * d.out_channels * d.height * d.width;
    const auto x = noise(in_n, rng), w = noise(d.out_channels * d.in_channels * d.kernel * d.kernel, rng),
               b = noise(d.out_channels, rng), gy = noise(out_n, rng);
    std::vector<double> y1(out_n), y2(out_n);
    char name[64];
    std::snprintf(name, sizeof name, "conv%zux%zu fwd %zu->%zu @%zu", d.kernel, d.kernel, d.in_channels, d.out_channels,
                  d.height);
    const double tf = seconds([&] { conv2d_forward(d, x, w, b, y1); }, repeat);
    const double tr = seconds([&] { conv2d_forward_reference(d, x, w, b, y2); }, repeat);
    row(name, tf, tr, max_diff(y1, y2));

    std::vector<double> gx1(in_n), gw1(w.size()), gb1(b.size()), gx2(in_n), gw2(w.size()), gb2(b.size());
    std::snprintf(name, sizeof name, "conv%zux%zu bwd %zu->%zu @%zu", d.kernel, d.kernel, d.in_channels, d.out_channels,
                  d.height);
    const double bf = seconds(
        [&] {
          std::fill(gx1.begin(), gx1.end(), 0.0);
          std::fill(gw1.begin(), gw1.end(), 0.0);
          std::fill(gb1.begin(), gb1.end(), 0.0);
          conv2d_backward(d, x, w, gy, gx1, gw1, gb1);
        },
        repeat);
    const double br = seconds(
        [&] {
          std::fill(gx2.begin(), gx2.end(), 0.0);
          std::fill(gw2.begin(), gw2.end(), 0.0);
          std::fill(gb2.begin(), gb2.end(), 0.0);
          conv2d_backward_reference(d, x, w, gy, gx2, gw2, gb2);
        },
        repeat);
    row(name, bf, br, std::max({max_diff(gx1, gx2), max_diff(gw1, gw2), max_diff(gb1, gb2)}));
  }

  {
    const std::size_t planes = 48, h = 128, w = 128;
    const auto x = noise(planes * h * w, rng);
    std::vector<double> y1(planes * h * w / 4), y2(y1.size());
    std::vector<std::uint32_t> a1(y1.size()), a2(y1.size());
    const double tf = seconds([&] { maxpool2x2_forward(planes, h, w, x, y1, a1); }, repeat);
    const double tr = seconds([&] { maxpool2x2_forward_reference(planes, h, w, x, y2, a2); }, repeat);
    row("maxpool2x2 48x128x128", tf, tr, max_diff(y1, y2));
  }
  {
    const BatchNormDims d{3, 16, 128 * 128};
    const auto x = noise(d.batch * d.channels * d.spatial, rng);
    std::vector<double> m1(d.channels), v1(d.channels), m2(d.channels), v2(d.channels);
    const double tf = seconds([&] { batchnorm_stats(d, x, m1, v1); }, repeat);
    const double tr = seconds([&] { batchnorm_stats_reference(d, x, m2, v2); }, repeat);
    row("batchnorm stats 3x16x128^2", tf, tr, std::max(max_diff(m1, m2), max_diff(v1, v2)));
  }
  return 0;
}
