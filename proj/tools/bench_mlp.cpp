// Rough throughput probe for an MLP-shaped tape workload.
#include <chrono>
#include <cstdio>
#include <malloc.h>

#include "ndg/rng.hpp"
#include "ndg/tape.hpp"

using namespace ndg;

int main(int argc, char** argv) {
  if (argc > 5) { mallopt(M_MMAP_THRESHOLD, 1 << 30); mallopt(M_TRIM_THRESHOLD, 1 << 30); }
  const std::size_t n = argc > 1 ? std::stoul(argv[1]) : 4096;
  const std::size_t width = argc > 2 ? std::stoul(argv[2]) : 128;
  const int blocks = argc > 3 ? std::stoi(argv[3]) : 5;
  const int iters = argc > 4 ? std::stoi(argv[4]) : 10;

  RngStream rng(1);
  const Array feats = rng.normal_array({n, 48});

  std::vector<std::pair<std::string, Array>> params;
  params.emplace_back("stem_w", rng.normal_array({48, width}));
  params.emplace_back("stem_b", rng.normal_array({1, width}));
  for (int b = 0; b < blocks; ++b) {
    params.emplace_back("w1_" + std::to_string(b), rng.normal_array({width, width}));
    params.emplace_back("b1_" + std::to_string(b), rng.normal_array({1, width}));
    params.emplace_back("w2_" + std::to_string(b), rng.normal_array({width, width}));
    params.emplace_back("b2_" + std::to_string(b), rng.normal_array({1, width}));
  }
  params.emplace_back("head_w", rng.normal_array({width, 4}));

  double total_ms = 0;
  for (int it = 0; it < iters; ++it) {
    auto t0 = std::chrono::steady_clock::now();
    Tape t;
    std::vector<Var> leaves;
    for (auto& [nm, v] : params) leaves.push_back(t.leaf(nm, v));
    Var x = t.constant(feats);
    Var h = add(matmul(x, leaves[0]), leaves[1]);
    for (int b = 0; b < blocks; ++b) {
      Var ln = layernorm_last(h);
      Var f = add(matmul(swish(add(matmul(ln, leaves[2 + 4 * b]), leaves[3 + 4 * b])),
                         leaves[4 + 4 * b]),
                  leaves[5 + 4 * b]);
      h = add(h, f);
    }
    Var out = mean_all(matmul(layernorm_last(h), leaves.back()));
    GradientMap g = t.backward(out);
    auto t1 = std::chrono::steady_clock::now();
    total_ms += std::chrono::duration<double, std::milli>(t1 - t0).count();
  }
  const double flops_fwd = 2.0 * n * (48.0 * width + 2.0 * blocks * width * width + width * 4);
  std::printf("n=%zu width=%zu blocks=%d: %.1f ms/iter (fwd+bwd), fwd %.2f GFLOP, eff %.1f GF/s\n",
              n, width, blocks, total_ms / iters, flops_fwd * 1e-9,
              3.0 * flops_fwd * iters / (total_ms * 1e-3) * 1e-9);
  return 0;
}
