#include <chrono>
#include <cstdio>
#include <vector>

#include "snlp/matrix.hpp"
#include "snlp/model.hpp"
#include "snlp/prng.hpp"
#include "snlp/scan.hpp"
#include "snlp/solver.hpp"
#include "snlp/threading.hpp"
#include "snlp/tokens.hpp"

namespace {

double now_ms() {
  using clock = std::chrono::steady_clock;
  return std::chrono::duration<double, std::milli>(clock::now().time_since_epoch()).count();
}

template <typename Fn>
double time_ms(int reps, Fn&& fn) {
  fn();  // warm up
  const double t0 = now_ms();
  for (int i = 0; i < reps; ++i) fn();
  return (now_ms() - t0) / reps;
}

void print_row(const char* name, int threads, double ms, double baseline_ms) {
  std::printf("%-28s %8d %12.3f %10.2fx\n", name, threads, ms, baseline_ms / ms);
}

}  // namespace

int main() {
  snlp::apply_thread_env();
  const int max_threads = snlp::configured_threads();
  std::printf("threads available: %d\n\n", max_threads);
  std::printf("%-28s %8s %12s %10s\n", "kernel", "threads", "ms/call", "speedup");

  // Tree scan vs. the plain sequential recurrence.
  {
    const int n = 1 << 13;
    const int width = 64;
    snlp::Prng prng(7);
    std::vector<snlp::AffineScanElement> elems(n);
    for (auto& e : elems) {
      e.a.resize(width);
      e.b.resize(width);
      for (int i = 0; i < width; ++i) {
        e.a[i] = 0.5f * prng.next_gaussian();
        e.b[i] = prng.next_gaussian();
      }
    }
    snlp::Vector h0(width, 0.1f);

    const double serial_ms =
        time_ms(5, [&] { volatile auto r = snlp::affine_scan_serial(elems, h0).back()[0]; (void)r; });
    print_row("affine_scan_serial", 1, serial_ms, serial_ms);

    snlp::set_threads(1);
    const double tree1_ms =
        time_ms(5, [&] { volatile auto r = snlp::affine_scan(elems, h0).back()[0]; (void)r; });
    print_row("affine_scan", 1, tree1_ms, serial_ms);

    if (max_threads > 1) {
      snlp::set_threads(max_threads);
      const double treeN_ms =
          time_ms(5, [&] { volatile auto r = snlp::affine_scan(elems, h0).back()[0]; (void)r; });
      print_row("affine_scan", max_threads, treeN_ms, serial_ms);
    }

    const auto a = snlp::affine_scan_serial(elems, h0);
    const auto b = snlp::affine_scan(elems, h0);
    double max_diff = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
      for (int j = 0; j < width; ++j) {
        const double d = std::abs(static_cast<double>(a[i][j]) - b[i][j]);
        if (d > max_diff) max_diff = d;
      }
    std::printf("  (scan agreement: max |serial - tree| = %.3g)\n", max_diff);
  }

  // Solver unit sweeps: the per-unit candidate passes are independent and
  // run under OpenMP; compare 1 thread against the configured count.
  {
    snlp::ModelConfig cfg;
    cfg.n_layers = 8;
    cfg.d_model = 32;
    cfg.n_heads = 2;
    cfg.d_ff = 64;
    cfg.vocab_size = 64;
    cfg.max_seq_len = 64;
    snlp::Prng prng(11);
    const snlp::ModelWeights w = snlp::init_model(cfg, prng);
    const auto tokens = snlp::uniform_token_stream(64, cfg.vocab_size, 3);

    snlp::SnlpConfig scfg;
    scfg.plan = snlp::ChunkPlan::parse("8xF1");
    scfg.iterations = 4;
    scfg.surrogate = snlp::Surrogate::Idn;

    snlp::set_threads(1);
    const double solve1_ms =
        time_ms(5, [&] { volatile auto r = snlp::snlp_solve(w, tokens, scfg).logits.at(0, 0); (void)r; });
    print_row("snlp_solve 8xF1 K=4", 1, solve1_ms, solve1_ms);

    if (max_threads > 1) {
      snlp::set_threads(max_threads);
      const double solveN_ms =
          time_ms(5, [&] { volatile auto r = snlp::snlp_solve(w, tokens, scfg).logits.at(0, 0); (void)r; });
      print_row("snlp_solve 8xF1 K=4", max_threads, solveN_ms, solve1_ms);

      snlp::set_threads(1);
      const auto res1 = snlp::snlp_solve(w, tokens, scfg);
      snlp::set_threads(max_threads);
      const auto resN = snlp::snlp_solve(w, tokens, scfg);
      std::printf("  (solver agreement: max |1 thread - %d threads| = %.3g)\n", max_threads,
                  static_cast<double>(snlp::max_abs_diff(res1.logits, resN.logits)));
    }
  }

  return 0;
}
