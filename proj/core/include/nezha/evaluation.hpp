#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "nezha/codec.hpp"
#include "nezha/decoder.hpp"

namespace nezha {

// Rank metrics over the non-backfilled portion of a result list. The target
// matches on the full code tuple; rank is 1-based.
double hit_at_k(const std::vector<DecodedItem>& items, const SemanticId& target,
                std::size_t k);
double ndcg_at_k(const std::vector<DecodedItem>& items, const SemanticId& target,
                 std::size_t k);

struct EvalCase {
  DecodeRequest request;
  SemanticId target;
};

using DecodeFn = std::function<DecodeResult(const DecodeRequest&)>;

struct MetricReport {
  double h5 = 0, h10 = 0, n5 = 0, n10 = 0;
  double lt_mean_ms = 0, lt_p50_ms = 0, lt_p90_ms = 0, lt_p99_ms = 0;
  // Fraction of verifier inputs kept, as counted by the decoder itself.
  double valid_rate_pre = 1.0;
  // Fraction of returned items that an independent membership check accepts;
  // NaN when no vocabulary was supplied.
  double valid_rate_post = 0;
  DecodeCounters counters;  // summed over requests
  std::size_t n_requests = 0;
  std::size_t n_backfilled = 0;
  std::size_t n_empty_after_verification = 0;
};

MetricReport evaluate(const std::vector<EvalCase>& cases, const DecodeFn& decode,
                      const Radices& radices, const VocabularySet* vocab = nullptr,
                      std::size_t threads = 1);

struct BenchVariant {
  std::string name;
  DecodeFn decode;
};

struct BenchRow {
  std::string name;
  // Median over repetitions of the per-repetition median across requests.
  double prefill_ms = 0, decode_ms = 0, verify_ms = 0, total_ms = 0;
  double decode_cov = 0;  // coefficient of variation of the decode medians
  bool unstable = false;  // decode_cov above 20%
  // Same four numbers divided by the first variant's prefill median.
  double norm_prefill = 0, norm_decode = 0, norm_verify = 0, norm_total = 0;
  double backbone_calls_per_request = 0;
};

std::vector<BenchRow> benchmark(const std::vector<BenchVariant>& variants,
                                const std::vector<DecodeRequest>& requests,
                                std::size_t repetitions = 5);

std::string render_metric_report(const MetricReport& report);
std::string metric_report_jsonl(const MetricReport& report);
std::string render_bench_table(const std::vector<BenchRow>& rows);
std::string bench_rows_jsonl(const std::vector<BenchRow>& rows);

}  // namespace nezha
