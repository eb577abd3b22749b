#include "nezha/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <thread>

#include "nezha/errors.hpp"

namespace nezha {

namespace {

// 1-based rank of the target among non-backfilled items, 0 if absent.
std::size_t rank_of(const std::vector<DecodedItem>& items, const SemanticId& target,
                    std::size_t k) {
  std::size_t rank = 0;
  for (const DecodedItem& it : items) {
    if (it.backfilled) continue;
    ++rank;
    if (rank > k) return 0;
    if (it.id == target) return rank;
  }
  return 0;
}

double percentile(std::vector<double> v, double q) {
  if (v.empty()) return 0;
  std::sort(v.begin(), v.end());
  std::size_t idx = static_cast<std::size_t>(std::ceil(q * static_cast<double>(v.size())));
  if (idx == 0) idx = 1;
  if (idx > v.size()) idx = v.size();
  return v[idx - 1];
}

double median(std::vector<double> v) { return percentile(std::move(v), 0.5); }

std::string json_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '"' || c == '\\') out.push_back('\\');
    out.push_back(c);
  }
  return out;
}

std::string fmt(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

}  // namespace

double hit_at_k(const std::vector<DecodedItem>& items, const SemanticId& target,
                std::size_t k) {
  return rank_of(items, target, k) > 0 ? 1.0 : 0.0;
}

double ndcg_at_k(const std::vector<DecodedItem>& items, const SemanticId& target,
                 std::size_t k) {
  std::size_t rank = rank_of(items, target, k);
  if (rank == 0) return 0.0;
  return 1.0 / std::log2(static_cast<double>(rank) + 1.0);
}

MetricReport evaluate(const std::vector<EvalCase>& cases, const DecodeFn& decode,
                      const Radices& radices, const VocabularySet* vocab,
                      std::size_t threads) {
  if (cases.empty()) throw InputError("evaluate: no cases");
  if (threads < 1) threads = 1;
  threads = std::min(threads, cases.size());

  struct Row {
    double h5, h10, n5, n10, lt;
    DecodeCounters counters;
    std::size_t backfilled, returned, post_valid;
    bool emptied;
  };
  std::vector<Row> rows(cases.size());

  auto run_range = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      validate_id(cases[i].target, radices);
      DecodeResult res = decode(cases[i].request);
      Row& r = rows[i];
      r.h5 = hit_at_k(res.items, cases[i].target, 5);
      r.h10 = hit_at_k(res.items, cases[i].target, 10);
      r.n5 = ndcg_at_k(res.items, cases[i].target, 5);
      r.n10 = ndcg_at_k(res.items, cases[i].target, 10);
      r.lt = res.timings.prefill_ms + res.timings.decode_ms;
      r.counters = res.counters;
      r.backfilled = res.n_backfilled;
      r.emptied = res.empty_after_verification;
      r.returned = 0;
      r.post_valid = 0;
      for (const DecodedItem& it : res.items) {
        if (it.backfilled) continue;
        ++r.returned;
        if (vocab && vocab->contains(encode(it.id, radices))) ++r.post_valid;
      }
    }
  };

  if (threads == 1) {
    run_range(0, cases.size());
  } else {
    std::vector<std::thread> pool;
    std::size_t chunk = (cases.size() + threads - 1) / threads;
    for (std::size_t t = 0; t < threads; ++t) {
      std::size_t begin = t * chunk;
      std::size_t end = std::min(cases.size(), begin + chunk);
      if (begin >= end) break;
      pool.emplace_back(run_range, begin, end);
    }
    for (std::thread& th : pool) th.join();
  }

  MetricReport rep;
  rep.n_requests = cases.size();
  std::vector<double> lts;
  std::size_t returned = 0, post_valid = 0;
  for (const Row& r : rows) {
    rep.h5 += r.h5;
    rep.h10 += r.h10;
    rep.n5 += r.n5;
    rep.n10 += r.n10;
    lts.push_back(r.lt);
    rep.lt_mean_ms += r.lt;
    rep.counters.backbone_calls += r.counters.backbone_calls;
    rep.counters.draft_backbone_calls += r.counters.draft_backbone_calls;
    rep.counters.draft_head_calls += r.counters.draft_head_calls;
    rep.counters.verified_out += r.counters.verified_out;
    rep.counters.verified_kept += r.counters.verified_kept;
    rep.counters.rejections += r.counters.rejections;
    rep.n_backfilled += r.backfilled;
    if (r.emptied) ++rep.n_empty_after_verification;
    returned += r.returned;
    post_valid += r.post_valid;
  }
  double n = static_cast<double>(cases.size());
  rep.h5 /= n;
  rep.h10 /= n;
  rep.n5 /= n;
  rep.n10 /= n;
  rep.lt_mean_ms /= n;
  rep.lt_p50_ms = percentile(lts, 0.50);
  rep.lt_p90_ms = percentile(lts, 0.90);
  rep.lt_p99_ms = percentile(lts, 0.99);
  rep.valid_rate_pre = rep.counters.verified_out
                           ? static_cast<double>(rep.counters.verified_kept) /
                                 static_cast<double>(rep.counters.verified_out)
                           : 1.0;
  rep.valid_rate_post = vocab && returned
                            ? static_cast<double>(post_valid) / static_cast<double>(returned)
                            : std::nan("");
  return rep;
}

std::vector<BenchRow> benchmark(const std::vector<BenchVariant>& variants,
                                const std::vector<DecodeRequest>& requests,
                                std::size_t repetitions) {
  if (variants.empty()) throw InputError("benchmark: no variants");
  if (requests.empty()) throw InputError("benchmark: no requests");
  if (repetitions < 1) throw InputError("benchmark: repetitions must be >= 1");

  std::vector<BenchRow> rows;
  for (const BenchVariant& var : variants) {
    std::vector<double> rep_prefill, rep_decode, rep_verify, rep_total;
    double calls = 0;
    for (std::size_t rep = 0; rep < repetitions; ++rep) {
      std::vector<double> prefill, decode_t, verify, total;
      for (const DecodeRequest& req : requests) {
        DecodeResult res = var.decode(req);
        prefill.push_back(res.timings.prefill_ms);
        decode_t.push_back(res.timings.decode_ms);
        verify.push_back(res.timings.verify_ms);
        total.push_back(res.timings.prefill_ms + res.timings.decode_ms);
        if (rep == 0) calls += static_cast<double>(res.counters.backbone_calls);
      }
      rep_prefill.push_back(median(prefill));
      rep_decode.push_back(median(decode_t));
      rep_verify.push_back(median(verify));
      rep_total.push_back(median(total));
    }
    BenchRow row;
    row.name = var.name;
    row.prefill_ms = median(rep_prefill);
    row.decode_ms = median(rep_decode);
    row.verify_ms = median(rep_verify);
    row.total_ms = median(rep_total);
    row.backbone_calls_per_request = calls / static_cast<double>(requests.size());
    double mean = 0;
    for (double v : rep_decode) mean += v;
    mean /= static_cast<double>(rep_decode.size());
    double var_sum = 0;
    for (double v : rep_decode) var_sum += (v - mean) * (v - mean);
    double sd = std::sqrt(var_sum / static_cast<double>(rep_decode.size()));
    row.decode_cov = mean > 0 ? sd / mean : 0.0;
    row.unstable = row.decode_cov >= 0.20;
    rows.push_back(row);
  }

  double base = rows.front().prefill_ms;
  for (BenchRow& row : rows) {
    if (base > 0) {
      row.norm_prefill = row.prefill_ms / base;
      row.norm_decode = row.decode_ms / base;
      row.norm_verify = row.verify_ms / base;
      row.norm_total = row.total_ms / base;
    }
  }
  return rows;
}

std::string render_metric_report(const MetricReport& rep) {
  std::ostringstream os;
  char buf[256];
  std::snprintf(buf, sizeof buf, "H@5 %.4f  H@10 %.4f  NDCG@5 %.4f  NDCG@10 %.4f\n",
                rep.h5, rep.h10, rep.n5, rep.n10);
  os << buf;
  std::snprintf(buf, sizeof buf,
                "latency ms: mean %.3f  p50 %.3f  p90 %.3f  p99 %.3f\n",
                rep.lt_mean_ms, rep.lt_p50_ms, rep.lt_p90_ms, rep.lt_p99_ms);
  os << buf;
  if (std::isnan(rep.valid_rate_post)) {
    std::snprintf(buf, sizeof buf, "valid rate: pre %.4f  post n/a\n", rep.valid_rate_pre);
  } else {
    std::snprintf(buf, sizeof buf, "valid rate: pre %.4f  post %.4f\n", rep.valid_rate_pre,
                  rep.valid_rate_post);
  }
  os << buf;
  os << "requests " << rep.n_requests << "  backbone calls " << rep.counters.backbone_calls
     << "  draft calls " << rep.counters.draft_backbone_calls << "  head calls "
     << rep.counters.draft_head_calls << "\n";
  os << "verified " << rep.counters.verified_kept << "/" << rep.counters.verified_out
     << "  rejections " << rep.counters.rejections << "  backfilled " << rep.n_backfilled
     << "  emptied " << rep.n_empty_after_verification << "\n";
  return os.str();
}

std::string metric_report_jsonl(const MetricReport& rep) {
  std::ostringstream os;
  os << "{\"h5\":" << fmt(rep.h5) << ",\"h10\":" << fmt(rep.h10) << ",\"ndcg5\":" << fmt(rep.n5)
     << ",\"ndcg10\":" << fmt(rep.n10) << ",\"lt_mean_ms\":" << fmt(rep.lt_mean_ms)
     << ",\"lt_p50_ms\":" << fmt(rep.lt_p50_ms) << ",\"lt_p90_ms\":" << fmt(rep.lt_p90_ms)
     << ",\"lt_p99_ms\":" << fmt(rep.lt_p99_ms) << ",\"valid_rate_pre\":"
     << fmt(rep.valid_rate_pre) << ",\"valid_rate_post\":"
     << (std::isnan(rep.valid_rate_post) ? std::string("null") : fmt(rep.valid_rate_post))
     << ",\"backbone_calls\":" << rep.counters.backbone_calls << ",\"draft_backbone_calls\":"
     << rep.counters.draft_backbone_calls << ",\"draft_head_calls\":"
     << rep.counters.draft_head_calls << ",\"verified_out\":" << rep.counters.verified_out
     << ",\"verified_kept\":" << rep.counters.verified_kept << ",\"rejections\":"
     << rep.counters.rejections << ",\"backfilled\":" << rep.n_backfilled
     << ",\"emptied\":" << rep.n_empty_after_verification << ",\"n_requests\":"
     << rep.n_requests << "}\n";
  return os.str();
}

std::string render_bench_table(const std::vector<BenchRow>& rows) {
  std::ostringstream os;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-12s %10s %10s %10s %10s | %8s %8s %8s %8s %9s %s\n",
                "variant", "prefill", "decode", "system", "total", "xprefill", "xdecode",
                "xsystem", "xtotal", "calls/req", "flags");
  os << buf;
  for (const BenchRow& r : rows) {
    std::snprintf(buf, sizeof buf,
                  "%-12s %9.3fms %9.3fms %9.3fms %9.3fms | %8.3f %8.3f %8.3f %8.3f %9.1f %s\n",
                  r.name.c_str(), r.prefill_ms, r.decode_ms, r.verify_ms, r.total_ms,
                  r.norm_prefill, r.norm_decode, r.norm_verify, r.norm_total,
                  r.backbone_calls_per_request, r.unstable ? "UNSTABLE" : "");
    os << buf;
  }
  return os.str();
}

std::string bench_rows_jsonl(const std::vector<BenchRow>& rows) {
  std::ostringstream os;
  for (const BenchRow& r : rows) {
    os << "{\"variant\":\"" << json_escape(r.name) << "\",\"prefill_ms\":" << fmt(r.prefill_ms)
       << ",\"decode_ms\":" << fmt(r.decode_ms) << ",\"verify_ms\":" << fmt(r.verify_ms)
       << ",\"total_ms\":" << fmt(r.total_ms) << ",\"norm_prefill\":" << fmt(r.norm_prefill)
       << ",\"norm_decode\":" << fmt(r.norm_decode) << ",\"norm_verify\":" << fmt(r.norm_verify)
       << ",\"norm_total\":" << fmt(r.norm_total) << ",\"decode_cov\":" << fmt(r.decode_cov)
       << ",\"unstable\":" << (r.unstable ? "true" : "false")
       << ",\"backbone_calls_per_request\":" << fmt(r.backbone_calls_per_request) << "}\n";
  }
  return os.str();
}

}  // namespace nezha
