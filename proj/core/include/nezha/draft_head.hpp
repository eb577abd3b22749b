#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nezha/backbone.hpp"
#include "nezha/codec.hpp"
#include "nezha/params.hpp"

namespace nezha {

// Ablation variants of the self-drafting head. The logit input and the
// state transition vary; everything else is shared plumbing.
//   kNezha          — full head: combine(h_l, s_l) logits, gated transition
//   kNoState        — drops the context state, logits from h_l alone
//   kNoPlaceholder  — drops the placeholder hidden states, logits from s_l
//   kAddTransition  — full logits, but the transition is s_l + e_l
//   kMtp            — parallel multi-token baseline: every position's
//                     logits come from h_0, no sequential state at all
enum class HeadVariant { kNezha, kNoState, kNoPlaceholder, kAddTransition, kMtp };

enum class CombineRule { kSum, kConcat };

HeadVariant head_variant_from_string(const std::string& name);
std::string to_string(HeadVariant v);

struct HeadConfig {
  HeadVariant variant = HeadVariant::kNezha;
  // How (h_l, s_l) merge before the position-l linear layer. Sum keeps
  // the layer's input width at d_hid; concat doubles it.
  CombineRule combine = CombineRule::kSum;
  // One transition cell for all positions instead of per-position cells.
  bool share_transition = false;
  // Reuse the backbone's token embeddings (code-band rows) as drafted
  // token embeddings instead of a dedicated table.
  bool tie_code_embeddings = false;
};

class DraftHead {
 public:
  DraftHead(HeadConfig config, Radices radices, std::size_t d_hid, TokenBands bands);

  const HeadConfig& config() const { return config_; }
  const Radices& radices() const { return radices_; }
  std::size_t d_hid() const { return d_hid_; }

  // Whether the variant carries a context state s_l at all.
  bool uses_state() const;
  // Whether the variant reads the placeholder hidden state h_l (for mtp,
  // the shared h_0 stands in at every position).
  bool uses_hidden() const;

  void register_params(ParamStore& params) const;

  // p_l over T_l (softmax of the position-l linear layer). `level` is
  // 1-based; h/s may be null when the variant ignores them.
  std::vector<double> probs(std::size_t level, const double* h, const double* s,
                            const ParamStore& params) const;
  std::vector<double> log_probs(std::size_t level, const double* h, const double* s,
                                const ParamStore& params) const;

  // s_{l+1} from (s_l, e_l); level ranges over [1, L-1].
  std::vector<double> transition(std::size_t level, const double* s, const double* e,
                                 const ParamStore& params) const;

  // Embedding row of a drafted token (dedicated table, or the backbone's
  // code-band row when tied).
  const double* code_embedding(std::size_t level, std::uint32_t token,
                               const ParamStore& params) const;

  // --- cached passes for training ---
  struct LogitCache {
    std::size_t level = 0;
    std::vector<double> x;      // combined input
    std::vector<double> probs;  // softmax output
  };
  LogitCache logits_cached(std::size_t level, const double* h, const double* s,
                           const ParamStore& params) const;
  // Accumulates dW/db for d(loss)/d(logits) and adds the upstream input
  // gradient into dh and/or ds (either may be null if unused).
  void logits_backward(const LogitCache& cache, const std::vector<double>& d_logits,
                       ParamStore& params, double* dh, double* ds) const;

  struct TransitionCache {
    std::size_t level = 0;
    std::vector<double> s_in, e_in, z, r, cand, s_out;
  };
  TransitionCache transition_cached(std::size_t level, const double* s, const double* e,
                                    const ParamStore& params) const;
  void transition_backward(const TransitionCache& cache, const double* d_s_next,
                           ParamStore& params, double* ds, double* de) const;

  // Gradient accumulation into the embedding row (handles tying).
  void add_code_embedding_grad(std::size_t level, std::uint32_t token, const double* de,
                               ParamStore& params) const;

 private:
  std::size_t logit_input_dim() const;
  std::string trans_name(std::size_t level, const char* part) const;
  void check_logit_level(std::size_t level) const;
  void check_transition_level(std::size_t level) const;
  bool gated_transition() const;

  HeadConfig config_;
  Radices radices_;
  std::size_t d_hid_;
  TokenBands bands_;
};

}  // namespace nezha
