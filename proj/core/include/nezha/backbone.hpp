#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "nezha/codec.hpp"
#include "nezha/params.hpp"
#include "nezha/tensor.hpp"

namespace nezha {

// Layout of the unified token-id space. One BOS token, a band of opaque
// query tokens, one disjoint band per semantic-id position (so level-l
// codes can never collide with level-j codes), and the L placeholder
// tokens SP_1..SP_L at the top.
class TokenBands {
 public:
  TokenBands(const Radices& radices, std::size_t query_vocab);

  std::uint32_t bos() const { return 0; }
  std::uint32_t query_token(std::uint32_t q) const;
  // `level` is 1-based throughout, matching the t_l subscripts.
  std::uint32_t code_token(std::size_t level, std::uint32_t t) const;
  std::uint32_t placeholder(std::size_t level) const;

  std::uint32_t code_band_begin(std::size_t level) const;
  std::uint32_t band_size(std::size_t level) const;
  // Maps a token id back to (level, code); throws RangeError if the id
  // is not inside any code band.
  std::pair<std::size_t, std::uint32_t> code_of_token(std::uint32_t token) const;

  std::size_t levels() const { return radices_.length(); }
  std::size_t query_vocab() const { return query_vocab_; }
  std::size_t vocab_size() const { return vocab_size_; }
  const Radices& radices() const { return radices_; }

 private:
  Radices radices_;
  std::size_t query_vocab_;
  std::vector<std::uint32_t> band_begin_;  // per level
  std::size_t vocab_size_;
};

// A prompt plus the bookkeeping decoders need: how many tokens are
// context (prefix) as opposed to the trailing id slots.
struct PromptLayout {
  std::vector<std::uint32_t> tokens;
  std::size_t prefix_len = 0;
};

// [BOS, q..., flattened history ids] — the shared context prefix.
PromptLayout build_prefix(const TokenBands& bands, const std::vector<std::uint32_t>& query,
                          const std::vector<SemanticId>& history);
// Context prefix followed by the L placeholders SP_1..SP_L; one forward
// over this yields h_0..h_L.
PromptLayout build_draft_prompt(const TokenBands& bands, const std::vector<std::uint32_t>& query,
                                const std::vector<SemanticId>& history);
// Context prefix followed by the target id's code tokens (next-token
// training format for the lm head).
PromptLayout build_target_prompt(const TokenBands& bands, const std::vector<std::uint32_t>& query,
                                 const std::vector<SemanticId>& history, const SemanticId& target);

struct BackboneConfig {
  std::size_t d_hid = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 2;
  std::size_t max_seq_len = 64;
  std::size_t query_vocab = 16;
  std::uint64_t seed = 42;
  // Inference-only option; training always runs in double (the gradient
  // checks depend on it).
  bool single_precision = false;

  void validate() const;
};

// Activation cache for one forward over a batch of sequences. All
// sequence rows are stacked into shared [total x d] matrices so the big
// GEMMs run once per batch; attention is computed per sequence block.
struct BackboneTrace {
  std::vector<std::uint32_t> tokens;  // concatenated
  std::vector<std::size_t> offsets;   // B+1 row offsets into the stack
  Tensor h;                           // final hidden states, total x d

  // Per-layer caches, kept only when forward() ran with keep_cache.
  struct LayerCache {
    Tensor ln1_norm, a, q, k, v, c, ln2_norm, b, u, g;
    std::vector<double> ln1_rstd, ln2_rstd;
    std::vector<Tensor> attn;  // softmax probs, one n x n matrix per (seq, head)
  };
  std::vector<LayerCache> layers;
  Tensor lnf_norm;
  std::vector<double> lnf_rstd;
  bool has_cache = false;

  std::size_t batch() const { return offsets.size() - 1; }
  std::size_t seq_len(std::size_t b) const { return offsets[b + 1] - offsets[b]; }
  std::size_t row(std::size_t b, std::size_t pos) const { return offsets[b] + pos; }
};

// Pre-norm causal transformer: learned token + absolute position
// embeddings, n_layers of (LN, multi-head attention, residual, LN, GELU
// feed-forward of width 2*d_hid, residual), then a final LN. A bias-free
// lm head over the unified vocabulary hangs off the same parameters.
class Backbone {
 public:
  Backbone(BackboneConfig config, TokenBands bands);

  const BackboneConfig& config() const { return config_; }
  const TokenBands& bands() const { return bands_; }

  // Allocates every backbone.* tensor in the store (zeroed).
  void register_params(ParamStore& params) const;

  BackboneTrace forward(const std::vector<std::vector<std::uint32_t>>& seqs,
                        const ParamStore& params, bool keep_cache) const;

  // Final hidden state of sequence b at position pos.
  const double* hidden(const BackboneTrace& trace, std::size_t b, std::size_t pos) const;

  // Accumulates d(loss)/d(params) given d(loss)/d(final hidden states);
  // d_hidden has the trace's stacked [total x d] shape. Throws StateError
  // if the trace kept no cache.
  void backward(const BackboneTrace& trace, const Tensor& d_hidden, ParamStore& params) const;

  // lm-head log-probabilities over the code band of `level` (1-based),
  // renormalized within the band.
  std::vector<double> band_log_probs(const double* h, std::size_t level,
                                     const ParamStore& params) const;
  // Accumulates lm-head gradients for d(loss)/d(band logits) and adds the
  // upstream contribution into dh (length d_hid).
  void band_logits_backward(const double* h, std::size_t level,
                            const std::vector<double>& d_logits, ParamStore& params,
                            double* dh) const;

 private:
  template <typename Scalar>
  BackboneTrace forward_impl(const std::vector<std::vector<std::uint32_t>>& seqs,
                             const ParamStore& params, bool keep_cache) const;

  BackboneConfig config_;
  TokenBands bands_;
};

// Initializes every tensor currently in the store: weights and embeddings
// from normal(0, 0.02), biases zero, layer-norm gains one. Walked in name
// order, so a fixed seed pins every value.
void init_params(ParamStore& params, std::mt19937_64& rng);

}  // namespace nezha
