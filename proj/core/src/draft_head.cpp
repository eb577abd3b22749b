#include "nezha/draft_head.hpp"

#include <Eigen/Dense>
#include <cmath>

#include "nezha/errors.hpp"

namespace nezha {

namespace {

using RowMatd = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVec = Eigen::RowVectorXd;
using MapMat = Eigen::Map<const RowMatd>;
using MapVec = Eigen::Map<const RowVec>;

MapMat mat(const Tensor& t) {
  return {t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())};
}
Eigen::Map<RowMatd> mat(Tensor& t) {
  return {t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())};
}

double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

}  // namespace

HeadVariant head_variant_from_string(const std::string& name) {
  if (name == "nezha") return HeadVariant::kNezha;
  if (name == "nezha-1" || name == "nezha_no_state") return HeadVariant::kNoState;
  if (name == "nezha-2" || name == "nezha_no_placeholder") return HeadVariant::kNoPlaceholder;
  if (name == "nezha-3" || name == "nezha_add_transition") return HeadVariant::kAddTransition;
  if (name == "mtp") return HeadVariant::kMtp;
  throw ConfigError("unknown head variant: " + name);
}

std::string to_string(HeadVariant v) {
  switch (v) {
    case HeadVariant::kNezha: return "nezha";
    case HeadVariant::kNoState: return "nezha_no_state";
    case HeadVariant::kNoPlaceholder: return "nezha_no_placeholder";
    case HeadVariant::kAddTransition: return "nezha_add_transition";
    case HeadVariant::kMtp: return "mtp";
  }
  return "?";
}

DraftHead::DraftHead(HeadConfig config, Radices radices, std::size_t d_hid, TokenBands bands)
    : config_(config), radices_(std::move(radices)), d_hid_(d_hid), bands_(std::move(bands)) {
  if (d_hid_ < 1) throw ConfigError("draft head: d_hid must be >= 1");
  if (bands_.radices() != radices_) throw ConfigError("draft head: radices disagree with bands");
}

bool DraftHead::uses_state() const {
  switch (config_.variant) {
    case HeadVariant::kNezha:
    case HeadVariant::kNoPlaceholder:
    case HeadVariant::kAddTransition:
      return true;
    case HeadVariant::kNoState:
    case HeadVariant::kMtp:
      return false;
  }
  return false;
}

bool DraftHead::uses_hidden() const {
  return config_.variant != HeadVariant::kNoPlaceholder;
}

bool DraftHead::gated_transition() const {
  return uses_state() && config_.variant != HeadVariant::kAddTransition;
}

std::size_t DraftHead::logit_input_dim() const {
  bool both = (config_.variant == HeadVariant::kNezha ||
               config_.variant == HeadVariant::kAddTransition);
  if (both && config_.combine == CombineRule::kConcat) return 2 * d_hid_;
  return d_hid_;
}

std::string DraftHead::trans_name(std::size_t level, const char* part) const {
  if (config_.share_transition) return std::string("head.trans_shared.") + part;
  return "head.trans" + std::to_string(level) + "." + part;
}

void DraftHead::check_logit_level(std::size_t level) const {
  if (level < 1 || level > radices_.length()) {
    throw RangeError("draft head: logit position " + std::to_string(level) + " outside [1, " +
                     std::to_string(radices_.length()) + "]");
  }
}

void DraftHead::check_transition_level(std::size_t level) const {
  if (level < 1 || level + 1 > radices_.length()) {
    throw RangeError("draft head: transition position " + std::to_string(level) +
                     " outside [1, " + std::to_string(radices_.length() - 1) + "]");
  }
}

void DraftHead::register_params(ParamStore& params) const {
  const std::size_t L = radices_.length();
  const std::size_t din = logit_input_dim();
  for (std::size_t l = 1; l <= L; ++l) {
    params.add("head.logit" + std::to_string(l) + ".w", {radices_.size_at(l - 1), din});
    params.add("head.logit" + std::to_string(l) + ".b", {radices_.size_at(l - 1)});
  }
  if (gated_transition()) {
    const std::size_t n_cells = config_.share_transition ? 1 : (L > 1 ? L - 1 : 0);
    for (std::size_t c = 0; c < n_cells; ++c) {
      std::size_t level = config_.share_transition ? 1 : c + 1;
      for (const char* w : {"wz", "wr", "wh", "uz", "ur", "uh"}) {
        params.add(trans_name(level, w), {d_hid_, d_hid_});
      }
      for (const char* b : {"bz", "br", "bh"}) params.add(trans_name(level, b), {d_hid_});
    }
  }
  if (uses_state() && !config_.tie_code_embeddings) {
    for (std::size_t l = 1; l + 1 <= L; ++l) {
      params.add("head.code_embed" + std::to_string(l), {radices_.size_at(l - 1), d_hid_});
    }
  }
}

DraftHead::LogitCache DraftHead::logits_cached(std::size_t level, const double* h,
                                               const double* s,
                                               const ParamStore& params) const {
  check_logit_level(level);
  LogitCache cache;
  cache.level = level;
  const std::size_t d = d_hid_;
  switch (config_.variant) {
    case HeadVariant::kNezha:
    case HeadVariant::kAddTransition:
      if (!h || !s) throw StateError("draft head: variant needs both h_l and s_l");
      if (config_.combine == CombineRule::kSum) {
        cache.x.resize(d);
        for (std::size_t j = 0; j < d; ++j) cache.x[j] = h[j] + s[j];
      } else {
        cache.x.assign(h, h + d);
        cache.x.insert(cache.x.end(), s, s + d);
      }
      break;
    case HeadVariant::kNoState:
    case HeadVariant::kMtp:
      if (!h) throw StateError("draft head: variant needs a hidden state");
      cache.x.assign(h, h + d);
      break;
    case HeadVariant::kNoPlaceholder:
      if (!s) throw StateError("draft head: variant needs a context state");
      cache.x.assign(s, s + d);
      break;
  }

  const Tensor& w = params.value("head.logit" + std::to_string(level) + ".w");
  const Tensor& b = params.value("head.logit" + std::to_string(level) + ".b");
  const std::size_t T = radices_.size_at(level - 1);
  MapVec xv(cache.x.data(), static_cast<Eigen::Index>(cache.x.size()));
  Eigen::VectorXd logits = mat(w) * xv.transpose();
  logits += Eigen::Map<const Eigen::VectorXd>(b.data(), static_cast<Eigen::Index>(T));
  double m = logits.maxCoeff();
  Eigen::ArrayXd e = (logits.array() - m).exp();
  double sum = e.sum();
  cache.probs.resize(T);
  for (std::size_t t = 0; t < T; ++t) cache.probs[t] = e[static_cast<Eigen::Index>(t)] / sum;
  return cache;
}

std::vector<double> DraftHead::probs(std::size_t level, const double* h, const double* s,
                                     const ParamStore& params) const {
  return logits_cached(level, h, s, params).probs;
}

std::vector<double> DraftHead::log_probs(std::size_t level, const double* h, const double* s,
                                         const ParamStore& params) const {
  std::vector<double> p = probs(level, h, s, params);
  for (double& v : p) v = std::log(v);
  return p;
}

void DraftHead::logits_backward(const LogitCache& cache, const std::vector<double>& d_logits,
                                ParamStore& params, double* dh, double* ds) const {
  const std::size_t level = cache.level;
  const std::size_t T = radices_.size_at(level - 1);
  if (d_logits.size() != T) throw ShapeError("draft head: d_logits length");
  const std::size_t din = cache.x.size();
  Tensor& gw = params.grad("head.logit" + std::to_string(level) + ".w");
  Tensor& gb = params.grad("head.logit" + std::to_string(level) + ".b");
  const Tensor& w = params.value("head.logit" + std::to_string(level) + ".w");

  MapVec xv(cache.x.data(), static_cast<Eigen::Index>(din));
  Eigen::Map<const Eigen::VectorXd> dl(d_logits.data(), static_cast<Eigen::Index>(T));
  mat(gw).noalias() += dl * xv;
  Eigen::Map<Eigen::VectorXd>(gb.data(), static_cast<Eigen::Index>(T)) += dl;
  RowVec dx = dl.transpose() * mat(w);

  const std::size_t d = d_hid_;
  switch (config_.variant) {
    case HeadVariant::kNezha:
    case HeadVariant::kAddTransition:
      if (config_.combine == CombineRule::kSum) {
        for (std::size_t j = 0; j < d; ++j) {
          if (dh) dh[j] += dx[static_cast<Eigen::Index>(j)];
          if (ds) ds[j] += dx[static_cast<Eigen::Index>(j)];
        }
      } else {
        for (std::size_t j = 0; j < d; ++j) {
          if (dh) dh[j] += dx[static_cast<Eigen::Index>(j)];
          if (ds) ds[j] += dx[static_cast<Eigen::Index>(d + j)];
        }
      }
      break;
    case HeadVariant::kNoState:
    case HeadVariant::kMtp:
      if (dh) {
        for (std::size_t j = 0; j < d; ++j) dh[j] += dx[static_cast<Eigen::Index>(j)];
      }
      break;
    case HeadVariant::kNoPlaceholder:
      if (ds) {
        for (std::size_t j = 0; j < d; ++j) ds[j] += dx[static_cast<Eigen::Index>(j)];
      }
      break;
  }
}

DraftHead::TransitionCache DraftHead::transition_cached(std::size_t level, const double* s,
                                                        const double* e,
                                                        const ParamStore& params) const {
  check_transition_level(level);
  if (!uses_state()) throw StateError("draft head: variant has no transition");
  if (!s || !e) throw StateError("draft head: transition needs s_l and e_l");
  const std::size_t d = d_hid_;
  TransitionCache cache;
  cache.level = level;
  cache.s_in.assign(s, s + d);
  cache.e_in.assign(e, e + d);
  cache.s_out.resize(d);

  if (config_.variant == HeadVariant::kAddTransition) {
    for (std::size_t j = 0; j < d; ++j) cache.s_out[j] = s[j] + e[j];
    return cache;
  }

  MapVec sv(s, static_cast<Eigen::Index>(d));
  MapVec ev(e, static_cast<Eigen::Index>(d));
  auto affine = [&](const char* w, const char* u, const char* b) -> RowVec {
    RowVec out = ev * mat(params.value(trans_name(level, w)));
    out.noalias() += sv * mat(params.value(trans_name(level, u)));
    out += MapVec(params.value(trans_name(level, b)).data(), static_cast<Eigen::Index>(d));
    return out;
  };
  RowVec zpre = affine("wz", "uz", "bz");
  RowVec rpre = affine("wr", "ur", "br");
  cache.z.resize(d);
  cache.r.resize(d);
  cache.cand.resize(d);
  for (std::size_t j = 0; j < d; ++j) {
    cache.z[j] = sigmoid(zpre[static_cast<Eigen::Index>(j)]);
    cache.r[j] = sigmoid(rpre[static_cast<Eigen::Index>(j)]);
  }
  RowVec rs(d);
  for (std::size_t j = 0; j < d; ++j) rs[static_cast<Eigen::Index>(j)] = cache.r[j] * s[j];
  RowVec cpre = ev * mat(params.value(trans_name(level, "wh")));
  cpre.noalias() += rs * mat(params.value(trans_name(level, "uh")));
  cpre += MapVec(params.value(trans_name(level, "bh")).data(), static_cast<Eigen::Index>(d));
  for (std::size_t j = 0; j < d; ++j) {
    cache.cand[j] = std::tanh(cpre[static_cast<Eigen::Index>(j)]);
    // Update-gate convention: z -> 1 takes the candidate, z -> 0 keeps s_l.
    cache.s_out[j] = (1.0 - cache.z[j]) * s[j] + cache.z[j] * cache.cand[j];
  }
  return cache;
}

std::vector<double> DraftHead::transition(std::size_t level, const double* s, const double* e,
                                          const ParamStore& params) const {
  return transition_cached(level, s, e, params).s_out;
}

void DraftHead::transition_backward(const TransitionCache& cache, const double* d_s_next,
                                    ParamStore& params, double* ds, double* de) const {
  const std::size_t d = d_hid_;
  const std::size_t level = cache.level;

  if (config_.variant == HeadVariant::kAddTransition) {
    for (std::size_t j = 0; j < d; ++j) {
      if (ds) ds[j] += d_s_next[j];
      if (de) de[j] += d_s_next[j];
    }
    return;
  }

  RowVec dz(d), dcand(d);
  for (std::size_t j = 0; j < d; ++j) {
    const auto i = static_cast<Eigen::Index>(j);
    double g = d_s_next[j];
    dz[i] = g * (cache.cand[j] - cache.s_in[j]);
    dcand[i] = g * cache.z[j];
    if (ds) ds[j] += g * (1.0 - cache.z[j]);
  }

  MapVec sv(cache.s_in.data(), static_cast<Eigen::Index>(d));
  MapVec ev(cache.e_in.data(), static_cast<Eigen::Index>(d));
  RowVec rs(d);
  for (std::size_t j = 0; j < d; ++j) {
    rs[static_cast<Eigen::Index>(j)] = cache.r[j] * cache.s_in[j];
  }

  auto backprop_affine = [&](const char* w, const char* u, const char* b, const RowVec& dpre,
                             const RowVec& state_in, double* dstate_out) {
    mat(params.grad(trans_name(level, w))).noalias() += ev.transpose() * dpre;
    mat(params.grad(trans_name(level, u))).noalias() += state_in.transpose() * dpre;
    Eigen::Map<RowVec>(params.grad(trans_name(level, b)).data(), static_cast<Eigen::Index>(d)) +=
        dpre;
    if (de) {
      RowVec dev = dpre * mat(params.value(trans_name(level, w))).transpose();
      for (std::size_t j = 0; j < d; ++j) de[j] += dev[static_cast<Eigen::Index>(j)];
    }
    if (dstate_out) {
      RowVec dsv = dpre * mat(params.value(trans_name(level, u))).transpose();
      for (std::size_t j = 0; j < d; ++j) dstate_out[j] += dsv[static_cast<Eigen::Index>(j)];
    }
  };

  // Candidate path: cand = tanh(e Wh + (r*s) Uh + bh).
  RowVec dcpre(d);
  for (std::size_t j = 0; j < d; ++j) {
    dcpre[static_cast<Eigen::Index>(j)] =
        dcand[static_cast<Eigen::Index>(j)] * (1.0 - cache.cand[j] * cache.cand[j]);
  }
  std::vector<double> drs_acc(d, 0.0);
  backprop_affine("wh", "uh", "bh", dcpre, rs, drs_acc.data());
  RowVec dr(d);
  for (std::size_t j = 0; j < d; ++j) {
    const auto i = static_cast<Eigen::Index>(j);
    dr[i] = drs_acc[j] * cache.s_in[j];
    if (ds) ds[j] += drs_acc[j] * cache.r[j];
  }

  // Gate paths through the sigmoid pre-activations.
  RowVec dzpre(d), drpre(d);
  for (std::size_t j = 0; j < d; ++j) {
    const auto i = static_cast<Eigen::Index>(j);
    dzpre[i] = dz[i] * cache.z[j] * (1.0 - cache.z[j]);
    drpre[i] = dr[i] * cache.r[j] * (1.0 - cache.r[j]);
  }
  RowVec sv_copy = sv;
  backprop_affine("wz", "uz", "bz", dzpre, sv_copy, ds);
  backprop_affine("wr", "ur", "br", drpre, sv_copy, ds);
}

const double* DraftHead::code_embedding(std::size_t level, std::uint32_t token,
                                        const ParamStore& params) const {
  check_transition_level(level);
  if (token >= radices_.size_at(level - 1)) {
    throw RangeError("position " + std::to_string(level) + ": token " + std::to_string(token) +
                     " outside radix " + std::to_string(radices_.size_at(level - 1)));
  }
  if (config_.tie_code_embeddings) {
    return params.value("backbone.tok_embed").row(bands_.code_token(level, token));
  }
  return params.value("head.code_embed" + std::to_string(level)).row(token);
}

void DraftHead::add_code_embedding_grad(std::size_t level, std::uint32_t token, const double* de,
                                        ParamStore& params) const {
  check_transition_level(level);
  double* row = config_.tie_code_embeddings
                    ? params.grad("backbone.tok_embed").row(bands_.code_token(level, token))
                    : params.grad("head.code_embed" + std::to_string(level)).row(token);
  for (std::size_t j = 0; j < d_hid_; ++j) row[j] += de[j];
}

}  // namespace nezha
