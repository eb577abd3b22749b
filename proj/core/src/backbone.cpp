#include "nezha/backbone.hpp"

#include <Eigen/Dense>
#include <cmath>

#include "nezha/errors.hpp"

namespace nezha {

namespace {

constexpr double kLnEps = 1e-5;

template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMatd = RowMat<double>;

Eigen::Map<const RowMatd> mat(const Tensor& t) {
  return {t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())};
}
Eigen::Map<RowMatd> mat(Tensor& t) {
  return {t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())};
}
Eigen::Map<const Eigen::RowVectorXd> vec(const Tensor& t) {
  return {t.data(), static_cast<Eigen::Index>(t.size())};
}
Eigen::Map<Eigen::RowVectorXd> vec(Tensor& t) {
  return {t.data(), static_cast<Eigen::Index>(t.size())};
}

constexpr double kInvSqrt2 = 0.70710678118654752440;

template <typename S>
S gelu(S u) {
  return S(0.5) * u * (S(1) + std::erf(u * S(kInvSqrt2)));
}

double gelu_grad(double u) {
  constexpr double inv_sqrt_2pi = 0.3989422804014327;
  return 0.5 * (1.0 + std::erf(u * kInvSqrt2)) + u * std::exp(-0.5 * u * u) * inv_sqrt_2pi;
}

// y = layer_norm(x) per row; writes normalized rows and 1/stddev.
template <typename S>
void layer_norm(const RowMat<S>& x, RowMat<S>& norm, std::vector<S>& rstd) {
  const auto n = x.rows();
  const auto d = x.cols();
  norm.resize(n, d);
  rstd.resize(static_cast<std::size_t>(n));
  for (Eigen::Index r = 0; r < n; ++r) {
    S mu = x.row(r).mean();
    S var = (x.row(r).array() - mu).square().mean();
    S rs = S(1) / std::sqrt(var + S(kLnEps));
    norm.row(r) = (x.row(r).array() - mu) * rs;
    rstd[static_cast<std::size_t>(r)] = rs;
  }
}

// dx contribution of layer norm given d(gamma*norm+beta) = dy, using the
// cached norm and rstd; also accumulates dgamma/dbeta.
void layer_norm_backward(const Eigen::Ref<const RowMatd>& dy,
                         const Eigen::Ref<const RowMatd>& norm, const std::vector<double>& rstd,
                         const Eigen::Ref<const Eigen::RowVectorXd>& gamma,
                         Eigen::Ref<Eigen::RowVectorXd> dgamma,
                         Eigen::Ref<Eigen::RowVectorXd> dbeta, Eigen::Ref<RowMatd> dx) {
  const auto n = dy.rows();
  for (Eigen::Index r = 0; r < n; ++r) {
    dgamma.array() += dy.row(r).array() * norm.row(r).array();
    dbeta += dy.row(r);
    Eigen::RowVectorXd dn = dy.row(r).cwiseProduct(gamma);
    double m1 = dn.mean();
    double m2 = dn.cwiseProduct(norm.row(r)).mean();
    dx.row(r).array() += rstd[static_cast<std::size_t>(r)] *
                         (dn.array() - m1 - norm.row(r).array() * m2);
  }
}

std::string layer_prefix(std::size_t i) { return "backbone.layer" + std::to_string(i) + "."; }

}  // namespace

TokenBands::TokenBands(const Radices& radices, std::size_t query_vocab)
    : radices_(radices), query_vocab_(query_vocab) {
  std::uint32_t next = static_cast<std::uint32_t>(1 + query_vocab);
  for (std::size_t l = 0; l < radices.length(); ++l) {
    band_begin_.push_back(next);
    next += radices.size_at(l);
  }
  vocab_size_ = next + radices.length();  // + the L placeholders
}

std::uint32_t TokenBands::query_token(std::uint32_t q) const {
  if (q >= query_vocab_) {
    throw RangeError("query token " + std::to_string(q) + " outside query vocabulary of " +
                     std::to_string(query_vocab_));
  }
  return 1 + q;
}

std::uint32_t TokenBands::code_token(std::size_t level, std::uint32_t t) const {
  if (level < 1 || level > levels()) {
    throw RangeError("code level " + std::to_string(level) + " outside [1, " +
                     std::to_string(levels()) + "]");
  }
  if (t >= radices_.size_at(level - 1)) {
    throw RangeError("position " + std::to_string(level) + ": token " + std::to_string(t) +
                     " outside radix " + std::to_string(radices_.size_at(level - 1)));
  }
  return band_begin_[level - 1] + t;
}

std::uint32_t TokenBands::placeholder(std::size_t level) const {
  if (level < 1 || level > levels()) {
    throw RangeError("placeholder position " + std::to_string(level) + " outside [1, " +
                     std::to_string(levels()) + "]");
  }
  return static_cast<std::uint32_t>(vocab_size_ - levels() + (level - 1));
}

std::uint32_t TokenBands::code_band_begin(std::size_t level) const {
  if (level < 1 || level > levels()) {
    throw RangeError("code level " + std::to_string(level) + " outside [1, " +
                     std::to_string(levels()) + "]");
  }
  return band_begin_[level - 1];
}

std::uint32_t TokenBands::band_size(std::size_t level) const {
  if (level < 1 || level > levels()) {
    throw RangeError("code level " + std::to_string(level) + " outside [1, " +
                     std::to_string(levels()) + "]");
  }
  return radices_.size_at(level - 1);
}

std::pair<std::size_t, std::uint32_t> TokenBands::code_of_token(std::uint32_t token) const {
  for (std::size_t l = 1; l <= levels(); ++l) {
    if (token >= band_begin_[l - 1] && token < band_begin_[l - 1] + radices_.size_at(l - 1)) {
      return {l, token - band_begin_[l - 1]};
    }
  }
  throw RangeError("token " + std::to_string(token) + " is not a code token");
}

PromptLayout build_prefix(const TokenBands& bands, const std::vector<std::uint32_t>& query,
                          const std::vector<SemanticId>& history) {
  PromptLayout p;
  p.tokens.push_back(bands.bos());
  for (std::uint32_t q : query) p.tokens.push_back(bands.query_token(q));
  for (const SemanticId& id : history) {
    validate_id(id, bands.radices());
    for (std::size_t l = 0; l < id.tokens.size(); ++l) {
      p.tokens.push_back(bands.code_token(l + 1, id.tokens[l]));
    }
  }
  p.prefix_len = p.tokens.size();
  return p;
}

PromptLayout build_draft_prompt(const TokenBands& bands, const std::vector<std::uint32_t>& query,
                                const std::vector<SemanticId>& history) {
  PromptLayout p = build_prefix(bands, query, history);
  for (std::size_t l = 1; l <= bands.levels(); ++l) p.tokens.push_back(bands.placeholder(l));
  return p;
}

PromptLayout build_target_prompt(const TokenBands& bands, const std::vector<std::uint32_t>& query,
                                 const std::vector<SemanticId>& history,
                                 const SemanticId& target) {
  PromptLayout p = build_prefix(bands, query, history);
  validate_id(target, bands.radices());
  for (std::size_t l = 0; l < target.tokens.size(); ++l) {
    p.tokens.push_back(bands.code_token(l + 1, target.tokens[l]));
  }
  return p;
}

void BackboneConfig::validate() const {
  if (d_hid < 1 || n_layers < 1 || n_heads < 1 || max_seq_len < 1) {
    throw ConfigError("backbone: all sizes must be >= 1");
  }
  if (d_hid % n_heads != 0) {
    throw ConfigError("backbone: d_hid " + std::to_string(d_hid) + " not divisible by n_heads " +
                      std::to_string(n_heads));
  }
}

Backbone::Backbone(BackboneConfig config, TokenBands bands)
    : config_(config), bands_(std::move(bands)) {
  config_.validate();
}

void Backbone::register_params(ParamStore& params) const {
  const std::size_t d = config_.d_hid;
  params.add("backbone.tok_embed", {bands_.vocab_size(), d});
  params.add("backbone.pos_embed", {config_.max_seq_len, d});
  for (std::size_t i = 0; i < config_.n_layers; ++i) {
    const std::string p = layer_prefix(i);
    params.add(p + "ln1.g", {d});
    params.add(p + "ln1.b", {d});
    for (const char* w : {"wq", "wk", "wv", "wo"}) params.add(p + "attn." + w, {d, d});
    for (const char* b : {"bq", "bk", "bv", "bo"}) params.add(p + "attn." + b, {d});
    params.add(p + "ln2.g", {d});
    params.add(p + "ln2.b", {d});
    params.add(p + "ff.w1", {d, 2 * d});
    params.add(p + "ff.b1", {2 * d});
    params.add(p + "ff.w2", {2 * d, d});
    params.add(p + "ff.b2", {d});
  }
  params.add("backbone.ln_f.g", {d});
  params.add("backbone.ln_f.b", {d});
  params.add("backbone.lm_head.w", {bands_.vocab_size(), d});
}

template <typename Scalar>
BackboneTrace Backbone::forward_impl(const std::vector<std::vector<std::uint32_t>>& seqs,
                                     const ParamStore& params, bool keep_cache) const {
  if (seqs.empty()) throw InputError("backbone: empty batch");
  BackboneTrace trace;
  trace.offsets.push_back(0);
  for (const auto& s : seqs) {
    if (s.empty()) throw InputError("backbone: empty sequence");
    if (s.size() > config_.max_seq_len) {
      throw RangeError("backbone: sequence length " + std::to_string(s.size()) +
                       " exceeds max_seq_len " + std::to_string(config_.max_seq_len));
    }
    for (std::uint32_t t : s) {
      if (t >= bands_.vocab_size()) {
        throw RangeError("backbone: token " + std::to_string(t) + " outside vocabulary of " +
                         std::to_string(bands_.vocab_size()));
      }
    }
    trace.tokens.insert(trace.tokens.end(), s.begin(), s.end());
    trace.offsets.push_back(trace.tokens.size());
  }
  const std::size_t total = trace.tokens.size();
  const std::size_t d = config_.d_hid;
  const std::size_t H = config_.n_heads;
  const std::size_t dh = d / H;
  const Scalar inv_sqrt_dh = Scalar(1) / std::sqrt(Scalar(dh));

  using M = RowMat<Scalar>;
  auto pmat = [&params](const std::string& name) {
    return mat(params.value(name)).template cast<Scalar>().eval();
  };
  auto pvec = [&params](const std::string& name) {
    return vec(params.value(name)).template cast<Scalar>().eval();
  };

  M tok_embed = pmat("backbone.tok_embed");
  M pos_embed = pmat("backbone.pos_embed");
  M x(total, d);
  for (std::size_t b = 0; b + 1 < trace.offsets.size(); ++b) {
    for (std::size_t pos = 0; pos < trace.seq_len(b); ++pos) {
      std::size_t r = trace.row(b, pos);
      x.row(r) = tok_embed.row(trace.tokens[r]) + pos_embed.row(pos);
    }
  }

  if (keep_cache) trace.layers.resize(config_.n_layers);
  for (std::size_t i = 0; i < config_.n_layers; ++i) {
    const std::string p = layer_prefix(i);
    M norm1;
    std::vector<Scalar> rstd1;
    layer_norm<Scalar>(x, norm1, rstd1);
    M a = ((norm1.array().rowwise() * pvec(p + "ln1.g").array()).rowwise() +
           pvec(p + "ln1.b").array())
              .matrix();
    M q = (a * pmat(p + "attn.wq")).rowwise() + pvec(p + "attn.bq");
    M k = (a * pmat(p + "attn.wk")).rowwise() + pvec(p + "attn.bk");
    M v = (a * pmat(p + "attn.wv")).rowwise() + pvec(p + "attn.bv");

    M c(total, d);
    std::vector<Tensor> attn_cache;
    for (std::size_t b = 0; b + 1 < trace.offsets.size(); ++b) {
      const std::size_t o = trace.offsets[b];
      const Eigen::Index n = static_cast<Eigen::Index>(trace.seq_len(b));
      for (std::size_t h = 0; h < H; ++h) {
        auto qh = q.block(o, h * dh, n, dh);
        auto kh = k.block(o, h * dh, n, dh);
        auto vh = v.block(o, h * dh, n, dh);
        M s = qh * kh.transpose() * inv_sqrt_dh;
        // Causal row-softmax: position i attends to j <= i only.
        for (Eigen::Index r = 0; r < n; ++r) {
          auto row = s.row(r).head(r + 1);
          Scalar m = row.maxCoeff();
          row = (row.array() - m).exp();
          row /= row.sum();
          if (r + 1 < n) s.row(r).tail(n - r - 1).setZero();
        }
        c.block(o, h * dh, n, dh) = s * vh;
        if (keep_cache) {
          Tensor pt({static_cast<std::size_t>(n), static_cast<std::size_t>(n)});
          if constexpr (std::is_same_v<Scalar, double>) mat(pt) = s;
          attn_cache.push_back(std::move(pt));
        }
      }
    }
    x += (c * pmat(p + "attn.wo")).rowwise() + pvec(p + "attn.bo");

    M norm2;
    std::vector<Scalar> rstd2;
    layer_norm<Scalar>(x, norm2, rstd2);
    M bmat = ((norm2.array().rowwise() * pvec(p + "ln2.g").array()).rowwise() +
              pvec(p + "ln2.b").array())
                 .matrix();
    M u = (bmat * pmat(p + "ff.w1")).rowwise() + pvec(p + "ff.b1");
    M g = u.unaryExpr([](Scalar t) { return gelu<Scalar>(t); });
    x += (g * pmat(p + "ff.w2")).rowwise() + pvec(p + "ff.b2");

    if (keep_cache) {
      if constexpr (std::is_same_v<Scalar, double>) {
        BackboneTrace::LayerCache& lc = trace.layers[i];
        auto store = [](Tensor& t, const M& m) {
          t = Tensor({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
          mat(t) = m;
        };
        store(lc.ln1_norm, norm1);
        store(lc.a, a);
        store(lc.q, q);
        store(lc.k, k);
        store(lc.v, v);
        store(lc.c, c);
        store(lc.ln2_norm, norm2);
        store(lc.b, bmat);
        store(lc.u, u);
        store(lc.g, g);
        lc.ln1_rstd = rstd1;
        lc.ln2_rstd = rstd2;
        lc.attn = std::move(attn_cache);
      }
    }
  }

  M normf;
  std::vector<Scalar> rstdf;
  layer_norm<Scalar>(x, normf, rstdf);
  M h = ((normf.array().rowwise() * pvec("backbone.ln_f.g").array()).rowwise() +
         pvec("backbone.ln_f.b").array())
            .matrix();
  trace.h = Tensor({total, d});
  mat(trace.h) = h.template cast<double>();
  if (keep_cache) {
    if constexpr (std::is_same_v<Scalar, double>) {
      trace.lnf_norm = Tensor({total, d});
      mat(trace.lnf_norm) = normf;
      trace.lnf_rstd = rstdf;
      trace.has_cache = true;
    }
  }
  return trace;
}

BackboneTrace Backbone::forward(const std::vector<std::vector<std::uint32_t>>& seqs,
                                const ParamStore& params, bool keep_cache) const {
  if (config_.single_precision) {
    if (keep_cache) {
      throw ConfigError("single-precision forward keeps no cache; train in double precision");
    }
    return forward_impl<float>(seqs, params, false);
  }
  return forward_impl<double>(seqs, params, keep_cache);
}

const double* Backbone::hidden(const BackboneTrace& trace, std::size_t b, std::size_t pos) const {
  if (b >= trace.batch() || pos >= trace.seq_len(b)) {
    throw RangeError("backbone: hidden state (" + std::to_string(b) + ", " + std::to_string(pos) +
                     ") outside trace");
  }
  return trace.h.row(trace.row(b, pos));
}

void Backbone::backward(const BackboneTrace& trace, const Tensor& d_hidden,
                        ParamStore& params) const {
  if (!trace.has_cache) throw StateError("backbone backward without forward cache");
  if (!d_hidden.same_shape(trace.h)) throw ShapeError("backbone backward: d_hidden shape");
  const std::size_t total = trace.tokens.size();
  const std::size_t d = config_.d_hid;
  const std::size_t H = config_.n_heads;
  const std::size_t dh = d / H;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  auto pm = [&params](const std::string& name) { return mat(params.value(name)); };
  auto gm = [&params](const std::string& name) { return mat(params.grad(name)); };
  auto pv = [&params](const std::string& name) { return vec(params.value(name)); };
  auto gv = [&params](const std::string& name) { return vec(params.grad(name)); };

  RowMatd dx = RowMatd::Zero(total, d);
  layer_norm_backward(mat(d_hidden), mat(trace.lnf_norm), trace.lnf_rstd, pv("backbone.ln_f.g"),
                      gv("backbone.ln_f.g"), gv("backbone.ln_f.b"), dx);

  for (std::size_t i = config_.n_layers; i-- > 0;) {
    const std::string p = layer_prefix(i);
    const BackboneTrace::LayerCache& lc = trace.layers[i];

    // Feed-forward backward; dx currently holds d(loss)/d(layer output),
    // which is also the residual gradient flowing past the block.
    RowMatd df = dx;  // gradient at the FF output (pre-residual-add)
    gm(p + "ff.w2").noalias() += mat(lc.g).transpose() * df;
    gv(p + "ff.b2") += df.colwise().sum();
    RowMatd dg = df * pm(p + "ff.w2").transpose();
    RowMatd du =
        dg.binaryExpr(mat(lc.u), [](double g, double u) { return g * gelu_grad(u); });
    gm(p + "ff.w1").noalias() += mat(lc.b).transpose() * du;
    gv(p + "ff.b1") += du.colwise().sum();
    RowMatd db = du * pm(p + "ff.w1").transpose();
    layer_norm_backward(db, mat(lc.ln2_norm), lc.ln2_rstd, pv(p + "ln2.g"), gv(p + "ln2.g"),
                        gv(p + "ln2.b"), dx);

    // Attention backward.
    RowMatd dao = dx;
    gm(p + "attn.wo").noalias() += mat(lc.c).transpose() * dao;
    gv(p + "attn.bo") += dao.colwise().sum();
    RowMatd dc = dao * pm(p + "attn.wo").transpose();
    RowMatd dq = RowMatd::Zero(total, d);
    RowMatd dk = RowMatd::Zero(total, d);
    RowMatd dv = RowMatd::Zero(total, d);
    for (std::size_t b = 0; b + 1 < trace.offsets.size(); ++b) {
      const std::size_t o = trace.offsets[b];
      const Eigen::Index n = static_cast<Eigen::Index>(trace.seq_len(b));
      for (std::size_t h = 0; h < H; ++h) {
        auto probs = mat(lc.attn[b * H + h]);
        auto qh = mat(lc.q).block(o, h * dh, n, dh);
        auto kh = mat(lc.k).block(o, h * dh, n, dh);
        auto vh = mat(lc.v).block(o, h * dh, n, dh);
        auto dch = dc.block(o, h * dh, n, dh);
        RowMatd dp = dch * vh.transpose();
        dv.block(o, h * dh, n, dh).noalias() += probs.transpose() * dch;
        RowMatd ds = RowMatd::Zero(n, n);
        for (Eigen::Index r = 0; r < n; ++r) {
          auto prow = probs.row(r).head(r + 1);
          auto dprow = dp.row(r).head(r + 1);
          double dot = prow.cwiseProduct(dprow).sum();
          ds.row(r).head(r + 1) = (prow.array() * (dprow.array() - dot)).matrix();
        }
        dq.block(o, h * dh, n, dh).noalias() += ds * kh * inv_sqrt_dh;
        dk.block(o, h * dh, n, dh).noalias() += ds.transpose() * qh * inv_sqrt_dh;
      }
    }
    gm(p + "attn.wq").noalias() += mat(lc.a).transpose() * dq;
    gm(p + "attn.wk").noalias() += mat(lc.a).transpose() * dk;
    gm(p + "attn.wv").noalias() += mat(lc.a).transpose() * dv;
    gv(p + "attn.bq") += dq.colwise().sum();
    gv(p + "attn.bk") += dk.colwise().sum();
    gv(p + "attn.bv") += dv.colwise().sum();
    RowMatd da = dq * pm(p + "attn.wq").transpose();
    da.noalias() += dk * pm(p + "attn.wk").transpose();
    da.noalias() += dv * pm(p + "attn.wv").transpose();
    layer_norm_backward(da, mat(lc.ln1_norm), lc.ln1_rstd, pv(p + "ln1.g"), gv(p + "ln1.g"),
                        gv(p + "ln1.b"), dx);
  }

  auto dtok = gm("backbone.tok_embed");
  auto dpos = gm("backbone.pos_embed");
  for (std::size_t b = 0; b + 1 < trace.offsets.size(); ++b) {
    for (std::size_t pos = 0; pos < trace.seq_len(b); ++pos) {
      std::size_t r = trace.row(b, pos);
      dtok.row(trace.tokens[r]) += dx.row(r);
      dpos.row(pos) += dx.row(r);
    }
  }
}

std::vector<double> Backbone::band_log_probs(const double* h, std::size_t level,
                                             const ParamStore& params) const {
  const std::uint32_t begin = bands_.code_band_begin(level);
  const std::uint32_t T = bands_.band_size(level);
  const std::size_t d = config_.d_hid;
  auto w = mat(params.value("backbone.lm_head.w"));
  Eigen::Map<const Eigen::RowVectorXd> hv(h, static_cast<Eigen::Index>(d));
  Eigen::VectorXd logits = w.middleRows(begin, T) * hv.transpose();
  double m = logits.maxCoeff();
  double lse = m + std::log((logits.array() - m).exp().sum());
  std::vector<double> out(T);
  for (std::uint32_t t = 0; t < T; ++t) out[t] = logits[t] - lse;
  return out;
}

void Backbone::band_logits_backward(const double* h, std::size_t level,
                                    const std::vector<double>& d_logits, ParamStore& params,
                                    double* dh) const {
  const std::uint32_t begin = bands_.code_band_begin(level);
  const std::uint32_t T = bands_.band_size(level);
  if (d_logits.size() != T) throw ShapeError("band_logits_backward: gradient length");
  const std::size_t d = config_.d_hid;
  auto w = mat(params.value("backbone.lm_head.w"));
  auto gw = mat(params.grad("backbone.lm_head.w"));
  Eigen::Map<const Eigen::RowVectorXd> hv(h, static_cast<Eigen::Index>(d));
  Eigen::Map<const Eigen::VectorXd> dl(d_logits.data(), T);
  Eigen::Map<Eigen::RowVectorXd> dhv(dh, static_cast<Eigen::Index>(d));
  gw.middleRows(begin, T).noalias() += dl * hv;
  dhv.noalias() += dl.transpose() * w.middleRows(begin, T);
}

void init_params(ParamStore& params, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 0.02);
  for (auto& [name, p] : params.entries()) {
    std::size_t dot = name.rfind('.');
    char lead = name[dot == std::string::npos ? 0 : dot + 1];
    if (lead == 'b') {
      p.value.zero();
    } else if (lead == 'g') {
      p.value.fill(1.0);
    } else {
      for (std::size_t i = 0; i < p.value.size(); ++i) p.value[i] = normal(rng);
    }
  }
}

}  // namespace nezha
