#include "nezha/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "nezha/errors.hpp"

namespace nezha {

void TrainConfig::validate() const {
  if (learning_rate <= 0) throw ConfigError("train: learning rate must be > 0");
  if (batch_size < 1) throw ConfigError("train: batch size must be >= 1");
  if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1) {
    throw ConfigError("train: Adam betas must lie in [0, 1)");
  }
  if (adam_eps <= 0) throw ConfigError("train: Adam epsilon must be > 0");
  if (clip_norm < 0) throw ConfigError("train: clip norm must be >= 0");
  if (draft_loss_weight < 0 || lm_loss_weight < 0) {
    throw ConfigError("train: loss weights must be >= 0");
  }
  if (draft_loss_weight == 0 && lm_loss_weight == 0) {
    throw ConfigError("train: at least one loss weight must be positive");
  }
}

void AdamOptimizer::step(ParamStore& params) {
  ++t_;
  auto frozen = [this](const std::string& name) {
    return cfg_.freeze_backbone && name.rfind("backbone.", 0) == 0;
  };

  double scale = 1.0;
  if (cfg_.clip_norm > 0) {
    double sq = 0;
    for (const auto& [name, p] : params.entries()) {
      if (frozen(name)) continue;
      for (std::size_t i = 0; i < p.grad.size(); ++i) sq += p.grad[i] * p.grad[i];
    }
    double norm = std::sqrt(sq);
    if (norm > cfg_.clip_norm) scale = cfg_.clip_norm / norm;
  }

  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (auto& [name, p] : params.entries()) {
    if (frozen(name)) continue;
    if (p.adam_m.size() != p.value.size()) {
      p.adam_m = Tensor(p.value.shape());
      p.adam_v = Tensor(p.value.shape());
    }
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      double g = p.grad[i] * scale;
      p.adam_m[i] = cfg_.beta1 * p.adam_m[i] + (1.0 - cfg_.beta1) * g;
      p.adam_v[i] = cfg_.beta2 * p.adam_v[i] + (1.0 - cfg_.beta2) * g * g;
      double mhat = p.adam_m[i] / bc1;
      double vhat = p.adam_v[i] / bc2;
      p.value[i] -= cfg_.learning_rate * mhat / (std::sqrt(vhat) + cfg_.adam_eps);
    }
  }
}

namespace {

// Teacher-forced draft-head pass for one example, producing the caches
// needed for the backward walk.
struct HeadPass {
  std::vector<DraftHead::LogitCache> logits;          // per level, 1-based at [l-1]
  std::vector<DraftHead::TransitionCache> transitions;  // levels 1..L-1
  double nll = 0;
};

HeadPass head_forward(const GrModel& model, const TrainingExample& ex,
                      const BackboneTrace& trace, std::size_t b, std::size_t prefix_len,
                      const TransitionProbe& probe) {
  const DraftHead& head = model.head;
  const std::size_t L = model.radices().length();
  const std::size_t d = model.backbone.config().d_hid;
  const bool stateful = head.uses_state();
  const double* h0 = model.backbone.hidden(trace, b, prefix_len - 1);

  HeadPass pass;
  std::vector<double> state;
  if (stateful) state.assign(h0, h0 + d);
  for (std::size_t l = 1; l <= L; ++l) {
    const double* h = nullptr;
    switch (head.config().variant) {
      case HeadVariant::kMtp: h = h0; break;
      case HeadVariant::kNoPlaceholder: h = nullptr; break;
      default: h = model.backbone.hidden(trace, b, prefix_len - 1 + l);
    }
    pass.logits.push_back(
        head.logits_cached(l, h, stateful ? state.data() : nullptr, model.params));
    pass.nll -= std::log(pass.logits.back().probs[ex.target.tokens[l - 1]]);
    if (stateful && l < L) {
      // Teacher forcing: the state advances with the ground-truth token,
      // never with the head's own prediction.
      std::uint32_t y = ex.target.tokens[l - 1];
      if (probe) probe(l, y);
      const double* e = head.code_embedding(l, y, model.params);
      pass.transitions.push_back(head.transition_cached(l, state.data(), e, model.params));
      state = pass.transitions.back().s_out;
    }
  }
  return pass;
}

// Backward walk matching head_forward; scale multiplies d(loss)/d(logits).
void head_backward(const GrModel& model, const TrainingExample& ex, const HeadPass& pass,
                   double scale, Tensor& d_hidden, const BackboneTrace& trace, std::size_t b,
                   std::size_t prefix_len, ParamStore& params) {
  const DraftHead& head = model.head;
  const std::size_t L = model.radices().length();
  const std::size_t d = model.backbone.config().d_hid;
  const bool stateful = head.uses_state();
  double* dh0 = d_hidden.row(trace.row(b, prefix_len - 1));

  std::vector<std::vector<double>> ds(L + 1, std::vector<double>(stateful ? d : 0, 0.0));
  for (std::size_t l = L; l >= 1; --l) {
    std::vector<double> d_logits = pass.logits[l - 1].probs;
    d_logits[ex.target.tokens[l - 1]] -= 1.0;
    for (double& v : d_logits) v *= scale;

    double* dh = nullptr;
    switch (head.config().variant) {
      case HeadVariant::kMtp: dh = dh0; break;
      case HeadVariant::kNoPlaceholder: dh = nullptr; break;
      default: dh = d_hidden.row(trace.row(b, prefix_len - 1 + l));
    }
    head.logits_backward(pass.logits[l - 1], d_logits, params, dh,
                         stateful ? ds[l].data() : nullptr);
    if (stateful && l > 1) {
      // ds[l] is complete here: the transition from level l (processed in
      // the previous iteration) and this level's logits both added in.
      std::vector<double> de(d, 0.0);
      head.transition_backward(pass.transitions[l - 2], ds[l].data(), params, ds[l - 1].data(),
                               de.data());
      head.add_code_embedding_grad(l - 1, ex.target.tokens[l - 2], de.data(), params);
    }
  }
  if (stateful) {
    for (std::size_t j = 0; j < d; ++j) dh0[j] += ds[1][j];  // s_1 = h_0
  }
}

}  // namespace

LossBreakdown train_step(const std::vector<TrainingExample>& batch, GrModel& model,
                         const TrainConfig& cfg, AdamOptimizer& opt,
                         const TransitionProbe& probe) {
  cfg.validate();
  if (batch.empty()) throw InputError("train: empty batch");
  const std::size_t B = batch.size();
  const std::size_t L = model.radices().length();
  model.params.zero_grads();

  LossBreakdown loss;
  const bool run_lm = cfg.lm_loss_weight > 0 && !cfg.freeze_backbone;

  // Draft-head pass over the placeholder prompts.
  if (cfg.draft_loss_weight > 0) {
    std::vector<std::vector<std::uint32_t>> seqs;
    std::vector<std::size_t> prefix_lens;
    for (const TrainingExample& ex : batch) {
      validate_id(ex.target, model.radices());
      PromptLayout p = build_draft_prompt(model.bands(), ex.query, ex.history);
      prefix_lens.push_back(p.prefix_len);
      seqs.push_back(std::move(p.tokens));
    }
    BackboneTrace trace = model.backbone.forward(seqs, model.params, true);
    Tensor d_hidden(trace.h.shape());
    const double scale = cfg.draft_loss_weight / static_cast<double>(B);
    for (std::size_t b = 0; b < B; ++b) {
      HeadPass pass = head_forward(model, batch[b], trace, b, prefix_lens[b], probe);
      if (!std::isfinite(pass.nll)) {
        throw InputError("train: non-finite draft loss at example " + std::to_string(b));
      }
      loss.draft_nll += pass.nll;
      head_backward(model, batch[b], pass, scale, d_hidden, trace, b, prefix_lens[b],
                    model.params);
    }
    if (!cfg.freeze_backbone) model.backbone.backward(trace, d_hidden, model.params);
  }

  // lm-head pass over the next-token prompts.
  if (run_lm) {
    std::vector<std::vector<std::uint32_t>> seqs;
    std::vector<std::size_t> prefix_lens;
    for (const TrainingExample& ex : batch) {
      PromptLayout p = build_target_prompt(model.bands(), ex.query, ex.history, ex.target);
      prefix_lens.push_back(p.prefix_len);
      seqs.push_back(std::move(p.tokens));
    }
    BackboneTrace trace = model.backbone.forward(seqs, model.params, true);
    Tensor d_hidden(trace.h.shape());
    const double scale = cfg.lm_loss_weight / static_cast<double>(B);
    for (std::size_t b = 0; b < B; ++b) {
      double nll = 0;
      for (std::size_t l = 1; l <= L; ++l) {
        // The code token t_l sits at prefix_len + l - 1; its predictor is
        // the position before it.
        std::size_t pos = prefix_lens[b] + l - 2;
        const double* h = model.backbone.hidden(trace, b, pos);
        std::vector<double> lp = model.backbone.band_log_probs(h, l, model.params);
        std::uint32_t y = batch[b].target.tokens[l - 1];
        nll -= lp[y];
        std::vector<double> d_logits(lp.size());
        for (std::size_t t = 0; t < lp.size(); ++t) {
          d_logits[t] = (std::exp(lp[t]) - (t == y ? 1.0 : 0.0)) * scale;
        }
        model.backbone.band_logits_backward(h, l, d_logits, model.params,
                                            d_hidden.row(trace.row(b, pos)));
      }
      if (!std::isfinite(nll)) {
        throw InputError("train: non-finite lm loss at example " + std::to_string(b));
      }
      loss.lm_nll += nll;
    }
    model.backbone.backward(trace, d_hidden, model.params);
  }

  loss.draft_nll /= static_cast<double>(B);
  loss.lm_nll /= static_cast<double>(B);
  loss.total = cfg.draft_loss_weight * loss.draft_nll + cfg.lm_loss_weight * loss.lm_nll;
  opt.step(model.params);
  return loss;
}

FitResult fit(GrModel& model, const std::vector<TrainingExample>& train, const TrainConfig& cfg,
              const EpochCallback& on_epoch) {
  cfg.validate();
  if (train.empty()) throw InputError("train: empty training set");
  AdamOptimizer opt(cfg);
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0u);

  FitResult result;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    LossBreakdown sum;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<TrainingExample> batch;
      batch.reserve(end - start);
      for (std::size_t i = start; i < end; ++i) batch.push_back(train[order[i]]);
      LossBreakdown l = train_step(batch, model, cfg, opt);
      sum.draft_nll += l.draft_nll * static_cast<double>(batch.size());
      sum.lm_nll += l.lm_nll * static_cast<double>(batch.size());
      sum.total += l.total * static_cast<double>(batch.size());
      seen += batch.size();
    }
    EpochStats stats;
    stats.epoch = epoch;
    stats.mean_loss = {sum.draft_nll / seen, sum.lm_nll / seen, sum.total / seen};
    result.history.push_back(stats);
    result.epochs_run = epoch;
    if (on_epoch && !on_epoch(stats)) break;
  }
  return result;
}

}  // namespace nezha
