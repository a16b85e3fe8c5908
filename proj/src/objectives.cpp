#include "fedpdpo/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace fedpdpo {

// ---------------------------------------------------------------------------
// Margins

TokenizedTriple tokenize_triple(const Vocabulary& vocab, const PreferenceTriple& t,
                                int max_seq_len) {
  TokenizedTriple out;
  out.prompt.push_back(vocab.bos_id());
  auto prompt_body = vocab.tokenize(t.prompt);
  out.prompt.insert(out.prompt.end(), prompt_body.begin(), prompt_body.end());
  out.chosen = vocab.tokenize(t.chosen);
  out.rejected = vocab.tokenize(t.rejected);
  if (out.chosen.empty() || out.rejected.empty())
    throw InputError("triple has an empty tokenized response");

  const std::size_t cap = static_cast<std::size_t>(max_seq_len);
  const std::size_t longest = std::max(out.chosen.size(), out.rejected.size());
  if (out.prompt.size() + longest > cap) {
    // Drop prompt tokens from the left, keeping BOS.
    const std::size_t room = cap > longest + 1 ? cap - longest - 1 : 0;
    if (prompt_body.size() > room) {
      out.prompt.assign(1, vocab.bos_id());
      out.prompt.insert(out.prompt.end(), prompt_body.end() - static_cast<long>(room),
                        prompt_body.end());
    }
  }
  for (auto* resp : {&out.chosen, &out.rejected}) {
    if (out.prompt.size() + resp->size() > cap) {
      const std::size_t room = cap - out.prompt.size();
      if (room < 1) throw InputError("max_seq_len too small for any response token");
      resp->resize(room);
    }
  }
  return out;
}

double implicit_margin_from_logprobs(double lp_chosen_policy, double lp_chosen_ref,
                                     double lp_rejected_policy, double lp_rejected_ref) {
  return (lp_chosen_policy - lp_chosen_ref) - (lp_rejected_policy - lp_rejected_ref);
}

double implicit_margin(const ClientModel& policy, const ReferenceSnapshot& ref,
                       const TokenizedTriple& t) {
  return implicit_margin_from_logprobs(sequence_logprob(policy, t.prompt, t.chosen),
                                       sequence_logprob(ref, t.prompt, t.chosen),
                                       sequence_logprob(policy, t.prompt, t.rejected),
                                       sequence_logprob(ref, t.prompt, t.rejected));
}

double explicit_margin(const ClientModel& policy, const TokenizedTriple& t,
                       DropoutCtx dropout) {
  if (dropout.training && dropout.rng != nullptr) {
    // Both responses see identical masks.
    SeededRng rng_chosen = *dropout.rng;
    SeededRng rng_rejected = rng_chosen;
    const double rw =
        reward_score(policy, t.prompt, t.chosen, DropoutCtx{true, &rng_chosen});
    const double rl =
        reward_score(policy, t.prompt, t.rejected, DropoutCtx{true, &rng_rejected});
    *dropout.rng = rng_chosen;
    return rw - rl;
  }
  return reward_score(policy, t.prompt, t.chosen, DropoutCtx{}) -
         reward_score(policy, t.prompt, t.rejected, DropoutCtx{});
}

double combined_margin(double delta_ir, double delta_er, double w_r, double s) {
  for (double v : {delta_ir, delta_er, w_r, s})
    if (!std::isfinite(v)) throw NumericError("combined_margin: non-finite input");
  if (w_r < 0.0 || s < 0.0)
    throw ContractError("combined_margin: w_r and s must be non-negative");
  return delta_ir + w_r * s * delta_er;
}

// ---------------------------------------------------------------------------
// Adaptive scaling

double update_adaptive_scale(AdaptiveScaler& scaler,
                             const std::vector<MarginBundle>& batch) {
  if (batch.empty()) throw ContractError("update_adaptive_scale: empty batch");
  double m_ir = 0.0;
  double m_er = 0.0;
  for (const auto& b : batch) {
    m_ir += std::abs(b.delta_ir);
    m_er += std::abs(b.delta_er);
  }
  m_ir /= static_cast<double>(batch.size());
  m_er /= static_cast<double>(batch.size());
  if (!scaler.initialized) {
    scaler.ema_ir = m_ir;
    scaler.ema_er = m_er;
    scaler.initialized = true;
  } else {
    scaler.ema_ir = scaler.momentum * scaler.ema_ir + (1.0 - scaler.momentum) * m_ir;
    scaler.ema_er = scaler.momentum * scaler.ema_er + (1.0 - scaler.momentum) * m_er;
  }
  return scaler.scale();
}

// ---------------------------------------------------------------------------
// Schedules

double reward_weight_at(const ObjectiveConfig& cfg, std::size_t t,
                        std::size_t total_rounds) {
  if (total_rounds < 1) throw ContractError("reward_weight_at: total_rounds < 1");
  if (t >= total_rounds) throw ContractError("reward_weight_at: round out of range");
  if (total_rounds == 1) return cfg.w_r_start;
  const double frac =
      static_cast<double>(t) / static_cast<double>(total_rounds - 1);
  return cfg.w_r_start + (cfg.w_r_end - cfg.w_r_start) * frac;
}

double lr_decay_check(double lr, double prev_loss, double cur_loss, double factor,
                      double lr_min) {
  if (!std::isfinite(prev_loss) || !std::isfinite(cur_loss))
    throw NumericError("lr_decay_check: non-finite loss");
  if (cur_loss > prev_loss) return std::max(factor * lr, lr_min);
  return lr;
}

// ---------------------------------------------------------------------------
// Batch filtering

std::vector<std::size_t> filter_batch(const std::vector<MarginBundle>& batch,
                                      const ObjectiveConfig& cfg) {
  if (batch.empty()) throw ContractError("filter_batch: empty batch");
  const std::size_t n = batch.size();
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), 0);
  if (!cfg.exclusion_enabled || !std::isfinite(cfg.exclusion_k)) return all;

  const std::size_t cap = static_cast<std::size_t>(
      cfg.exclusion_max_ratio * static_cast<double>(n));
  if (cap == 0) return all;

  double mean = 0.0;
  for (const auto& b : batch) mean += b.delta_er;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (const auto& b : batch) var += (b.delta_er - mean) * (b.delta_er - mean);
  var /= static_cast<double>(n);
  const double threshold = cfg.exclusion_k * std::sqrt(var);

  std::vector<std::pair<double, std::size_t>> violators;  // (deviation, index)
  for (std::size_t i = 0; i < n; ++i) {
    const double dev = std::abs(batch[i].delta_er - mean);
    if (dev > threshold) violators.emplace_back(dev, i);
  }
  // When over the cap, drop only the largest deviations.
  std::sort(violators.begin(), violators.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  if (violators.size() > cap) violators.resize(cap);

  std::vector<bool> excluded(n, false);
  for (const auto& [dev, idx] : violators) excluded[idx] = true;
  std::vector<std::size_t> kept;
  for (std::size_t i = 0; i < n; ++i)
    if (!excluded[i]) kept.push_back(i);
  return kept;
}

// ---------------------------------------------------------------------------
// PDPO loss

namespace {

struct SamplePass {
  SeqCache chosen;
  SeqCache rejected;
};

}  // namespace

PdpoBatchResult pdpo_loss_and_grads(const ClientModel& policy,
                                    const std::vector<TokenizedTriple>& batch,
                                    const std::vector<RefLogprobs>& ref_lps,
                                    const ObjectiveConfig& cfg, AdaptiveScaler& scaler,
                                    double w_r, const PdpoOptions& opts) {
  if (batch.empty()) throw ContractError("pdpo_loss_and_grads: empty batch");
  if (ref_lps.size() != batch.size())
    throw ContractError("pdpo_loss_and_grads: reference log-probs misaligned");
  if (opts.compute_grads && opts.selector.empty())
    throw ContractError("pdpo_loss_and_grads: empty trainable selector");
  // With a zero reward weight the whole explicit path is inert and the loss
  // must reduce to plain DPO exactly, so it is skipped rather than scaled.
  const bool use_reward = cfg.reward_head_enabled && w_r != 0.0;

  PdpoBatchResult result;
  result.w_r = w_r;
  std::vector<SamplePass> passes;
  passes.reserve(batch.size());
  result.margins.resize(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const TokenizedTriple& t = batch[i];
    SamplePass pass;
    DropoutCtx ctx_chosen;
    DropoutCtx ctx_rejected;
    SeededRng rng_chosen(0, 0), rng_rejected(0, 0);
    if (opts.train_dropout && opts.rng != nullptr) {
      rng_chosen = *opts.rng;
      rng_rejected = rng_chosen;  // paired masks
      ctx_chosen = DropoutCtx{true, &rng_chosen};
      ctx_rejected = DropoutCtx{true, &rng_rejected};
    }
    std::vector<int> chosen_seq = t.prompt;
    chosen_seq.insert(chosen_seq.end(), t.chosen.begin(), t.chosen.end());
    std::vector<int> rejected_seq = t.prompt;
    rejected_seq.insert(rejected_seq.end(), t.rejected.begin(), t.rejected.end());
    pass.chosen = forward_sequence(policy, chosen_seq, t.prompt.size(), true, ctx_chosen);
    pass.rejected =
        forward_sequence(policy, rejected_seq, t.prompt.size(), true, ctx_rejected);
    if (use_reward) {
      compute_reward(policy, pass.chosen, ctx_chosen);
      compute_reward(policy, pass.rejected, ctx_rejected);
    }
    if (opts.train_dropout && opts.rng != nullptr) *opts.rng = rng_chosen;

    MarginBundle& m = result.margins[i];
    m.delta_ir = implicit_margin_from_logprobs(
        logprob_from_cache(pass.chosen), ref_lps[i].chosen,
        logprob_from_cache(pass.rejected), ref_lps[i].rejected);
    m.delta_er = use_reward ? pass.chosen.reward - pass.rejected.reward : 0.0;
    passes.push_back(std::move(pass));
  }

  if (use_reward) {
    scaler.momentum = cfg.ema_momentum;
    scaler.eps = cfg.scaler_eps;
    result.s = update_adaptive_scale(scaler, result.margins);
    for (auto& m : result.margins)
      m.delta = m.delta_ir + w_r * result.s * m.delta_er;
    result.kept = filter_batch(result.margins, cfg);
  } else {
    result.s = 0.0;
    for (auto& m : result.margins) m.delta = m.delta_ir;
    result.kept.resize(batch.size());
    std::iota(result.kept.begin(), result.kept.end(), 0);
  }
  if (result.kept.empty())
    throw BatchError("pdpo_loss_and_grads: every sample excluded");

  double acc = 0.0;
  double acc_implicit = 0.0;
  for (std::size_t idx : result.kept) {
    acc += log_sigmoid(cfg.beta * result.margins[idx].delta);
    acc_implicit += log_sigmoid(cfg.beta * result.margins[idx].delta_ir);
  }
  result.loss = -acc / static_cast<double>(result.kept.size());
  result.loss_implicit = -acc_implicit / static_cast<double>(result.kept.size());
  if (!std::isfinite(result.loss)) {
    std::ostringstream oss;
    oss << "pdpo_loss_and_grads: non-finite loss; margins:";
    for (std::size_t idx : result.kept) oss << ' ' << result.margins[idx].delta;
    throw NumericError(oss.str());
  }

  if (opts.compute_grads) {
    const double inv_kept = 1.0 / static_cast<double>(result.kept.size());
    for (std::size_t idx : result.kept) {
      const MarginBundle& m = result.margins[idx];
      const double u = -cfg.beta * sigmoid(-cfg.beta * m.delta) * inv_kept;
      const double dr = use_reward && !opts.detach_explicit_margin ? u * w_r * result.s
                                                                   : 0.0;
      backward_sequence(policy, passes[idx].chosen, u, dr, opts.selector, result.grads);
      backward_sequence(policy, passes[idx].rejected, -u, -dr, opts.selector,
                        result.grads);
    }
    result.grads.check_finite();
  }
  return result;
}

RefLogprobs reference_logprobs(const ReferenceSnapshot& ref, const TokenizedTriple& t) {
  return RefLogprobs{sequence_logprob(ref, t.prompt, t.chosen),
                     sequence_logprob(ref, t.prompt, t.rejected)};
}

PdpoBatchResult pdpo_loss_and_grads(const ClientModel& policy,
                                    const ReferenceSnapshot& ref,
                                    const std::vector<TokenizedTriple>& batch,
                                    const ObjectiveConfig& cfg, AdaptiveScaler& scaler,
                                    double w_r, const PdpoOptions& opts) {
  std::vector<RefLogprobs> ref_lps;
  ref_lps.reserve(batch.size());
  for (const auto& t : batch) ref_lps.push_back(reference_logprobs(ref, t));
  return pdpo_loss_and_grads(policy, batch, ref_lps, cfg, scaler, w_r, opts);
}

DpoBatchResult dpo_loss_and_grads(const ClientModel& policy,
                                  const std::vector<TokenizedTriple>& batch,
                                  const std::vector<RefLogprobs>& ref_lps, double beta,
                                  const TrainableSelector& selector,
                                  bool compute_grads) {
  if (batch.empty()) throw ContractError("dpo_loss_and_grads: empty batch");
  if (ref_lps.size() != batch.size())
    throw ContractError("dpo_loss_and_grads: reference log-probs misaligned");

  DpoBatchResult result;
  std::vector<SamplePass> passes;
  passes.reserve(batch.size());
  result.margins.resize(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const TokenizedTriple& t = batch[i];
    SamplePass pass;
    std::vector<int> chosen_seq = t.prompt;
    chosen_seq.insert(chosen_seq.end(), t.chosen.begin(), t.chosen.end());
    std::vector<int> rejected_seq = t.prompt;
    rejected_seq.insert(rejected_seq.end(), t.rejected.begin(), t.rejected.end());
    pass.chosen =
        forward_sequence(policy, chosen_seq, t.prompt.size(), true, DropoutCtx{});
    pass.rejected =
        forward_sequence(policy, rejected_seq, t.prompt.size(), true, DropoutCtx{});
    result.margins[i] = implicit_margin_from_logprobs(
        logprob_from_cache(pass.chosen), ref_lps[i].chosen,
        logprob_from_cache(pass.rejected), ref_lps[i].rejected);
    passes.push_back(std::move(pass));
  }

  double acc = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i)
    acc += log_sigmoid(beta * result.margins[i]);
  result.loss = -acc / static_cast<double>(batch.size());
  if (!std::isfinite(result.loss))
    throw NumericError("dpo_loss_and_grads: non-finite loss");

  if (compute_grads) {
    const double inv = 1.0 / static_cast<double>(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const double u = -beta * sigmoid(-beta * result.margins[i]) * inv;
      backward_sequence(policy, passes[i].chosen, u, 0.0, selector, result.grads);
      backward_sequence(policy, passes[i].rejected, -u, 0.0, selector, result.grads);
    }
    result.grads.check_finite();
  }
  return result;
}

// ---------------------------------------------------------------------------
// Optimizer

void AdamWState::step(const std::vector<ParamRef>& params, const GradMap& grads) {
  grads.check_finite();
  ++step_count_;
  const double t = static_cast<double>(step_count_);
  const double bc1 = 1.0 - std::pow(cfg_.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg_.beta2, t);

  double clip_factor = 1.0;
  if (cfg_.clip_norm > 0.0) {
    double sq = 0.0;
    for (const auto& p : params) {
      const Matrix* g = grads.find(p.name);
      if (g != nullptr) sq += g->squared_norm();
    }
    const double norm = std::sqrt(sq);
    if (norm > cfg_.clip_norm) clip_factor = cfg_.clip_norm / norm;
  }

  for (const auto& p : params) {
    const Matrix* g = grads.find(p.name);
    auto it = moments_.find(p.name);
    if (it == moments_.end()) {
      it = moments_
               .emplace(p.name, std::make_pair(Matrix(p.value->rows(), p.value->cols()),
                                               Matrix(p.value->rows(), p.value->cols())))
               .first;
    }
    Matrix& m = it->second.first;
    Matrix& v = it->second.second;
    if (!m.same_shape(*p.value))
      throw ContractError("AdamWState: moment shape mismatch for " + p.name);
    for (std::size_t i = 0; i < p.value->size(); ++i) {
      const double gi = g != nullptr ? g->data()[i] * clip_factor : 0.0;
      m.data()[i] = cfg_.beta1 * m.data()[i] + (1.0 - cfg_.beta1) * gi;
      v.data()[i] = cfg_.beta2 * v.data()[i] + (1.0 - cfg_.beta2) * gi * gi;
      const double mhat = m.data()[i] / bc1;
      const double vhat = v.data()[i] / bc2;
      double& param = p.value->data()[i];
      param -= lr_ * cfg_.weight_decay * param;
      param -= lr_ * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
    if (!p.value->all_finite())
      throw NumericError("AdamWState: non-finite parameter after step in " + p.name);
  }
}

double AdamWState::maybe_decay(double prev_loss, double cur_loss) {
  lr_ = lr_decay_check(lr_, prev_loss, cur_loss, cfg_.lr_decay_factor, cfg_.lr_min);
  return lr_;
}

}  // namespace fedpdpo
