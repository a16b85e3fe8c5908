#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "fedpdpo/data.hpp"
#include "fedpdpo/model.hpp"

namespace fedpdpo {

// ---------------------------------------------------------------------------
// Margins

struct MarginBundle {
  double delta_ir = 0.0;
  double delta_er = 0.0;
  double delta = 0.0;  // delta_ir + w_r * s * delta_er for the batch (w_r, s)
};

struct TokenizedTriple {
  std::vector<int> prompt;  // leading BOS included
  std::vector<int> chosen;
  std::vector<int> rejected;
};

// BOS-prefixed tokenization; over-long inputs drop prompt tokens from the
// left first, then response tails. A response never shrinks below one token.
TokenizedTriple tokenize_triple(const Vocabulary& vocab, const PreferenceTriple& t,
                                int max_seq_len);

double implicit_margin_from_logprobs(double lp_chosen_policy, double lp_chosen_ref,
                                     double lp_rejected_policy, double lp_rejected_ref);

double implicit_margin(const ClientModel& policy, const ReferenceSnapshot& ref,
                       const TokenizedTriple& t);

// Reward-head margin. In training mode both responses see the same dropout
// masks (the rng state is duplicated for the second forward).
double explicit_margin(const ClientModel& policy, const TokenizedTriple& t,
                       DropoutCtx dropout);

double combined_margin(double delta_ir, double delta_er, double w_r, double s);

// ---------------------------------------------------------------------------
// Adaptive scaling

// Tracks smoothed mean magnitudes of the two margins; the scale
// s = ema_ir / (ema_er + eps) aligns the explicit margin with the implicit
// one. The first batch seeds the EMAs directly.
struct AdaptiveScaler {
  double ema_ir = 0.0;
  double ema_er = 0.0;
  double momentum = 0.95;
  double eps = 1e-8;
  bool initialized = false;

  double scale() const {
    if (!initialized) throw ContractError("AdaptiveScaler: scale() before any batch");
    return ema_ir / (ema_er + eps);
  }
};

double update_adaptive_scale(AdaptiveScaler& scaler,
                             const std::vector<MarginBundle>& batch);

// ---------------------------------------------------------------------------
// Objective configuration and schedules

struct ObjectiveConfig {
  double beta = 0.1;
  double w_r_start = 0.5;
  double w_r_end = 1.5;
  double exclusion_k = 2.0;
  double exclusion_max_ratio = 0.5;
  bool exclusion_enabled = true;
  bool reward_head_enabled = true;
  double ema_momentum = 0.95;
  double scaler_eps = 1e-8;
};

// Linear schedule over communication rounds; t in [0, T).
double reward_weight_at(const ObjectiveConfig& cfg, std::size_t t,
                        std::size_t total_rounds);

// Multiplicative decay with a floor, fired when the loss went up.
double lr_decay_check(double lr, double prev_loss, double cur_loss,
                      double factor = 0.8, double lr_min = 1e-6);

// ---------------------------------------------------------------------------
// Batch filtering

// Keeps indices whose explicit margin sits within k population standard
// deviations of the batch mean. At most floor(max_ratio * n) samples are
// excluded; when more violate the band, only the largest deviations go.
std::vector<std::size_t> filter_batch(const std::vector<MarginBundle>& batch,
                                      const ObjectiveConfig& cfg);

// ---------------------------------------------------------------------------
// Losses

struct RefLogprobs {
  double chosen = 0.0;
  double rejected = 0.0;
};

struct PdpoOptions {
  TrainableSelector selector;
  // Treat the explicit margin as a constant in backprop (the LoRA-phase
  // convention); its value still enters the loss.
  bool detach_explicit_margin = false;
  bool train_dropout = false;   // paired masks per sample when enabled
  SeededRng* rng = nullptr;
  bool compute_grads = true;
};

struct PdpoBatchResult {
  double loss = 0.0;
  // Same logistic loss restricted to the implicit margin. The learning-rate
  // decay trigger watches this series; the full loss changes meaning as w_r
  // ramps across rounds, so consecutive values would not be comparable.
  double loss_implicit = 0.0;
  GradMap grads;
  std::vector<MarginBundle> margins;  // one per input sample
  std::vector<std::size_t> kept;      // surviving indices, ascending
  double s = 0.0;                     // scale applied (0 when reward disabled)
  double w_r = 0.0;
};

// Loss over the filtered batch: -mean log sigmoid(beta * delta), with exact
// analytic gradients for the selected groups. s and w_r are constants
// within the step.
PdpoBatchResult pdpo_loss_and_grads(const ClientModel& policy,
                                    const std::vector<TokenizedTriple>& batch,
                                    const std::vector<RefLogprobs>& ref_lps,
                                    const ObjectiveConfig& cfg, AdaptiveScaler& scaler,
                                    double w_r, const PdpoOptions& opts);

PdpoBatchResult pdpo_loss_and_grads(const ClientModel& policy,
                                    const ReferenceSnapshot& ref,
                                    const std::vector<TokenizedTriple>& batch,
                                    const ObjectiveConfig& cfg, AdaptiveScaler& scaler,
                                    double w_r, const PdpoOptions& opts);

RefLogprobs reference_logprobs(const ReferenceSnapshot& ref, const TokenizedTriple& t);

struct DpoBatchResult {
  double loss = 0.0;
  GradMap grads;
  std::vector<double> margins;  // implicit margins per sample
};

// Standard preference loss on the implicit margin alone.
DpoBatchResult dpo_loss_and_grads(const ClientModel& policy,
                                  const std::vector<TokenizedTriple>& batch,
                                  const std::vector<RefLogprobs>& ref_lps, double beta,
                                  const TrainableSelector& selector,
                                  bool compute_grads = true);

// ---------------------------------------------------------------------------
// Optimizer

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double clip_norm = 1.0;  // <= 0 disables clipping
  double lr_min = 1e-6;
  double lr_decay_factor = 0.8;
};

// Decoupled-weight-decay Adam with bias correction and global-norm
// gradient clipping. Moments are keyed by parameter name.
class AdamWState {
 public:
  explicit AdamWState(const AdamWConfig& cfg) : cfg_(cfg), lr_(cfg.lr) {}

  void step(const std::vector<ParamRef>& params, const GradMap& grads);

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  std::int64_t step_count() const { return step_count_; }

  // lr <- max(factor * lr, lr_min) when the current loss exceeds the
  // previous one; returns the (possibly unchanged) rate.
  double maybe_decay(double prev_loss, double cur_loss);

  const AdamWConfig& config() const { return cfg_; }

 private:
  AdamWConfig cfg_;
  double lr_;
  std::int64_t step_count_ = 0;
  std::map<std::string, std::pair<Matrix, Matrix>> moments_;
};

}  // namespace fedpdpo
