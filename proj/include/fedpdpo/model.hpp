#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "fedpdpo/data.hpp"
#include "fedpdpo/matrix.hpp"
#include "fedpdpo/numerics.hpp"
#include "fedpdpo/rng.hpp"

namespace fedpdpo {

// ---------------------------------------------------------------------------
// Configuration

struct BackboneConfig {
  int vocab_size = 16;
  int hidden_dim = 16;
  int n_layers = 1;
  int n_heads = 2;
  int max_seq_len = 32;
  std::uint64_t seed = 0;
};

struct ModelConfig {
  BackboneConfig backbone;
  int lora_rank = 4;
  double lora_alpha = 8.0;
  int bottleneck_dim = 8;
  double bottleneck_dropout = 0.0;
  int reward_hidden_dim = 8;
  double reward_dropout = 0.0;
  bool bottleneck_enabled = true;   // off reproduces the no-adapter ablation
  bool pool_include_prompt = false; // reward pooling span
};

void validate_model_config(const ModelConfig& cfg);

// ---------------------------------------------------------------------------
// Parameter blocks

// Low-rank update attached to a frozen weight: W = W0 + (alpha/r) B A.
// B starts at zero so a fresh adapter is a no-op.
struct LoraAdapter {
  Matrix a;  // (r x n)
  Matrix b;  // (m x r)
  int rank = 0;
  double alpha = 0.0;

  double scaling() const { return alpha / static_cast<double>(rank); }
};

struct LayerLora {
  LoraAdapter qkv;
  LoraAdapter attn_out;
  LoraAdapter mlp_fc;
  LoraAdapter mlp_proj;
};

struct BackboneLayer {
  Matrix ln1_gamma, ln1_beta;
  Matrix w_qkv, b_qkv;    // (3d x d), (1 x 3d)
  Matrix w_attn_out, b_attn_out;
  Matrix ln2_gamma, ln2_beta;
  Matrix w_fc, b_fc;      // (4d x d), (1 x 4d)
  Matrix w_proj, b_proj;  // (d x 4d), (1 x d)
};

struct BackboneWeights {
  Matrix tok_emb;  // (V x d)
  Matrix pos_emb;  // (max_seq x d)
  std::vector<BackboneLayer> layers;
  Matrix lnf_gamma, lnf_beta;
};

struct BottleneckAdapter {
  Matrix w_enc, b_enc;  // (bd x d), (1 x bd)
  Matrix w_dec, b_dec;  // (d x bd), (1 x d)
  Matrix ln_gamma, ln_beta;
  double dropout_p = 0.0;
};

struct LmHead {
  Matrix w;  // (V x d)
  Matrix b;  // (1 x V)
};

struct RewardHead {
  Matrix w1, b1;  // (h x d), (1 x h)
  Matrix w2, b2;  // (1 x h), (1 x 1)
  double dropout_p = 0.0;
};

struct ClientModel {
  ModelConfig cfg;
  BackboneWeights backbone;  // frozen, never receives gradient
  std::vector<LayerLora> lora;
  BottleneckAdapter bottleneck;
  LmHead lm_head;
  RewardHead reward_head;
};

// Immutable copy of everything the log-likelihood path reads.
class ReferenceSnapshot {
 public:
  explicit ReferenceSnapshot(const ClientModel& source) : frozen_(source) {}
  const ClientModel& model() const { return frozen_; }

 private:
  ClientModel frozen_;
};

ReferenceSnapshot make_reference_snapshot(const ClientModel& model);

// Backbone weights come from the backbone seed, personalized modules from
// the client seed; two clients with the same backbone seed share a
// bit-identical backbone.
ClientModel init_client_model(const ModelConfig& cfg, std::uint64_t backbone_seed,
                              std::uint64_t client_seed);

// ---------------------------------------------------------------------------
// Parameter registry

enum class ParamGroup { kBackbone, kLora, kBottleneck, kLmHead, kRewardHead };

struct ParamRef {
  std::string name;
  ParamGroup group;
  Matrix* value;
};

struct TrainableSelector {
  bool lora = false;
  bool bottleneck = false;
  bool lm_head = false;
  bool reward_head = false;

  static TrainableSelector lora_only() { return {true, false, false, false}; }
  static TrainableSelector personalized(bool with_bottleneck = true,
                                        bool with_reward = true) {
    return {false, with_bottleneck, true, with_reward};
  }
  static TrainableSelector all() { return {true, true, true, true}; }

  bool has(ParamGroup g) const {
    switch (g) {
      case ParamGroup::kLora: return lora;
      case ParamGroup::kBottleneck: return bottleneck;
      case ParamGroup::kLmHead: return lm_head;
      case ParamGroup::kRewardHead: return reward_head;
      default: return false;
    }
  }
  bool empty() const { return !(lora || bottleneck || lm_head || reward_head); }
};

// Trainable parameters in a stable order; backbone tensors only when asked.
std::vector<ParamRef> collect_params(ClientModel& model, bool include_backbone = false);
std::vector<ParamRef> collect_selected(ClientModel& model, const TrainableSelector& sel);

class GradMap {
 public:
  Matrix& accum(const std::string& name, std::size_t rows, std::size_t cols);
  const Matrix* find(const std::string& name) const;
  const std::map<std::string, Matrix>& tensors() const { return grads_; }
  std::map<std::string, Matrix>& tensors() { return grads_; }
  bool empty() const { return grads_.empty(); }
  double global_norm() const;
  void scale(double a);
  void check_finite() const;

 private:
  std::map<std::string, Matrix> grads_;
};

std::uint64_t backbone_checksum(const ClientModel& model);
std::uint64_t lora_checksum(const ClientModel& model);
std::uint64_t personalized_checksum(const ClientModel& model);

// ---------------------------------------------------------------------------
// Forward / backward

struct DropoutCtx {
  bool training = false;
  SeededRng* rng = nullptr;
};

// One frozen-plus-low-rank linear layer; exposed for direct probing.
Matrix lora_linear_forward(const Matrix& x, const Matrix& w0, const Matrix& b,
                           const LoraAdapter& lora, Matrix* xa_cache);

// Residual bottleneck on a single feature vector.
Vector bottleneck_forward(const BottleneckAdapter& adapter, const Vector& zprime,
                          DropoutCtx dropout);

struct AttnCache {
  std::vector<Matrix> probs;  // per head, (T x T) lower-triangular
};

struct LayerCache {
  Matrix ln1_in;
  Matrix ln1_out;
  Matrix qkv;
  Matrix qkv_xa;
  AttnCache attn;
  Matrix attn_ctx;
  Matrix attn_out_xa;
  Matrix ln2_in;
  Matrix ln2_out;
  Matrix fc_pre;
  Matrix fc_act;
  Matrix fc_xa;
  Matrix proj_xa;
};

struct SeqCache {
  std::vector<int> tokens;
  std::size_t prompt_len = 0;
  Matrix x0;
  std::vector<LayerCache> layers;
  Matrix lnf_in;
  Matrix zprime;
  // bottleneck intermediates (empty when the adapter is disabled)
  Matrix enc_pre;
  Matrix enc_act;
  Matrix enc_drop;
  Matrix enc_mask;
  Matrix dec_out;
  Matrix ln_in;
  Matrix z;
  // language-model path
  Matrix logprobs;  // (T x V), row-wise log-softmax of the head logits
  // reward path
  bool reward_computed = false;
  std::size_t span_begin = 0, span_end = 0;
  Vector pooled;
  Vector rh_pre;
  Vector rh_act;
  Vector rh_drop;
  Vector rh_mask;
  double reward = 0.0;
};

// Runs backbone -> bottleneck, optionally the LM head log-softmax.
SeqCache forward_sequence(const ClientModel& model, const std::vector<int>& tokens,
                          std::size_t prompt_len, bool want_logits,
                          DropoutCtx dropout);

// Sum of response-token log-probabilities from a cache with logits.
double logprob_from_cache(const SeqCache& cache);

// Fills the reward-path intermediates of an existing cache.
void compute_reward(const ClientModel& model, SeqCache& cache, DropoutCtx dropout);

// Accumulates d(dlogprob * logprob + dreward * reward)/dtheta for the
// selected groups. Chain-through of unselected groups is always applied.
void backward_sequence(const ClientModel& model, const SeqCache& cache,
                       double dlogprob, double dreward,
                       const TrainableSelector& sel, GradMap& grads);

// ---------------------------------------------------------------------------
// Public sequence-level operations

// Final hidden states z' of the LoRA-adapted backbone (before bottleneck).
Matrix backbone_forward(const ClientModel& model, const std::vector<int>& tokens);

double sequence_logprob(const ClientModel& model, const std::vector<int>& prompt,
                        const std::vector<int>& response);
double sequence_logprob(const ReferenceSnapshot& ref, const std::vector<int>& prompt,
                        const std::vector<int>& response);

double reward_score(const ClientModel& model, const std::vector<int>& prompt,
                    const std::vector<int>& response, DropoutCtx dropout);

// Reward MLP applied to an already pooled feature vector.
double reward_mlp(const RewardHead& head, const Vector& pooled, DropoutCtx dropout);

// ---------------------------------------------------------------------------
// Checkpoints

// Self-describing binary container: magic, version, a JSON header, then
// named shape-prefixed float64 tensors. Round trips are bit-exact.
void save_tensor_file(const std::string& path, const std::string& json_header,
                      const std::vector<std::pair<std::string, const Matrix*>>& tensors);

struct TensorFile {
  std::string json_header;
  std::map<std::string, Matrix> tensors;
};
TensorFile load_tensor_file(const std::string& path);

void save_model_checkpoint(const std::string& path, const ClientModel& model,
                           const Vocabulary& vocab);
struct LoadedCheckpoint {
  ClientModel model;
  Vocabulary vocab;
};
LoadedCheckpoint load_model_checkpoint(const std::string& path);

}  // namespace fedpdpo
