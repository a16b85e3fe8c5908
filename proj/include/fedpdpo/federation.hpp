#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "fedpdpo/model.hpp"
#include "fedpdpo/objectives.hpp"

namespace fedpdpo {

struct FederationConfig {
  std::size_t n_clients = 3;
  std::size_t total_rounds = 10;
  double eta_h = 1e-4;  // personalized modules
  double eta_w = 5e-5;  // LoRA adapters
  std::size_t local_epochs_personalized = 1;
  std::size_t local_epochs_lora = 1;
  std::size_t batch_size = 8;
  double participation_ratio = 1.0;
  bool deterministic_mode = true;
  std::uint64_t seed = 0;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  double lr_min = 1e-6;
  double lr_decay_factor = 0.8;
};

void validate_federation_config(const FederationConfig& cfg);

struct TrainExample {
  TokenizedTriple tokens;
  RefLogprobs ref;  // reference log-probs, computed once at client setup
};

// One simulated participant. The reference snapshot is taken at
// construction, before any broadcast or training.
struct ClientState {
  std::size_t id;
  ClientModel model;
  ReferenceSnapshot reference;
  std::vector<TrainExample> train;
  std::vector<TokenizedTriple> test;
  AdaptiveScaler scaler;
  AdamWState opt_personalized;
  AdamWState opt_lora;
  SeededRng shuffle_rng;
  std::array<std::optional<double>, 2> prev_epoch_loss;  // per phase

  ClientState(std::size_t id_, ClientModel model_, std::vector<TrainExample> train_,
              std::vector<TokenizedTriple> test_, const FederationConfig& cfg)
      : id(id_),
        model(std::move(model_)),
        reference(model),
        train(std::move(train_)),
        test(std::move(test_)),
        opt_personalized(AdamWConfig{cfg.eta_h, 0.9, 0.999, 1e-8, cfg.weight_decay,
                                     cfg.clip_norm, cfg.lr_min, cfg.lr_decay_factor}),
        opt_lora(AdamWConfig{cfg.eta_w, 0.9, 0.999, 1e-8, cfg.weight_decay,
                             cfg.clip_norm, cfg.lr_min, cfg.lr_decay_factor}),
        shuffle_rng(cfg.seed, 1000 + id_) {}
};

ClientState make_client(std::size_t id, const ModelConfig& cfg,
                        std::uint64_t backbone_seed, std::uint64_t client_seed,
                        std::vector<TokenizedTriple> train,
                        std::vector<TokenizedTriple> test,
                        const FederationConfig& fcfg);

// The only client-to-server payload: LoRA tensors plus scalar stats.
struct LoraUpload {
  std::size_t client_id = 0;
  std::vector<std::pair<std::string, Matrix>> tensors;  // sorted by name
};

LoraUpload make_upload(const ClientState& client);

struct ServerState {
  std::vector<std::pair<std::string, Matrix>> lora;  // sorted by name
  std::size_t round = 0;
};

ServerState init_server(const ModelConfig& cfg, std::uint64_t server_seed);

std::uint64_t server_lora_checksum(const ServerState& server);

// Copies the server adapters into every client, leaving personalized
// modules untouched.
void broadcast(const ServerState& server, std::vector<ClientState>& clients);
void broadcast_to(const ServerState& server, ClientState& client);

struct AggregationWeights {
  std::vector<double> p;
};

// p_i proportional to the train-split size of each participant.
AggregationWeights weights_from_sizes(const std::vector<std::size_t>& sizes);

// Elementwise weighted sum of uploads in ascending client-id order.
void aggregate(ServerState& server, const std::vector<LoraUpload>& uploads,
               const AggregationWeights& weights);

struct PhaseStats {
  double mean_loss = 0.0;
  double lr_after = 0.0;
  std::size_t batches = 0;
};

struct LocalRoundStats {
  PhaseStats personalized;
  PhaseStats lora;
  double post_train_loss = 0.0;
  double s = 0.0;
  double w_r = 0.0;
};

// Two-phase alternating update: personalized modules first (LoRA frozen),
// then the LoRA adapters (personalized modules frozen, explicit margin
// detached). Learning-rate decay fires on the epoch-mean loss.
LocalRoundStats local_round(
    ClientState& client, double w_r, const FederationConfig& fcfg,
    const ObjectiveConfig& ocfg,
    const std::function<void(const ClientState&, int)>& after_phase = {});

// Mean PDPO loss over the whole train split without touching any state.
double evaluate_train_loss(const ClientState& client, double w_r,
                           const FederationConfig& fcfg, const ObjectiveConfig& ocfg);

// Strict-inequality preference ranking on tokenized triples.
double tokenized_preference_accuracy(const ClientModel& model,
                                     const std::vector<TokenizedTriple>& test);

struct RoundRecord {
  std::size_t round = 0;
  std::size_t client_id = 0;
  double phase1_loss = 0.0;
  double phase2_loss = 0.0;
  double train_loss = 0.0;
  double test_accuracy = 0.0;
  double s = 0.0;
  double w_r = 0.0;
  double lr_personalized = 0.0;
  double lr_lora = 0.0;
};

std::string round_record_to_json_line(const RoundRecord& r);

struct FederationHooks {
  // phase is 1 (personalized) or 2 (LoRA), fired right after the phase.
  std::function<void(const ClientState&, int phase)> after_phase;
  std::function<void(const ServerState&, const std::vector<ClientState>&,
                     std::size_t round)>
      after_round;
};

// Algorithm: per round, broadcast -> local rounds (sequential, ascending
// id) -> size-weighted aggregation. Returns one record per participating
// client per round. When partial_history is given, records are appended
// there as they are produced, so an aborted round leaves the completed
// rounds available to the caller.
std::vector<RoundRecord> run_federation(const FederationConfig& fcfg,
                                        const ObjectiveConfig& ocfg,
                                        std::vector<ClientState>& clients,
                                        ServerState& server,
                                        const FederationHooks& hooks = {},
                                        std::vector<RoundRecord>* partial_history = nullptr);

}  // namespace fedpdpo
