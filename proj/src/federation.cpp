#include "fedpdpo/federation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <json.hpp>

namespace fedpdpo {

using nlohmann::json;

void validate_federation_config(const FederationConfig& cfg) {
  if (cfg.n_clients < 1) throw ConfigError("federation: n_clients must be >= 1");
  if (cfg.total_rounds < 1) throw ConfigError("federation: total_rounds must be >= 1");
  if (cfg.eta_h < 0.0 || cfg.eta_w < 0.0)
    throw ConfigError("federation: learning rates must be non-negative");
  if (cfg.batch_size < 1) throw ConfigError("federation: batch_size must be >= 1");
  if (cfg.participation_ratio <= 0.0 || cfg.participation_ratio > 1.0)
    throw ConfigError("federation: participation_ratio must be in (0, 1]");
}

ClientState make_client(std::size_t id, const ModelConfig& cfg,
                        std::uint64_t backbone_seed, std::uint64_t client_seed,
                        std::vector<TokenizedTriple> train,
                        std::vector<TokenizedTriple> test,
                        const FederationConfig& fcfg) {
  ClientModel model = init_client_model(cfg, backbone_seed, client_seed);
  std::vector<TrainExample> examples;
  examples.reserve(train.size());
  ClientState state(id, std::move(model), {}, std::move(test), fcfg);
  // Reference log-probs never change; compute them once against the
  // snapshot taken in the constructor.
  for (auto& t : train) {
    TrainExample ex;
    ex.ref = reference_logprobs(state.reference, t);
    ex.tokens = std::move(t);
    examples.push_back(std::move(ex));
  }
  state.train = std::move(examples);
  return state;
}

// ---------------------------------------------------------------------------
// Server / transport

namespace {

std::vector<std::pair<std::string, Matrix>> lora_tensors(const ClientModel& model) {
  auto& m = const_cast<ClientModel&>(model);
  std::vector<std::pair<std::string, Matrix>> out;
  for (const auto& p : collect_params(m, false))
    if (p.group == ParamGroup::kLora) out.emplace_back(p.name, *p.value);
  std::sort(out.begin(), out.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  return out;
}

}  // namespace

LoraUpload make_upload(const ClientState& client) {
  return LoraUpload{client.id, lora_tensors(client.model)};
}

ServerState init_server(const ModelConfig& cfg, std::uint64_t server_seed) {
  // Shapes and init distribution mirror a client adapter set.
  ClientModel probe = init_client_model(cfg, 0, server_seed);
  ServerState server;
  server.lora = lora_tensors(probe);
  return server;
}

std::uint64_t server_lora_checksum(const ServerState& server) {
  std::uint64_t h = 0;
  for (const auto& [name, m] : server.lora) h = combine_checksums(h, checksum(m));
  return h;
}

void broadcast_to(const ServerState& server, ClientState& client) {
  auto params = collect_params(client.model, false);
  for (const auto& [name, tensor] : server.lora) {
    auto it = std::find_if(params.begin(), params.end(),
                           [&](const ParamRef& p) { return p.name == name; });
    if (it == params.end())
      throw ProtocolError("broadcast: client lacks tensor " + name);
    if (!it->value->same_shape(tensor))
      throw ProtocolError("broadcast: shape mismatch for " + name);
    *it->value = tensor;
  }
}

void broadcast(const ServerState& server, std::vector<ClientState>& clients) {
  for (auto& c : clients) broadcast_to(server, c);
}

AggregationWeights weights_from_sizes(const std::vector<std::size_t>& sizes) {
  if (sizes.empty()) throw ContractError("weights_from_sizes: no clients");
  std::size_t total = 0;
  for (std::size_t s : sizes) {
    if (s == 0) throw ContractError("weights_from_sizes: empty client dataset");
    total += s;
  }
  AggregationWeights w;
  w.p.reserve(sizes.size());
  for (std::size_t s : sizes)
    w.p.push_back(static_cast<double>(s) / static_cast<double>(total));
  return w;
}

void aggregate(ServerState& server, const std::vector<LoraUpload>& uploads,
               const AggregationWeights& weights) {
  if (uploads.empty()) throw ContractError("aggregate: no uploads");
  if (uploads.size() != weights.p.size())
    throw ContractError("aggregate: weight count mismatch");
  double sum = 0.0;
  for (double p : weights.p) {
    if (p < 0.0) throw ContractError("aggregate: negative weight");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-12)
    throw ContractError("aggregate: weights sum to " + std::to_string(sum));

  std::vector<std::size_t> order(uploads.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return uploads[a].client_id < uploads[b].client_id;
  });

  for (auto& [name, tensor] : server.lora) {
    Matrix acc(tensor.rows(), tensor.cols());
    for (std::size_t k : order) {
      const auto& upload = uploads[k];
      auto it = std::find_if(upload.tensors.begin(), upload.tensors.end(),
                             [&](const auto& nt) { return nt.first == name; });
      if (it == upload.tensors.end())
        throw ProtocolError("aggregate: upload from client " +
                            std::to_string(upload.client_id) + " lacks " + name);
      if (!it->second.same_shape(tensor))
        throw ProtocolError("aggregate: shape mismatch for " + name);
      acc.add_scaled(it->second, weights.p[k]);
    }
    tensor = std::move(acc);
  }
  ++server.round;
}

// ---------------------------------------------------------------------------
// Local training

namespace {

PhaseStats train_phase(ClientState& client, int phase, double w_r,
                       const FederationConfig& fcfg, const ObjectiveConfig& ocfg) {
  const bool lora_phase = phase == 2;
  TrainableSelector sel =
      lora_phase ? TrainableSelector::lora_only()
                 : TrainableSelector::personalized(client.model.cfg.bottleneck_enabled,
                                                   ocfg.reward_head_enabled);
  AdamWState& opt = lora_phase ? client.opt_lora : client.opt_personalized;
  const std::size_t epochs =
      lora_phase ? fcfg.local_epochs_lora : fcfg.local_epochs_personalized;

  PhaseStats stats;
  stats.lr_after = opt.lr();
  auto params = collect_selected(client.model, sel);
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    std::vector<std::size_t> order(client.train.size());
    std::iota(order.begin(), order.end(), 0);
    // Fisher-Yates from the client's own stream.
    for (std::size_t i = order.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(
          client.shuffle_rng.next_uniform() * static_cast<double>(i));
      std::swap(order[i - 1], order[std::min(j, i - 1)]);
    }
    double epoch_loss = 0.0;
    double epoch_loss_implicit = 0.0;
    std::size_t epoch_batches = 0;
    for (std::size_t start = 0; start < order.size(); start += fcfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + fcfg.batch_size);
      std::vector<TokenizedTriple> batch;
      std::vector<RefLogprobs> refs;
      batch.reserve(end - start);
      refs.reserve(end - start);
      for (std::size_t k = start; k < end; ++k) {
        batch.push_back(client.train[order[k]].tokens);
        refs.push_back(client.train[order[k]].ref);
      }
      PdpoOptions opts;
      opts.selector = sel;
      opts.detach_explicit_margin = lora_phase;
      auto res = pdpo_loss_and_grads(client.model, batch, refs, ocfg, client.scaler,
                                     w_r, opts);
      opt.step(params, res.grads);
      epoch_loss += res.loss;
      epoch_loss_implicit += res.loss_implicit;
      ++epoch_batches;
    }
    if (epoch_batches > 0) {
      epoch_loss /= static_cast<double>(epoch_batches);
      epoch_loss_implicit /= static_cast<double>(epoch_batches);
    }
    // The decay trigger watches the implicit-margin series, which keeps its
    // meaning across rounds while w_r ramps.
    const std::size_t slot = lora_phase ? 1 : 0;
    if (client.prev_epoch_loss[slot].has_value())
      opt.maybe_decay(*client.prev_epoch_loss[slot], epoch_loss_implicit);
    client.prev_epoch_loss[slot] = epoch_loss_implicit;
    stats.mean_loss += epoch_loss;
    stats.batches += epoch_batches;
  }
  if (epochs > 0) stats.mean_loss /= static_cast<double>(epochs);
  stats.lr_after = opt.lr();
  return stats;
}

}  // namespace

double evaluate_train_loss(const ClientState& client, double w_r,
                           const FederationConfig& fcfg, const ObjectiveConfig& ocfg) {
  if (client.train.empty()) return 0.0;
  double total = 0.0;
  std::size_t batches = 0;
  AdaptiveScaler scratch = client.scaler;  // evaluation must not advance the EMA
  for (std::size_t start = 0; start < client.train.size(); start += fcfg.batch_size) {
    const std::size_t end = std::min(client.train.size(), start + fcfg.batch_size);
    std::vector<TokenizedTriple> batch;
    std::vector<RefLogprobs> refs;
    for (std::size_t k = start; k < end; ++k) {
      batch.push_back(client.train[k].tokens);
      refs.push_back(client.train[k].ref);
    }
    PdpoOptions opts;
    opts.selector = TrainableSelector::all();
    opts.compute_grads = false;
    auto res = pdpo_loss_and_grads(client.model, batch, refs, ocfg, scratch, w_r, opts);
    total += res.loss;
    ++batches;
  }
  return total / static_cast<double>(batches);
}

LocalRoundStats local_round(ClientState& client, double w_r,
                            const FederationConfig& fcfg, const ObjectiveConfig& ocfg,
                            const std::function<void(const ClientState&, int)>&
                                after_phase) {
  if (client.train.empty()) throw ContractError("local_round: client has no train data");
  LocalRoundStats stats;
  stats.w_r = w_r;
  stats.personalized = train_phase(client, 1, w_r, fcfg, ocfg);
  if (after_phase) after_phase(client, 1);
  stats.lora = train_phase(client, 2, w_r, fcfg, ocfg);
  if (after_phase) after_phase(client, 2);
  stats.post_train_loss = evaluate_train_loss(client, w_r, fcfg, ocfg);
  stats.s = client.scaler.initialized ? client.scaler.scale() : 0.0;
  return stats;
}

double tokenized_preference_accuracy(const ClientModel& model,
                                     const std::vector<TokenizedTriple>& test) {
  if (test.empty())
    throw ContractError("tokenized_preference_accuracy: empty test set");
  std::size_t correct = 0;
  for (const auto& t : test) {
    const double lp_w = sequence_logprob(model, t.prompt, t.chosen);
    const double lp_l = sequence_logprob(model, t.prompt, t.rejected);
    if (lp_w > lp_l) ++correct;  // ties count as incorrect
  }
  return static_cast<double>(correct) / static_cast<double>(test.size());
}

// ---------------------------------------------------------------------------
// Round loop

std::string round_record_to_json_line(const RoundRecord& r) {
  json j;
  j["round"] = r.round;
  j["client_id"] = r.client_id;
  j["phase1_loss"] = r.phase1_loss;
  j["phase2_loss"] = r.phase2_loss;
  j["train_loss"] = r.train_loss;
  j["test_accuracy"] = r.test_accuracy;
  j["s"] = r.s;
  j["w_r"] = r.w_r;
  j["lr_personalized"] = r.lr_personalized;
  j["lr_lora"] = r.lr_lora;
  return j.dump();
}

std::vector<RoundRecord> run_federation(const FederationConfig& fcfg,
                                        const ObjectiveConfig& ocfg,
                                        std::vector<ClientState>& clients,
                                        ServerState& server,
                                        const FederationHooks& hooks) {
  validate_federation_config(fcfg);
  if (clients.empty()) throw ContractError("run_federation: no clients");

  std::vector<RoundRecord> history;
  SeededRng participation_rng(fcfg.seed, 9001);
  for (std::size_t round = 0; round < fcfg.total_rounds; ++round) {
    const double w_r = reward_weight_at(ocfg, round, fcfg.total_rounds);
    broadcast(server, clients);

    // Participant selection (all clients at ratio 1.0).
    std::vector<std::size_t> ids(clients.size());
    std::iota(ids.begin(), ids.end(), 0);
    std::size_t take = static_cast<std::size_t>(
        std::ceil(fcfg.participation_ratio * static_cast<double>(clients.size())));
    take = std::min(std::max<std::size_t>(take, 1), clients.size());
    if (take < clients.size()) {
      for (std::size_t i = ids.size(); i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(
            participation_rng.next_uniform() * static_cast<double>(i));
        std::swap(ids[i - 1], ids[std::min(j, i - 1)]);
      }
      ids.resize(take);
      std::sort(ids.begin(), ids.end());
    }

    std::vector<LoraUpload> uploads;
    std::vector<std::size_t> sizes;
    for (std::size_t idx : ids) {
      ClientState& client = clients[idx];
      LocalRoundStats stats = local_round(client, w_r, fcfg, ocfg, hooks.after_phase);
      uploads.push_back(make_upload(client));
      sizes.push_back(client.train.size());

      RoundRecord rec;
      rec.round = round;
      rec.client_id = client.id;
      rec.phase1_loss = stats.personalized.mean_loss;
      rec.phase2_loss = stats.lora.mean_loss;
      rec.train_loss = stats.post_train_loss;
      rec.test_accuracy = client.test.empty()
                              ? 0.0
                              : tokenized_preference_accuracy(client.model, client.test);
      rec.s = stats.s;
      rec.w_r = w_r;
      rec.lr_personalized = stats.personalized.lr_after;
      rec.lr_lora = stats.lora.lr_after;
      history.push_back(rec);
    }
    aggregate(server, uploads, weights_from_sizes(sizes));
    if (hooks.after_round) hooks.after_round(server, clients, round);
  }
  return history;
}

}  // namespace fedpdpo
