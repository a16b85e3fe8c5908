#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <set>

#include "fedpdpo/federation.hpp"

using namespace fedpdpo;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.backbone.vocab_size = 16;
  cfg.backbone.hidden_dim = 8;
  cfg.backbone.n_layers = 1;
  cfg.backbone.n_heads = 2;
  cfg.backbone.max_seq_len = 16;
  cfg.lora_rank = 2;
  cfg.lora_alpha = 4.0;
  cfg.bottleneck_dim = 4;
  cfg.reward_hidden_dim = 4;
  return cfg;
}

std::vector<TokenizedTriple> toy_data(std::uint64_t seed, std::size_t n) {
  SeededRng rng(seed, 0);
  std::vector<TokenizedTriple> out;
  for (std::size_t i = 0; i < n; ++i) {
    auto tok = [&](std::size_t len) {
      std::vector<int> v;
      for (std::size_t k = 0; k < len; ++k)
        v.push_back(1 + static_cast<int>(rng.next_u64() % 14));
      return v;
    };
    out.push_back({tok(2), tok(3), tok(3)});
  }
  return out;
}

std::vector<ClientState> toy_clients(std::size_t n, const FederationConfig& fcfg,
                                     std::size_t train_per_client = 8) {
  std::vector<ClientState> clients;
  for (std::size_t i = 0; i < n; ++i) {
    clients.push_back(make_client(i, tiny_config(), 500, 600 + i,
                                  toy_data(40 + i, train_per_client), toy_data(90 + i, 4),
                                  fcfg));
  }
  return clients;
}

}  // namespace

TEST_CASE("broadcast copies server lora bitwise and is idempotent") {
  FederationConfig fcfg;
  auto clients = toy_clients(3, fcfg);
  ServerState server = init_server(tiny_config(), 7);
  const auto personalized_before = personalized_checksum(clients[1].model);

  broadcast(server, clients);
  for (const auto& c : clients) {
    auto upload = make_upload(c);
    std::uint64_t h = 0;
    for (const auto& [name, m] : upload.tensors) h = combine_checksums(h, checksum(m));
    CHECK(h == server_lora_checksum(server));
  }
  CHECK(personalized_checksum(clients[1].model) == personalized_before);

  const auto lora_after_first = lora_checksum(clients[0].model);
  broadcast(server, clients);
  CHECK(lora_checksum(clients[0].model) == lora_after_first);
}

TEST_CASE("broadcast rejects incompatible shapes") {
  FederationConfig fcfg;
  auto clients = toy_clients(1, fcfg);
  ModelConfig other = tiny_config();
  other.lora_rank = 4;
  ServerState server = init_server(other, 7);
  CHECK_THROWS_AS(broadcast(server, clients), ProtocolError);
}

TEST_CASE("aggregation weights from sizes are exact rationals") {
  auto w = weights_from_sizes({3, 1});
  CHECK(w.p[0] == 0.75);
  CHECK(w.p[1] == 0.25);
  double sum = 0.0;
  for (double p : weights_from_sizes({7, 11, 13, 5}).p) sum += p;
  CHECK(std::abs(sum - 1.0) <= 1e-12);
  // proportionality is exact on the integers
  auto w2 = weights_from_sizes({7, 11, 13, 5});
  CHECK(w2.p[2] == 13.0 / 36.0);
  CHECK_THROWS_AS(weights_from_sizes({3, 0}), ContractError);
  CHECK_THROWS_AS(weights_from_sizes({}), ContractError);
}

TEST_CASE("single-client aggregation reproduces the upload exactly") {
  FederationConfig fcfg;
  auto clients = toy_clients(1, fcfg);
  ServerState server = init_server(tiny_config(), 7);
  // Nudge the client adapters so they differ from the server.
  for (auto& p : collect_params(clients[0].model, false))
    if (p.group == ParamGroup::kLora)
      for (double& v : p.value->storage()) v += 0.125;
  auto upload = make_upload(clients[0]);
  aggregate(server, {upload}, weights_from_sizes({5}));
  for (std::size_t i = 0; i < server.lora.size(); ++i) {
    CHECK(server.lora[i].first == upload.tensors[i].first);
    CHECK(server.lora[i].second == upload.tensors[i].second);
  }
  CHECK(server.round == 1);
}

TEST_CASE("equal-size two-client aggregation is the elementwise mean") {
  FederationConfig fcfg;
  auto clients = toy_clients(2, fcfg);
  SeededRng rng(8, 8);
  for (auto& c : clients)
    for (auto& p : collect_params(c.model, false))
      if (p.group == ParamGroup::kLora)
        for (double& v : p.value->storage()) v = rng.next_gaussian();
  ServerState server = init_server(tiny_config(), 7);
  auto u0 = make_upload(clients[0]);
  auto u1 = make_upload(clients[1]);
  aggregate(server, {u0, u1}, weights_from_sizes({4, 4}));
  for (std::size_t i = 0; i < server.lora.size(); ++i)
    for (std::size_t k = 0; k < server.lora[i].second.size(); ++k)
      CHECK(server.lora[i].second.data()[k] ==
            doctest::Approx(0.5 * u0.tensors[i].second.data()[k] +
                            0.5 * u1.tensors[i].second.data()[k])
                .epsilon(1e-15));
}

TEST_CASE("3:1 weighting lands on 0.75a + 0.25b to 1e-15") {
  FederationConfig fcfg;
  auto clients = toy_clients(2, fcfg);
  SeededRng rng(9, 9);
  for (auto& c : clients)
    for (auto& p : collect_params(c.model, false))
      if (p.group == ParamGroup::kLora)
        for (double& v : p.value->storage()) v = rng.next_gaussian();
  ServerState server = init_server(tiny_config(), 7);
  auto u0 = make_upload(clients[0]);
  auto u1 = make_upload(clients[1]);
  aggregate(server, {u0, u1}, weights_from_sizes({3, 1}));
  const double a = u0.tensors[0].second.at(0, 0);
  const double b = u1.tensors[0].second.at(0, 0);
  CHECK(std::abs(server.lora[0].second.at(0, 0) - (0.75 * a + 0.25 * b)) <= 1e-15);
}

TEST_CASE("aggregation is linear in the uploads") {
  FederationConfig fcfg;
  auto clients = toy_clients(2, fcfg);
  SeededRng rng(10, 10);
  for (auto& c : clients)
    for (auto& p : collect_params(c.model, false))
      if (p.group == ParamGroup::kLora)
        for (double& v : p.value->storage()) v = rng.next_gaussian();
  auto u0 = make_upload(clients[0]);
  auto u1 = make_upload(clients[1]);
  const double c_scale = 2.5;

  ServerState s1 = init_server(tiny_config(), 7);
  aggregate(s1, {u0, u1}, weights_from_sizes({2, 6}));

  auto scaled0 = u0;
  auto scaled1 = u1;
  for (auto& [n, m] : scaled0.tensors) m.scale(c_scale);
  for (auto& [n, m] : scaled1.tensors) m.scale(c_scale);
  ServerState s2 = init_server(tiny_config(), 7);
  aggregate(s2, {scaled0, scaled1}, weights_from_sizes({2, 6}));

  for (std::size_t i = 0; i < s1.lora.size(); ++i)
    for (std::size_t k = 0; k < s1.lora[i].second.size(); ++k)
      CHECK(s2.lora[i].second.data()[k] ==
            doctest::Approx(c_scale * s1.lora[i].second.data()[k]).epsilon(1e-12));
}

TEST_CASE("aggregate validates weights and shapes") {
  FederationConfig fcfg;
  auto clients = toy_clients(2, fcfg);
  ServerState server = init_server(tiny_config(), 7);
  auto u0 = make_upload(clients[0]);
  auto u1 = make_upload(clients[1]);
  AggregationWeights bad{{0.6, 0.6}};
  CHECK_THROWS_AS(aggregate(server, {u0, u1}, bad), ContractError);
  u1.tensors.pop_back();
  CHECK_THROWS_AS(aggregate(server, {u0, u1}, weights_from_sizes({1, 1})),
                  ProtocolError);
}

TEST_CASE("zero learning rates leave every parameter untouched") {
  FederationConfig fcfg;
  fcfg.eta_h = 0.0;
  fcfg.eta_w = 0.0;
  fcfg.weight_decay = 0.0;
  fcfg.batch_size = 4;
  auto clients = toy_clients(1, fcfg);
  const auto lora_before = lora_checksum(clients[0].model);
  const auto pers_before = personalized_checksum(clients[0].model);
  ObjectiveConfig ocfg;
  auto stats = local_round(clients[0], 0.5, fcfg, ocfg);
  CHECK(lora_checksum(clients[0].model) == lora_before);
  CHECK(personalized_checksum(clients[0].model) == pers_before);
  CHECK(stats.personalized.mean_loss > 0.0);
  CHECK(stats.lora.mean_loss > 0.0);
}

TEST_CASE("phase freeze discipline inside a local round") {
  FederationConfig fcfg;
  fcfg.eta_h = 1e-3;
  fcfg.eta_w = 1e-3;
  fcfg.batch_size = 4;
  auto clients = toy_clients(1, fcfg);
  ClientState& client = clients[0];
  const auto backbone_before = backbone_checksum(client.model);
  const auto lora_before = lora_checksum(client.model);
  std::uint64_t lora_after_phase1 = 0;
  std::uint64_t pers_after_phase1 = 0;
  std::uint64_t pers_after_phase2 = 0;
  ObjectiveConfig ocfg;
  local_round(client, 0.5, fcfg, ocfg, [&](const ClientState& c, int phase) {
    if (phase == 1) {
      lora_after_phase1 = lora_checksum(c.model);
      pers_after_phase1 = personalized_checksum(c.model);
    } else {
      pers_after_phase2 = personalized_checksum(c.model);
    }
  });
  CHECK(backbone_checksum(client.model) == backbone_before);
  // LoRA untouched by phase 1, personalized untouched by phase 2.
  CHECK(lora_after_phase1 == lora_before);
  CHECK(pers_after_phase2 == pers_after_phase1);
  // And both phases actually trained their own groups.
  CHECK(lora_checksum(client.model) != lora_before);
  CHECK(pers_after_phase1 != 0);
}

TEST_CASE("one optimizer step on a single sample lowers that sample's loss") {
  FederationConfig fcfg;
  fcfg.eta_h = 1e-4;
  fcfg.eta_w = 0.0;
  fcfg.batch_size = 1;
  fcfg.weight_decay = 0.0;
  auto clients = toy_clients(1, fcfg, 1);
  ClientState& client = clients[0];
  ObjectiveConfig ocfg;
  const double before = evaluate_train_loss(client, 0.5, fcfg, ocfg);
  local_round(client, 0.5, fcfg, ocfg);
  const double after = evaluate_train_loss(client, 0.5, fcfg, ocfg);
  CHECK(after < before);
}

TEST_CASE("single-client federation keeps server equal to the client") {
  FederationConfig fcfg;
  fcfg.n_clients = 1;
  fcfg.total_rounds = 3;
  fcfg.batch_size = 4;
  fcfg.eta_h = 1e-3;
  fcfg.eta_w = 1e-3;
  auto clients = toy_clients(1, fcfg);
  ServerState server = init_server(tiny_config(), 7);
  ObjectiveConfig ocfg;
  FederationHooks hooks;
  hooks.after_round = [&](const ServerState& s, const std::vector<ClientState>& cs,
                          std::size_t) {
    CHECK(server_lora_checksum(s) == lora_checksum(cs[0].model));
  };
  auto history = run_federation(fcfg, ocfg, clients, server, hooks);
  CHECK(history.size() == 3);
  CHECK(server.round == 3);
}

TEST_CASE("backbone checksum is constant across a whole federation") {
  FederationConfig fcfg;
  fcfg.n_clients = 3;
  fcfg.total_rounds = 2;
  fcfg.batch_size = 4;
  fcfg.eta_h = 1e-3;
  fcfg.eta_w = 1e-3;
  auto clients = toy_clients(3, fcfg);
  std::vector<std::uint64_t> before;
  for (const auto& c : clients) before.push_back(backbone_checksum(c.model));
  ServerState server = init_server(tiny_config(), 7);
  ObjectiveConfig ocfg;
  run_federation(fcfg, ocfg, clients, server);
  for (std::size_t i = 0; i < clients.size(); ++i)
    CHECK(backbone_checksum(clients[i].model) == before[i]);
}

TEST_CASE("two identical runs produce identical histories") {
  auto run_once = [&]() {
    FederationConfig fcfg;
    fcfg.n_clients = 2;
    fcfg.total_rounds = 2;
    fcfg.batch_size = 4;
    fcfg.eta_h = 1e-3;
    fcfg.eta_w = 5e-4;
    fcfg.seed = 77;
    auto clients = toy_clients(2, fcfg);
    ServerState server = init_server(tiny_config(), 7);
    ObjectiveConfig ocfg;
    auto history = run_federation(fcfg, ocfg, clients, server);
    std::string blob;
    for (const auto& r : history) blob += round_record_to_json_line(r) + "\n";
    return blob;
  };
  CHECK(run_once() == run_once());
}

TEST_CASE("upload record carries only lora tensors") {
  FederationConfig fcfg;
  auto clients = toy_clients(1, fcfg);
  auto upload = make_upload(clients[0]);
  CHECK(upload.tensors.size() == 8);  // 4 targets x (A, B) for one layer
  for (const auto& [name, m] : upload.tensors)
    CHECK(name.rfind("lora.", 0) == 0);

  // No personalized bytes leak into the serialized upload.
  std::string blob;
  for (const auto& [name, m] : upload.tensors) {
    blob += name;
    blob.append(reinterpret_cast<const char*>(m.data()), m.size() * sizeof(double));
  }
  auto contains_value = [&](double v) {
    std::string pat(reinterpret_cast<const char*>(&v), sizeof(double));
    return blob.find(pat) != std::string::npos;
  };
  const ClientModel& m = clients[0].model;
  CHECK_FALSE(contains_value(m.lm_head.w.at(0, 0)));
  CHECK_FALSE(contains_value(m.reward_head.w1.at(0, 0)));
  CHECK_FALSE(contains_value(m.bottleneck.w_enc.at(0, 0)));
  CHECK_FALSE(contains_value(m.backbone.tok_emb.at(0, 0)));
}

TEST_CASE("partial participation keeps a deterministic subset per round") {
  FederationConfig fcfg;
  fcfg.n_clients = 4;
  fcfg.total_rounds = 2;
  fcfg.batch_size = 4;
  fcfg.participation_ratio = 0.5;
  fcfg.seed = 5;
  auto clients = toy_clients(4, fcfg);
  ServerState server = init_server(tiny_config(), 7);
  ObjectiveConfig ocfg;
  auto h1 = run_federation(fcfg, ocfg, clients, server);
  CHECK(h1.size() == 4);  // 2 participants x 2 rounds
  for (const auto& r : h1) CHECK(r.client_id < 4);

  auto clients2 = toy_clients(4, fcfg);
  ServerState server2 = init_server(tiny_config(), 7);
  auto h2 = run_federation(fcfg, ocfg, clients2, server2);
  REQUIRE(h1.size() == h2.size());
  for (std::size_t i = 0; i < h1.size(); ++i)
    CHECK(h1[i].client_id == h2[i].client_id);
}

TEST_CASE("federation config validation") {
  FederationConfig bad;
  bad.total_rounds = 0;
  CHECK_THROWS_AS(validate_federation_config(bad), ConfigError);
  bad = FederationConfig{};
  bad.participation_ratio = 0.0;
  CHECK_THROWS_AS(validate_federation_config(bad), ConfigError);
  bad = FederationConfig{};
  bad.batch_size = 0;
  CHECK_THROWS_AS(validate_federation_config(bad), ConfigError);
}
