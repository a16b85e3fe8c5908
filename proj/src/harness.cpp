#include "fedpdpo/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <numeric>
#include <sstream>

#include <json.hpp>

namespace fedpdpo {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration

const char* ablation_name(Ablation a) {
  switch (a) {
    case Ablation::kNoBottleneck: return "no_bottleneck";
    case Ablation::kNoRewardHead: return "no_reward_head";
    default: return "full";
  }
}

Ablation ablation_from_name(const std::string& name) {
  if (name == "full") return Ablation::kFull;
  if (name == "no_bottleneck") return Ablation::kNoBottleneck;
  if (name == "no_reward_head") return Ablation::kNoRewardHead;
  throw ConfigError("unknown ablation '" + name + "'");
}

namespace {

json model_to_json(const ModelConfig& m) {
  json j;
  j["vocab_size"] = m.backbone.vocab_size;
  j["hidden_dim"] = m.backbone.hidden_dim;
  j["n_layers"] = m.backbone.n_layers;
  j["n_heads"] = m.backbone.n_heads;
  j["max_seq_len"] = m.backbone.max_seq_len;
  j["lora_rank"] = m.lora_rank;
  j["lora_alpha"] = m.lora_alpha;
  j["bottleneck_dim"] = m.bottleneck_dim;
  j["bottleneck_dropout"] = m.bottleneck_dropout;
  j["reward_hidden_dim"] = m.reward_hidden_dim;
  j["reward_dropout"] = m.reward_dropout;
  j["pool_include_prompt"] = m.pool_include_prompt;
  return j;
}

ModelConfig model_from_json(const json& j) {
  ModelConfig m;
  m.backbone.vocab_size = j.value("vocab_size", m.backbone.vocab_size);
  m.backbone.hidden_dim = j.value("hidden_dim", m.backbone.hidden_dim);
  m.backbone.n_layers = j.value("n_layers", m.backbone.n_layers);
  m.backbone.n_heads = j.value("n_heads", m.backbone.n_heads);
  m.backbone.max_seq_len = j.value("max_seq_len", m.backbone.max_seq_len);
  m.lora_rank = j.value("lora_rank", m.lora_rank);
  m.lora_alpha = j.value("lora_alpha", m.lora_alpha);
  m.bottleneck_dim = j.value("bottleneck_dim", m.bottleneck_dim);
  m.bottleneck_dropout = j.value("bottleneck_dropout", m.bottleneck_dropout);
  m.reward_hidden_dim = j.value("reward_hidden_dim", m.reward_hidden_dim);
  m.reward_dropout = j.value("reward_dropout", m.reward_dropout);
  m.pool_include_prompt = j.value("pool_include_prompt", m.pool_include_prompt);
  return m;
}

json federation_to_json(const FederationConfig& f) {
  json j;
  j["n_clients"] = f.n_clients;
  j["total_rounds"] = f.total_rounds;
  j["eta_h"] = f.eta_h;
  j["eta_w"] = f.eta_w;
  j["local_epochs_personalized"] = f.local_epochs_personalized;
  j["local_epochs_lora"] = f.local_epochs_lora;
  j["batch_size"] = f.batch_size;
  j["participation_ratio"] = f.participation_ratio;
  j["deterministic_mode"] = f.deterministic_mode;
  j["weight_decay"] = f.weight_decay;
  j["clip_norm"] = f.clip_norm;
  j["lr_min"] = f.lr_min;
  j["lr_decay_factor"] = f.lr_decay_factor;
  return j;
}

FederationConfig federation_from_json(const json& j) {
  FederationConfig f;
  f.n_clients = j.value("n_clients", f.n_clients);
  f.total_rounds = j.value("total_rounds", f.total_rounds);
  f.eta_h = j.value("eta_h", f.eta_h);
  f.eta_w = j.value("eta_w", f.eta_w);
  f.local_epochs_personalized =
      j.value("local_epochs_personalized", f.local_epochs_personalized);
  f.local_epochs_lora = j.value("local_epochs_lora", f.local_epochs_lora);
  f.batch_size = j.value("batch_size", f.batch_size);
  f.participation_ratio = j.value("participation_ratio", f.participation_ratio);
  f.deterministic_mode = j.value("deterministic_mode", f.deterministic_mode);
  f.weight_decay = j.value("weight_decay", f.weight_decay);
  f.clip_norm = j.value("clip_norm", f.clip_norm);
  f.lr_min = j.value("lr_min", f.lr_min);
  f.lr_decay_factor = j.value("lr_decay_factor", f.lr_decay_factor);
  return f;
}

json objective_to_json(const ObjectiveConfig& o) {
  json j;
  j["beta"] = o.beta;
  j["w_r_start"] = o.w_r_start;
  j["w_r_end"] = o.w_r_end;
  j["exclusion_k"] = o.exclusion_k;
  j["exclusion_max_ratio"] = o.exclusion_max_ratio;
  j["exclusion_enabled"] = o.exclusion_enabled;
  j["reward_head_enabled"] = o.reward_head_enabled;
  j["ema_momentum"] = o.ema_momentum;
  j["scaler_eps"] = o.scaler_eps;
  return j;
}

ObjectiveConfig objective_from_json(const json& j) {
  ObjectiveConfig o;
  o.beta = j.value("beta", o.beta);
  o.w_r_start = j.value("w_r_start", o.w_r_start);
  o.w_r_end = j.value("w_r_end", o.w_r_end);
  o.exclusion_k = j.value("exclusion_k", o.exclusion_k);
  o.exclusion_max_ratio = j.value("exclusion_max_ratio", o.exclusion_max_ratio);
  o.exclusion_enabled = j.value("exclusion_enabled", o.exclusion_enabled);
  o.reward_head_enabled = j.value("reward_head_enabled", o.reward_head_enabled);
  o.ema_momentum = j.value("ema_momentum", o.ema_momentum);
  o.scaler_eps = j.value("scaler_eps", o.scaler_eps);
  return o;
}

json synthetic_to_json(const SyntheticSpec& s) {
  json j;
  j["n_samples"] = s.n_samples;
  j["n_prompt_words"] = s.n_prompt_words;
  j["n_pos_words"] = s.n_pos_words;
  j["n_neg_words"] = s.n_neg_words;
  j["prompt_len"] = s.prompt_len;
  j["response_len"] = s.response_len;
  j["margin_lo"] = s.margin_lo;
  j["margin_hi"] = s.margin_hi;
  j["purity_lo"] = s.purity_lo;
  j["purity_hi"] = s.purity_hi;
  j["flip_fraction"] = s.flip_fraction;
  j["flip_below_margin"] = s.flip_below_margin;
  j["flip_purity"] = s.flip_purity;
  j["domain_labels"] = s.domain_labels;
  return j;
}

SyntheticSpec synthetic_from_json(const json& j) {
  SyntheticSpec s;
  s.n_samples = j.value("n_samples", s.n_samples);
  s.n_prompt_words = j.value("n_prompt_words", s.n_prompt_words);
  s.n_pos_words = j.value("n_pos_words", s.n_pos_words);
  s.n_neg_words = j.value("n_neg_words", s.n_neg_words);
  s.prompt_len = j.value("prompt_len", s.prompt_len);
  s.response_len = j.value("response_len", s.response_len);
  s.margin_lo = j.value("margin_lo", s.margin_lo);
  s.margin_hi = j.value("margin_hi", s.margin_hi);
  s.purity_lo = j.value("purity_lo", s.purity_lo);
  s.purity_hi = j.value("purity_hi", s.purity_hi);
  s.flip_fraction = j.value("flip_fraction", s.flip_fraction);
  s.flip_below_margin = j.value("flip_below_margin", s.flip_below_margin);
  s.flip_purity = j.value("flip_purity", s.flip_purity);
  s.domain_labels = j.value("domain_labels", s.domain_labels);
  return s;
}

}  // namespace

ExperimentConfig parse_experiment_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("config: ") + e.what());
  }
  ExperimentConfig cfg;
  if (j.contains("federation")) cfg.federation = federation_from_json(j.at("federation"));
  if (j.contains("model")) cfg.model = model_from_json(j.at("model"));
  if (j.contains("objective")) cfg.objective = objective_from_json(j.at("objective"));
  if (j.contains("data")) {
    const json& d = j.at("data");
    cfg.data.type = d.value("type", cfg.data.type);
    if (d.contains("synthetic")) cfg.data.synthetic = synthetic_from_json(d.at("synthetic"));
    cfg.data.jsonl_path = d.value("jsonl_path", cfg.data.jsonl_path);
    cfg.data.max_vocab_words = d.value("max_vocab_words", cfg.data.max_vocab_words);
    if (d.contains("datasets")) {
      cfg.data.datasets.clear();
      for (const auto& entry : d.at("datasets"))
        cfg.data.datasets.emplace_back(entry.at("name").get<std::string>(),
                                       entry.at("path").get<std::string>());
    }
  }
  if (j.contains("partition")) {
    const json& p = j.at("partition");
    cfg.partition.strategy = p.value("strategy", cfg.partition.strategy);
    cfg.partition.n_clients = p.value("n_clients", cfg.partition.n_clients);
    cfg.partition.train_test_ratio =
        p.value("train_test_ratio", cfg.partition.train_test_ratio);
    if (p.contains("label_groups")) {
      cfg.partition.label_groups.clear();
      for (const auto& [label, client] : p.at("label_groups").items())
        cfg.partition.label_groups[label] = client.get<std::size_t>();
    }
  }
  cfg.ablation = ablation_from_name(j.value("ablation", "full"));
  cfg.output_dir = j.value("output_dir", cfg.output_dir);
  if (j.contains("seeds")) cfg.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  cfg.save_checkpoints = j.value("save_checkpoints", cfg.save_checkpoints);
  return cfg;
}

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in.is_open()) throw IoError("cannot open config " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_experiment_config(ss.str());
}

std::string serialize_experiment_config(const ExperimentConfig& cfg) {
  json j;
  j["federation"] = federation_to_json(cfg.federation);
  j["model"] = model_to_json(cfg.model);
  j["objective"] = objective_to_json(cfg.objective);
  json d;
  d["type"] = cfg.data.type;
  d["synthetic"] = synthetic_to_json(cfg.data.synthetic);
  d["jsonl_path"] = cfg.data.jsonl_path;
  d["max_vocab_words"] = cfg.data.max_vocab_words;
  json datasets = json::array();
  for (const auto& [name, path] : cfg.data.datasets) {
    json e;
    e["name"] = name;
    e["path"] = path;
    datasets.push_back(e);
  }
  d["datasets"] = datasets;
  j["data"] = d;
  json p;
  p["strategy"] = cfg.partition.strategy;
  p["n_clients"] = cfg.partition.n_clients;
  p["train_test_ratio"] = cfg.partition.train_test_ratio;
  json groups = json::object();
  for (const auto& [label, client] : cfg.partition.label_groups)
    groups[label] = client;
  p["label_groups"] = groups;
  j["partition"] = p;
  j["ablation"] = ablation_name(cfg.ablation);
  j["output_dir"] = cfg.output_dir;
  j["seeds"] = cfg.seeds;
  j["save_checkpoints"] = cfg.save_checkpoints;
  return j.dump(2);
}

void validate_experiment_config(const ExperimentConfig& cfg) {
  validate_federation_config(cfg.federation);
  ModelConfig probe = cfg.model;
  probe.backbone.vocab_size = std::max(probe.backbone.vocab_size, 8);
  validate_model_config(probe);
  if (cfg.objective.beta <= 0.0) throw ConfigError("objective: beta must be positive");
  if (cfg.objective.exclusion_max_ratio < 0.0 || cfg.objective.exclusion_max_ratio > 1.0)
    throw ConfigError("objective: exclusion_max_ratio must be in [0, 1]");
  if (cfg.objective.ema_momentum < 0.0 || cfg.objective.ema_momentum >= 1.0)
    throw ConfigError("objective: ema_momentum must be in [0, 1)");
  if (cfg.seeds.empty()) throw ConfigError("seeds must be non-empty");
  if (cfg.data.type != "synthetic" && cfg.data.type != "jsonl" &&
      cfg.data.type != "cross_domain")
    throw ConfigError("data.type must be synthetic, jsonl or cross_domain");
  if (cfg.data.type == "jsonl" && cfg.data.jsonl_path.empty())
    throw ConfigError("data.jsonl_path required for jsonl sources");
  if (cfg.data.type == "cross_domain" && cfg.data.datasets.size() < 2)
    throw ConfigError("cross_domain sources need at least two datasets");
  if (cfg.partition.strategy != "reward_margin" && cfg.partition.strategy != "by_label" &&
      cfg.partition.strategy != "cross_domain")
    throw ConfigError("partition.strategy must be reward_margin, by_label or cross_domain");
  if (cfg.partition.strategy == "by_label" && cfg.partition.label_groups.empty())
    throw ConfigError("by_label partition needs label_groups");
  if ((cfg.partition.strategy == "cross_domain") != (cfg.data.type == "cross_domain"))
    throw ConfigError("cross_domain partition and data source must be used together");
}

std::string resolve_output_path(const std::string& path) {
  if (path.empty()) return path;
  const char* root = std::getenv("FEDPDPO_OUTPUT_ROOT");
  if (root == nullptr || *root == '\0') return path;
  std::filesystem::path p(path);
  if (p.is_absolute()) return path;
  return (std::filesystem::path(root) / p).string();
}

// ---------------------------------------------------------------------------
// Metrics

MetricsSink::MetricsSink(const std::string& path) : path_(path) {
  std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  out_.open(path, std::ios::trunc);
  if (!out_.is_open()) throw IoError("cannot open metrics sink " + path);
  out_.flush();
}

MetricsSink::~MetricsSink() {
  try {
    flush();
  } catch (...) {
    // destructor must not throw
  }
}

void MetricsSink::append(const RoundRecord& record) {
  buffer_.push_back(round_record_to_json_line(record));
}

void MetricsSink::flush() {
  for (const auto& line : buffer_) {
    out_ << line << '\n';
    ++records_written_;
  }
  buffer_.clear();
  out_.flush();
  if (!out_.good()) throw IoError("failed writing metrics to " + path_);
}

void emit_round_metrics(MetricsSink& sink, const RoundRecord& record) {
  sink.append(record);
}

// ---------------------------------------------------------------------------
// Evaluation

double preference_accuracy(const ClientModel& model, const Vocabulary& vocab,
                           const std::vector<PreferenceTriple>& test) {
  if (test.empty()) throw ContractError("preference_accuracy: empty test set");
  std::vector<TokenizedTriple> tokens;
  tokens.reserve(test.size());
  for (const auto& t : test)
    tokens.push_back(tokenize_triple(vocab, t, model.cfg.backbone.max_seq_len));
  return tokenized_preference_accuracy(model, tokens);
}

// ---------------------------------------------------------------------------
// Experiment orchestration

namespace {

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) {
  SeededRng rng(seed, tag);
  return rng.next_u64();
}

constexpr std::uint64_t kDataTag = 1;
constexpr std::uint64_t kPartitionTag = 2;
constexpr std::uint64_t kBackboneTag = 3;
constexpr std::uint64_t kServerTag = 4;
constexpr std::uint64_t kFederationTag = 5;
constexpr std::uint64_t kClientTagBase = 1000;

}  // namespace

BuiltDataset build_dataset(const ExperimentConfig& cfg, std::uint64_t seed) {
  const std::uint64_t data_seed = derive_seed(seed, kDataTag);
  const std::uint64_t partition_seed = derive_seed(seed, kPartitionTag);

  BuiltDataset out;
  if (cfg.data.type == "cross_domain") {
    std::vector<std::pair<std::string, std::vector<PreferenceTriple>>> named;
    for (const auto& [name, path] : cfg.data.datasets)
      named.emplace_back(name, load_preference_jsonl(path));
    auto result =
        assign_cross_domain(named, cfg.partition.train_test_ratio, partition_seed);
    out.corpus = std::move(result.data);
    out.plan = std::move(result.plan);
    out.vocab = build_vocabulary(out.corpus, cfg.data.max_vocab_words);
    return out;
  }

  if (cfg.data.type == "synthetic") {
    out.corpus = generate_synthetic(cfg.data.synthetic, data_seed);
    out.vocab = synthetic_vocabulary(cfg.data.synthetic);
  } else {
    out.corpus = load_preference_jsonl(cfg.data.jsonl_path);
    out.vocab = build_vocabulary(out.corpus, cfg.data.max_vocab_words);
  }

  if (cfg.partition.strategy == "reward_margin") {
    out.plan = partition_reward_margin(out.corpus, cfg.partition.n_clients,
                                       cfg.partition.train_test_ratio, partition_seed);
  } else if (cfg.partition.strategy == "by_label") {
    out.plan = partition_by_label(out.corpus, cfg.partition.label_groups,
                                  cfg.partition.train_test_ratio, partition_seed);
  } else {
    throw ConfigError("partition strategy '" + cfg.partition.strategy +
                      "' needs a cross_domain data source");
  }
  return out;
}

namespace {

void save_round_checkpoints(const std::string& dir, const ServerState& server,
                            const std::vector<ClientState>& clients) {
  std::filesystem::create_directories(dir);
  {
    std::vector<std::pair<std::string, const Matrix*>> tensors;
    for (const auto& [name, m] : server.lora) tensors.emplace_back(name, &m);
    json header;
    header["kind"] = "server_lora";
    header["round"] = server.round;
    save_tensor_file(dir + "/server_lora.bin", header.dump(), tensors);
  }
  for (const auto& client : clients) {
    auto& m = const_cast<ClientModel&>(client.model);
    std::vector<std::pair<std::string, const Matrix*>> tensors;
    for (const auto& p : collect_params(m, false))
      if (p.group != ParamGroup::kLora) tensors.emplace_back(p.name, p.value);
    json header;
    header["kind"] = "personalized";
    header["client_id"] = client.id;
    save_tensor_file(dir + "/client_" + std::to_string(client.id) + "_personalized.bin",
                     header.dump(), tensors);
  }
}

SeedResult run_single_seed(const ExperimentConfig& cfg, const ModelConfig& model_cfg,
                           const ObjectiveConfig& obj_cfg, std::uint64_t seed) {
  BuiltDataset ds = build_dataset(cfg, seed);

  ModelConfig mc = model_cfg;
  mc.backbone.vocab_size = ds.vocab.size();

  FederationConfig fcfg = cfg.federation;
  fcfg.n_clients = ds.plan.n_clients;
  fcfg.seed = derive_seed(seed, kFederationTag);
  validate_federation_config(fcfg);

  const std::uint64_t backbone_seed = derive_seed(seed, kBackboneTag);
  std::vector<ClientState> clients;
  for (std::size_t c = 0; c < ds.plan.n_clients; ++c) {
    std::vector<TokenizedTriple> train;
    std::vector<TokenizedTriple> test;
    for (std::size_t idx : ds.plan.train_indices[c])
      train.push_back(tokenize_triple(ds.vocab, ds.corpus[idx], mc.backbone.max_seq_len));
    for (std::size_t idx : ds.plan.test_indices[c])
      test.push_back(tokenize_triple(ds.vocab, ds.corpus[idx], mc.backbone.max_seq_len));
    if (train.empty())
      throw ConfigError("client " + std::to_string(c) + " has an empty train split");
    if (test.empty())
      throw ConfigError("client " + std::to_string(c) +
                        " has an empty test split; lower train_test_ratio");
    clients.push_back(make_client(c, mc, backbone_seed,
                                  derive_seed(seed, kClientTagBase + c),
                                  std::move(train), std::move(test), fcfg));
  }
  ServerState server = init_server(mc, derive_seed(seed, kServerTag));

  const std::string out_dir = resolve_output_path(cfg.output_dir);
  FederationHooks hooks;
  if (!out_dir.empty() && cfg.save_checkpoints) {
    hooks.after_round = [&, seed](const ServerState& s,
                                  const std::vector<ClientState>& cs,
                                  std::size_t round) {
      save_round_checkpoints(out_dir + "/checkpoints/seed_" + std::to_string(seed) +
                                 "/round_" + std::to_string(round),
                             s, cs);
    };
  }

  SeedResult result;
  result.seed = seed;
  result.history = run_federation(fcfg, obj_cfg, clients, server, hooks);

  if (!out_dir.empty()) {
    MetricsSink sink(out_dir + "/metrics_seed_" + std::to_string(seed) + ".jsonl");
    std::size_t cursor = 0;
    for (std::size_t round = 0; round < fcfg.total_rounds; ++round) {
      while (cursor < result.history.size() && result.history[cursor].round == round) {
        emit_round_metrics(sink, result.history[cursor]);
        ++cursor;
      }
      sink.flush();  // round boundary
    }
    result.metrics_path = sink.path();

    std::filesystem::create_directories(out_dir + "/checkpoints/seed_" +
                                        std::to_string(seed) + "/final");
    for (const auto& client : clients)
      save_model_checkpoint(out_dir + "/checkpoints/seed_" + std::to_string(seed) +
                                "/final/client_" + std::to_string(client.id) +
                                "_model.bin",
                            client.model, ds.vocab);
  }

  const std::size_t last_round = fcfg.total_rounds - 1;
  result.first_round_accuracy.assign(ds.plan.n_clients, 0.0);
  result.final_round_accuracy.assign(ds.plan.n_clients, 0.0);
  std::vector<bool> seen_first(ds.plan.n_clients, false);
  std::vector<bool> seen_last(ds.plan.n_clients, false);
  for (const auto& rec : result.history) {
    if (rec.round == 0) {
      result.first_round_accuracy[rec.client_id] = rec.test_accuracy;
      seen_first[rec.client_id] = true;
    }
    if (rec.round == last_round) {
      result.final_round_accuracy[rec.client_id] = rec.test_accuracy;
      seen_last[rec.client_id] = true;
    }
  }
  double first_sum = 0.0, final_sum = 0.0;
  std::size_t first_n = 0, final_n = 0;
  for (std::size_t c = 0; c < ds.plan.n_clients; ++c) {
    if (seen_first[c]) {
      first_sum += result.first_round_accuracy[c];
      ++first_n;
    }
    if (seen_last[c]) {
      final_sum += result.final_round_accuracy[c];
      ++final_n;
    }
  }
  result.mean_first_accuracy = first_n ? first_sum / static_cast<double>(first_n) : 0.0;
  result.mean_final_accuracy = final_n ? final_sum / static_cast<double>(final_n) : 0.0;
  return result;
}

}  // namespace

ExperimentSummary run_experiment(const ExperimentConfig& cfg) {
  validate_experiment_config(cfg);
  ModelConfig model_cfg = cfg.model;
  ObjectiveConfig obj_cfg = cfg.objective;
  if (cfg.ablation == Ablation::kNoBottleneck) model_cfg.bottleneck_enabled = false;
  if (cfg.ablation == Ablation::kNoRewardHead) obj_cfg.reward_head_enabled = false;

  ExperimentSummary summary;
  for (std::uint64_t seed : cfg.seeds)
    summary.per_seed.push_back(run_single_seed(cfg, model_cfg, obj_cfg, seed));

  double mean = 0.0;
  for (const auto& s : summary.per_seed) mean += s.mean_final_accuracy;
  mean /= static_cast<double>(summary.per_seed.size());
  double var = 0.0;
  for (const auto& s : summary.per_seed)
    var += (s.mean_final_accuracy - mean) * (s.mean_final_accuracy - mean);
  var /= static_cast<double>(summary.per_seed.size());
  summary.mean_accuracy = mean;
  summary.std_accuracy = std::sqrt(var);

  const std::string out_dir = resolve_output_path(cfg.output_dir);
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    std::ofstream cfg_out(out_dir + "/config.json");
    cfg_out << serialize_experiment_config(cfg) << '\n';
    std::ofstream sum_out(out_dir + "/summary.json");
    sum_out << summary_to_json(summary) << '\n';
  }
  return summary;
}

std::string summary_to_json(const ExperimentSummary& summary) {
  json j;
  j["mean_accuracy"] = summary.mean_accuracy;
  j["std_accuracy"] = summary.std_accuracy;
  json seeds = json::array();
  for (const auto& s : summary.per_seed) {
    json e;
    e["seed"] = s.seed;
    e["mean_first_accuracy"] = s.mean_first_accuracy;
    e["mean_final_accuracy"] = s.mean_final_accuracy;
    e["first_round_accuracy"] = s.first_round_accuracy;
    e["final_round_accuracy"] = s.final_round_accuracy;
    e["metrics_path"] = s.metrics_path;
    seeds.push_back(e);
  }
  j["per_seed"] = seeds;
  return j.dump(2);
}

AblationResult run_ablation(const ExperimentConfig& base) {
  validate_experiment_config(base);
  auto run_variant = [&](Ablation a) {
    ExperimentConfig cfg = base;
    cfg.ablation = a;
    if (!base.output_dir.empty())
      cfg.output_dir = base.output_dir + "/" + ablation_name(a);
    ExperimentSummary s = run_experiment(cfg);
    AblationRow row;
    row.name = ablation_name(a);
    row.mean_accuracy = s.mean_accuracy;
    row.std_accuracy = s.std_accuracy;
    for (const auto& per : s.per_seed) row.per_seed.push_back(per.mean_final_accuracy);
    return row;
  };
  AblationResult result;
  result.no_bottleneck = run_variant(Ablation::kNoBottleneck);
  result.no_reward_head = run_variant(Ablation::kNoRewardHead);
  result.full = run_variant(Ablation::kFull);

  const std::string out_dir = resolve_output_path(base.output_dir);
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    std::ofstream out(out_dir + "/ablation.json");
    out << ablation_to_json(result) << '\n';
  }
  return result;
}

std::string ablation_to_json(const AblationResult& result) {
  auto row = [](const AblationRow& r) {
    json j;
    j["name"] = r.name;
    j["mean_accuracy"] = r.mean_accuracy;
    j["std_accuracy"] = r.std_accuracy;
    j["per_seed"] = r.per_seed;
    return j;
  };
  json j;
  j["rows"] = json::array({row(result.no_bottleneck), row(result.no_reward_head),
                           row(result.full)});
  return j.dump(2);
}

// ---------------------------------------------------------------------------
// Gradient check

std::vector<GradCheckReport> pdpo_gradient_check(int hidden_dim, double h, double tol) {
  if (hidden_dim < 2 || hidden_dim % 2 != 0)
    throw ConfigError("pdpo_gradient_check: hidden_dim must be even and >= 2");
  ModelConfig mcfg;
  mcfg.backbone.vocab_size = 16;
  mcfg.backbone.hidden_dim = hidden_dim;
  mcfg.backbone.n_layers = 1;
  mcfg.backbone.n_heads = 2;
  mcfg.backbone.max_seq_len = 16;
  mcfg.lora_rank = 2;
  mcfg.lora_alpha = 4.0;
  mcfg.bottleneck_dim = 4;
  mcfg.reward_hidden_dim = 4;

  ClientModel model = init_client_model(mcfg, 3001, 3002);
  ClientModel base = model;
  SeededRng jitter(3003, 0);
  for (auto& p : collect_params(model, false))
    for (double& v : p.value->storage()) v += 0.05 * jitter.next_gaussian();
  ReferenceSnapshot ref = make_reference_snapshot(base);

  const std::vector<TokenizedTriple> batch{
      {{1, 2}, {3, 4, 5}, {6, 7}},
      {{1, 8}, {9, 10}, {11, 12, 13}},
      {{1, 3}, {14, 2}, {5, 9}},
  };
  std::vector<RefLogprobs> refs;
  for (const auto& t : batch) refs.push_back(reference_logprobs(ref, t));

  ObjectiveConfig cfg;
  cfg.exclusion_enabled = false;
  const double w_r = 0.8;

  AdaptiveScaler scaler;
  PdpoOptions full;
  full.selector = TrainableSelector::all();
  auto res = pdpo_loss_and_grads(model, batch, refs, cfg, scaler, w_r, full);
  const double s0 = res.s;

  auto loss_full = [&]() {
    double acc = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const auto& t = batch[i];
      const double dir = implicit_margin_from_logprobs(
          sequence_logprob(model, t.prompt, t.chosen), refs[i].chosen,
          sequence_logprob(model, t.prompt, t.rejected), refs[i].rejected);
      const double der = explicit_margin(model, t, DropoutCtx{});
      acc += log_sigmoid(cfg.beta * (dir + w_r * s0 * der));
    }
    return -acc / static_cast<double>(batch.size());
  };

  auto max_group_error = [&](ParamGroup group, const GradMap& grads,
                             const std::function<double()>& loss_fn) {
    double worst = 0.0;
    for (auto& p : collect_params(model, false)) {
      if (p.group != group) continue;
      const Matrix* g = grads.find(p.name);
      if (g == nullptr)
        throw ContractError("gradient check: missing gradient for " + p.name);
      Vector theta(p.value->storage());
      auto f = [&](const Vector& t) {
        Matrix saved = *p.value;
        p.value->storage().assign(t.begin(), t.end());
        const double out = loss_fn();
        *p.value = saved;
        return out;
      };
      Vector fd = finite_diff_grad(f, theta, h);
      for (std::size_t i = 0; i < fd.size(); ++i) {
        const double denom =
            std::max({std::abs(g->storage()[i]), std::abs(fd[i]), 1e-6});
        worst = std::max(worst, std::abs(g->storage()[i] - fd[i]) / denom);
      }
    }
    return worst;
  };

  std::vector<GradCheckReport> reports;
  auto add = [&](const std::string& name, double err) {
    reports.push_back({name, err, err < tol});
  };
  add("lm_head", max_group_error(ParamGroup::kLmHead, res.grads, loss_full));
  add("reward_head", max_group_error(ParamGroup::kRewardHead, res.grads, loss_full));
  add("bottleneck", max_group_error(ParamGroup::kBottleneck, res.grads, loss_full));
  add("lora_full_path", max_group_error(ParamGroup::kLora, res.grads, loss_full));

  // LoRA-phase convention: explicit margins frozen at their base values.
  AdaptiveScaler scaler2;
  PdpoOptions detached;
  detached.selector = TrainableSelector::lora_only();
  detached.detach_explicit_margin = true;
  auto res2 = pdpo_loss_and_grads(model, batch, refs, cfg, scaler2, w_r, detached);
  std::vector<double> der0;
  for (const auto& t : batch) der0.push_back(explicit_margin(model, t, DropoutCtx{}));
  auto loss_detached = [&]() {
    double acc = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const auto& t = batch[i];
      const double dir = implicit_margin_from_logprobs(
          sequence_logprob(model, t.prompt, t.chosen), refs[i].chosen,
          sequence_logprob(model, t.prompt, t.rejected), refs[i].rejected);
      acc += log_sigmoid(cfg.beta * (dir + w_r * res2.s * der0[i]));
    }
    return -acc / static_cast<double>(batch.size());
  };
  add("lora_detached", max_group_error(ParamGroup::kLora, res2.grads, loss_detached));
  return reports;
}

}  // namespace fedpdpo
