#include "fedpdpo/data.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "fedpdpo/rng.hpp"

namespace fedpdpo {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Vocabulary

Vocabulary Vocabulary::from_words(const std::vector<std::string>& words) {
  Vocabulary v;
  v.words_ = words;
  int next_id = 0;
  for (const auto& w : words) {
    if (w.empty()) throw ConfigError("vocabulary word must be non-empty");
    for (char c : w)
      if (std::isspace(static_cast<unsigned char>(c)))
        throw ConfigError("vocabulary word contains whitespace: '" + w + "'");
    if (!v.token_to_id_.emplace(w, next_id).second)
      throw ConfigError("duplicate vocabulary word: '" + w + "'");
    v.id_to_token_.push_back(w);
    ++next_id;
  }
  v.pad_id_ = next_id++;
  v.bos_id_ = next_id++;
  v.eos_id_ = next_id++;
  v.unk_id_ = next_id++;
  v.id_to_token_.push_back("<pad>");
  v.id_to_token_.push_back("<bos>");
  v.id_to_token_.push_back("<eos>");
  v.id_to_token_.push_back("<unk>");
  return v;
}

std::vector<int> Vocabulary::tokenize(const std::string& text) const {
  std::vector<int> out;
  std::istringstream ss(text);
  std::string unit;
  while (ss >> unit) {
    auto it = token_to_id_.find(unit);
    if (it != token_to_id_.end()) {
      out.push_back(it->second);
      continue;
    }
    // Character fallback for out-of-vocabulary units.
    for (char c : unit) {
      auto cit = token_to_id_.find(std::string(1, c));
      out.push_back(cit != token_to_id_.end() ? cit->second : unk_id_);
    }
  }
  return out;
}

std::string Vocabulary::detokenize(const std::vector<int>& tokens) const {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const int id = tokens[i];
    if (id < 0 || id >= size())
      throw InputError("detokenize: token id out of range: " + std::to_string(id));
    if (i > 0) out += ' ';
    out += id_to_token_[static_cast<std::size_t>(id)];
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSONL

namespace {

PreferenceTriple triple_from_json(const json& j, int line_no) {
  const auto where = " at line " + std::to_string(line_no);
  if (!j.is_object()) throw SchemaError("expected a JSON object" + where);
  PreferenceTriple t;
  for (const char* key : {"prompt", "chosen", "rejected"}) {
    if (!j.contains(key))
      throw SchemaError(std::string("missing required key \"") + key + "\"" + where);
    if (!j.at(key).is_string())
      throw SchemaError(std::string("key \"") + key + "\" must be a string" + where);
  }
  t.prompt = j.at("prompt").get<std::string>();
  t.chosen = j.at("chosen").get<std::string>();
  t.rejected = j.at("rejected").get<std::string>();
  if (t.chosen == t.rejected)
    throw SchemaError("chosen and rejected responses are identical" + where);
  const bool has_rc = j.contains("reward_chosen");
  const bool has_rr = j.contains("reward_rejected");
  if (has_rc != has_rr)
    throw SchemaError("reward_chosen and reward_rejected must appear together" + where);
  if (has_rc) {
    if (!j.at("reward_chosen").is_number() || !j.at("reward_rejected").is_number())
      throw SchemaError("reward annotations must be numbers" + where);
    t.reward_chosen = j.at("reward_chosen").get<double>();
    t.reward_rejected = j.at("reward_rejected").get<double>();
  }
  if (j.contains("domain_tag")) {
    if (!j.at("domain_tag").is_string())
      throw SchemaError("domain_tag must be a string" + where);
    t.domain_tag = j.at("domain_tag").get<std::string>();
  }
  return t;
}

json triple_to_json(const PreferenceTriple& t) {
  json j;
  j["prompt"] = t.prompt;
  j["chosen"] = t.chosen;
  j["rejected"] = t.rejected;
  if (t.reward_chosen) j["reward_chosen"] = *t.reward_chosen;
  if (t.reward_rejected) j["reward_rejected"] = *t.reward_rejected;
  if (t.domain_tag) j["domain_tag"] = *t.domain_tag;
  return j;
}

}  // namespace

std::vector<PreferenceTriple> load_preference_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in.is_open()) throw IoError("cannot open " + path);
  std::vector<PreferenceTriple> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError("malformed JSON at line " + std::to_string(line_no) + ": " +
                       e.what());
    }
    out.push_back(triple_from_json(j, line_no));
  }
  return out;
}

std::string triple_to_json_line(const PreferenceTriple& t) {
  return triple_to_json(t).dump();
}

void save_preference_jsonl(const std::string& path,
                           const std::vector<PreferenceTriple>& triples) {
  std::ofstream out(path);
  if (!out.is_open()) throw IoError("cannot open " + path + " for writing");
  for (const auto& t : triples) out << triple_to_json_line(t) << '\n';
  if (!out.good()) throw IoError("failed writing " + path);
}

// ---------------------------------------------------------------------------
// Synthetic corpus

namespace {

void validate_spec(const SyntheticSpec& spec) {
  const int vocab = spec.n_prompt_words + spec.n_pos_words + spec.n_neg_words;
  if (vocab < 4) throw ConfigError("synthetic spec: vocabulary smaller than 4 words");
  if (spec.n_prompt_words < 1 || spec.n_pos_words < 1 || spec.n_neg_words < 1)
    throw ConfigError("synthetic spec: every word pool needs at least one entry");
  if (spec.prompt_len < 1 || spec.response_len < 1)
    throw ConfigError("synthetic spec: prompt_len and response_len must be >= 1");
  if (spec.n_samples < 0) throw ConfigError("synthetic spec: negative n_samples");
  if (spec.margin_lo > spec.margin_hi)
    throw ConfigError("synthetic spec: margin_lo > margin_hi");
  for (double p : {spec.purity_lo, spec.purity_hi})
    if (p < 0.0 || p > 1.0) throw ConfigError("synthetic spec: purity outside [0, 1]");
  if (spec.flip_fraction < 0.0 || spec.flip_fraction > 1.0)
    throw ConfigError("synthetic spec: flip_fraction outside [0, 1]");
}

std::vector<std::string> pool(const char* stem, int n) {
  std::vector<std::string> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) out.push_back(stem + std::to_string(i));
  return out;
}

std::string draw_response(SeededRng& rng, const std::vector<std::string>& favored,
                          const std::vector<std::string>& other, int len,
                          double purity) {
  std::string out;
  for (int i = 0; i < len; ++i) {
    const auto& src = rng.next_uniform() < purity ? favored : other;
    const std::size_t idx =
        static_cast<std::size_t>(rng.next_uniform() * static_cast<double>(src.size()));
    if (i > 0) out += ' ';
    out += src[std::min(idx, src.size() - 1)];
  }
  return out;
}

}  // namespace

Vocabulary synthetic_vocabulary(const SyntheticSpec& spec) {
  validate_spec(spec);
  std::vector<std::string> words = pool("q", spec.n_prompt_words);
  const auto pos = pool("pos", spec.n_pos_words);
  const auto neg = pool("neg", spec.n_neg_words);
  words.insert(words.end(), pos.begin(), pos.end());
  words.insert(words.end(), neg.begin(), neg.end());
  return Vocabulary::from_words(words);
}

std::vector<PreferenceTriple> generate_synthetic(const SyntheticSpec& spec,
                                                 std::uint64_t seed) {
  validate_spec(spec);
  const auto prompts = pool("q", spec.n_prompt_words);
  const auto pos = pool("pos", spec.n_pos_words);
  const auto neg = pool("neg", spec.n_neg_words);
  SeededRng rng(seed, 0);
  std::vector<PreferenceTriple> out;
  out.reserve(static_cast<std::size_t>(spec.n_samples));
  for (int i = 0; i < spec.n_samples; ++i) {
    PreferenceTriple t;
    const double margin =
        spec.margin_lo == spec.margin_hi
            ? spec.margin_lo
            : spec.margin_lo + (spec.margin_hi - spec.margin_lo) * rng.next_uniform();
    const bool flip = spec.flip_fraction > 0.0 && margin < spec.flip_below_margin &&
                      rng.next_uniform() < spec.flip_fraction;
    const double span = spec.margin_hi - spec.margin_lo;
    const double frac = span > 0.0 ? (margin - spec.margin_lo) / span : 0.0;
    const double purity =
        flip ? spec.flip_purity
             : spec.purity_lo + (spec.purity_hi - spec.purity_lo) * frac;

    std::string prompt;
    for (int k = 0; k < spec.prompt_len; ++k) {
      const std::size_t idx = static_cast<std::size_t>(
          rng.next_uniform() * static_cast<double>(prompts.size()));
      if (k > 0) prompt += ' ';
      prompt += prompts[std::min(idx, prompts.size() - 1)];
    }
    t.prompt = prompt;
    t.chosen = draw_response(rng, pos, neg, spec.response_len, purity);
    t.rejected = draw_response(rng, neg, pos, spec.response_len, purity);
    for (int attempt = 0; t.rejected == t.chosen && attempt < 100; ++attempt)
      t.rejected = draw_response(rng, neg, pos, spec.response_len, purity);
    if (t.rejected == t.chosen) {
      // Degenerate pools; force a difference on the last token.
      t.rejected += " " + neg[0];
    }
    t.reward_chosen = margin / 2.0;
    t.reward_rejected = -margin / 2.0;
    if (flip) {
      std::swap(t.chosen, t.rejected);
      std::swap(*t.reward_chosen, *t.reward_rejected);
    }
    if (!spec.domain_labels.empty())
      t.domain_tag = spec.domain_labels[static_cast<std::size_t>(i) %
                                        spec.domain_labels.size()];
    out.push_back(std::move(t));
  }
  return out;
}

Vocabulary build_vocabulary(const std::vector<PreferenceTriple>& corpus,
                            std::size_t max_words) {
  if (max_words == 0) throw ConfigError("build_vocabulary: max_words must be >= 1");
  std::map<std::string, std::size_t> counts;
  std::set<std::string> chars;
  for (const auto& t : corpus) {
    for (const auto* text : {&t.prompt, &t.chosen, &t.rejected}) {
      std::istringstream ss(*text);
      std::string unit;
      while (ss >> unit) {
        ++counts[unit];
        for (char c : unit) chars.insert(std::string(1, c));
      }
    }
  }
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  std::vector<std::string> words;
  std::set<std::string> included;
  for (const auto& [word, n] : ranked) {
    if (words.size() >= max_words) break;
    words.push_back(word);
    included.insert(word);
  }
  for (const auto& c : chars)
    if (!included.count(c)) words.push_back(c);
  return Vocabulary::from_words(words);
}

// ---------------------------------------------------------------------------
// Partitioning

namespace {

void split_train_test(PartitionPlan& plan,
                      const std::vector<std::vector<std::size_t>>& per_client,
                      double train_ratio, std::uint64_t seed) {
  if (train_ratio <= 0.0 || train_ratio > 1.0)
    throw ConfigError("train_test_ratio must be in (0, 1]");
  plan.train_indices.resize(plan.n_clients);
  plan.test_indices.resize(plan.n_clients);
  for (std::size_t c = 0; c < plan.n_clients; ++c) {
    std::vector<std::size_t> idx = per_client[c];
    SeededRng rng(seed, c + 1);
    // Fisher-Yates over the client's samples.
    for (std::size_t i = idx.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(
          rng.next_uniform() * static_cast<double>(i));
      std::swap(idx[i - 1], idx[std::min(j, i - 1)]);
    }
    std::size_t n_train = static_cast<std::size_t>(
        train_ratio * static_cast<double>(idx.size()));
    if (n_train == 0 && !idx.empty()) n_train = 1;
    plan.train_indices[c].assign(idx.begin(), idx.begin() + static_cast<long>(n_train));
    plan.test_indices[c].assign(idx.begin() + static_cast<long>(n_train), idx.end());
    std::sort(plan.train_indices[c].begin(), plan.train_indices[c].end());
    std::sort(plan.test_indices[c].begin(), plan.test_indices[c].end());
  }
}

}  // namespace

PartitionPlan partition_reward_margin(const std::vector<PreferenceTriple>& data,
                                      std::size_t n_clients, double train_ratio,
                                      std::uint64_t seed) {
  if (n_clients == 0) throw ContractError("partition_reward_margin: n_clients == 0");
  if (n_clients > data.size())
    throw ContractError("partition_reward_margin: more clients than samples");
  for (std::size_t i = 0; i < data.size(); ++i)
    if (!data[i].has_rewards())
      throw SchemaError("sample " + std::to_string(i) + " lacks reward annotations");

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return data[a].margin() > data[b].margin();
  });

  PartitionPlan plan;
  plan.strategy = "reward_margin";
  plan.n_clients = n_clients;
  plan.train_test_ratio = train_ratio;
  plan.assignment.assign(data.size(), 0);
  std::vector<std::vector<std::size_t>> per_client(n_clients);
  const std::size_t base = data.size() / n_clients;
  const std::size_t rem = data.size() % n_clients;
  std::size_t cursor = 0;
  for (std::size_t c = 0; c < n_clients; ++c) {
    const std::size_t take = base + (c < rem ? 1 : 0);
    for (std::size_t k = 0; k < take; ++k) {
      const std::size_t sample = order[cursor++];
      plan.assignment[sample] = c;
      per_client[c].push_back(sample);
    }
  }
  split_train_test(plan, per_client, train_ratio, seed);
  return plan;
}

PartitionPlan partition_by_label(const std::vector<PreferenceTriple>& data,
                                 const std::map<std::string, std::size_t>& label_groups,
                                 double train_ratio, std::uint64_t seed) {
  if (label_groups.empty()) throw ConfigError("partition_by_label: empty label mapping");
  std::size_t n_clients = 0;
  for (const auto& [label, client] : label_groups)
    n_clients = std::max(n_clients, client + 1);

  PartitionPlan plan;
  plan.strategy = "by_label";
  plan.n_clients = n_clients;
  plan.train_test_ratio = train_ratio;
  plan.assignment.assign(data.size(), 0);
  std::vector<std::vector<std::size_t>> per_client(n_clients);
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (!data[i].domain_tag)
      throw SchemaError("sample " + std::to_string(i) + " has no domain_tag");
    auto it = label_groups.find(*data[i].domain_tag);
    if (it == label_groups.end())
      throw SchemaError("label '" + *data[i].domain_tag + "' missing from label mapping");
    plan.assignment[i] = it->second;
    per_client[it->second].push_back(i);
  }
  for (std::size_t c = 0; c < n_clients; ++c)
    if (per_client[c].empty())
      throw SchemaError("client " + std::to_string(c) + " receives no samples");
  split_train_test(plan, per_client, train_ratio, seed);
  return plan;
}

CrossDomainResult assign_cross_domain(
    const std::vector<std::pair<std::string, std::vector<PreferenceTriple>>>& datasets,
    double train_ratio, std::uint64_t seed) {
  if (datasets.size() < 2)
    throw ConfigError("assign_cross_domain: need at least two datasets");
  for (std::size_t i = 0; i < datasets.size(); ++i)
    for (std::size_t j = i + 1; j < datasets.size(); ++j)
      if (datasets[i].first == datasets[j].first)
        throw ConfigError("assign_cross_domain: duplicate dataset name '" +
                          datasets[i].first + "'");

  CrossDomainResult result;
  result.plan.strategy = "cross_domain";
  result.plan.n_clients = datasets.size();
  result.plan.train_test_ratio = train_ratio;
  std::vector<std::vector<std::size_t>> per_client(datasets.size());
  for (std::size_t c = 0; c < datasets.size(); ++c) {
    if (datasets[c].second.empty())
      throw ConfigError("assign_cross_domain: dataset '" + datasets[c].first +
                        "' is empty");
    for (const auto& t : datasets[c].second) {
      PreferenceTriple tagged = t;
      tagged.domain_tag = datasets[c].first;
      per_client[c].push_back(result.data.size());
      result.plan.assignment.push_back(c);
      result.data.push_back(std::move(tagged));
    }
  }
  split_train_test(result.plan, per_client, train_ratio, seed);
  return result;
}

std::string plan_to_json_string(const PartitionPlan& plan) {
  json j;
  j["strategy"] = plan.strategy;
  j["n_clients"] = plan.n_clients;
  j["train_test_ratio"] = plan.train_test_ratio;
  j["assignment"] = plan.assignment;
  json clients = json::array();
  for (std::size_t c = 0; c < plan.n_clients; ++c) {
    json jc;
    jc["id"] = c;
    jc["train"] = plan.train_indices[c];
    jc["test"] = plan.test_indices[c];
    clients.push_back(jc);
  }
  j["clients"] = clients;
  return j.dump(2);
}

}  // namespace fedpdpo
