#pragma once

#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "fedpdpo/errors.hpp"

namespace fedpdpo {

// One (prompt, chosen, rejected) sample, optionally annotated with scalar
// rewards for both responses and a free-form domain label.
struct PreferenceTriple {
  std::string prompt;
  std::string chosen;
  std::string rejected;
  std::optional<double> reward_chosen;
  std::optional<double> reward_rejected;
  std::optional<std::string> domain_tag;

  bool has_rewards() const { return reward_chosen.has_value() && reward_rejected.has_value(); }

  double margin() const {
    if (!has_rewards()) throw SchemaError("triple has no reward annotations");
    return *reward_chosen - *reward_rejected;
  }

  bool operator==(const PreferenceTriple&) const = default;
};

// Whitespace tokenizer with per-character fallback. Corpus words occupy the
// dense id range [0, n_words); the four special ids follow.
class Vocabulary {
 public:
  static Vocabulary from_words(const std::vector<std::string>& words);

  int size() const { return static_cast<int>(id_to_token_.size()); }
  int pad_id() const { return pad_id_; }
  int bos_id() const { return bos_id_; }
  int eos_id() const { return eos_id_; }
  int unk_id() const { return unk_id_; }

  const std::vector<std::string>& words() const { return words_; }

  std::vector<int> tokenize(const std::string& text) const;
  std::string detokenize(const std::vector<int>& tokens) const;

 private:
  std::vector<std::string> words_;
  std::map<std::string, int> token_to_id_;
  std::vector<std::string> id_to_token_;
  int pad_id_ = 0, bos_id_ = 0, eos_id_ = 0, unk_id_ = 0;
};

// JSONL with keys prompt/chosen/rejected and optional
// reward_chosen/reward_rejected/domain_tag, one object per line.
std::vector<PreferenceTriple> load_preference_jsonl(const std::string& path);
void save_preference_jsonl(const std::string& path,
                           const std::vector<PreferenceTriple>& triples);
std::string triple_to_json_line(const PreferenceTriple& t);

// Synthetic preference corpus: prompts from a neutral pool, chosen/rejected
// responses drawn from two style pools. `purity` is the probability that a
// chosen-response token comes from the preferred pool (rejected mirrored);
// it is interpolated between purity_lo and purity_hi along the reward
// margin, so low-margin samples can be made intrinsically ambiguous.
struct SyntheticSpec {
  int n_samples = 0;
  int n_prompt_words = 8;
  int n_pos_words = 12;
  int n_neg_words = 12;
  int prompt_len = 3;
  int response_len = 6;
  double margin_lo = 1.0;
  double margin_hi = 1.0;
  double purity_lo = 0.95;
  double purity_hi = 0.95;
  // Annotation noise: a sample is mislabeled (responses and rewards
  // swapped, so its margin turns negative) with probability flip_fraction,
  // applied only below flip_below_margin. Mislabeled samples are generated
  // at flip_purity regardless of their margin, so annotation errors can
  // carry a strong (inverted) style signal.
  double flip_fraction = 0.0;
  double flip_below_margin = 1e308;  // finite so configs serialize cleanly
  double flip_purity = 0.95;
  std::vector<std::string> domain_labels;  // rotated over samples when set
};

Vocabulary synthetic_vocabulary(const SyntheticSpec& spec);
std::vector<PreferenceTriple> generate_synthetic(const SyntheticSpec& spec,
                                                 std::uint64_t seed);

// Frequency-ranked word vocabulary over a corpus (ties broken
// lexicographically), plus every single character seen, so the
// character-level fallback rarely degrades to <unk>.
Vocabulary build_vocabulary(const std::vector<PreferenceTriple>& corpus,
                            std::size_t max_words);

// Sample-to-client assignment plus per-client train/test index lists.
struct PartitionPlan {
  std::string strategy;
  std::size_t n_clients = 0;
  double train_test_ratio = 0.9;
  std::vector<std::size_t> assignment;                    // sample -> client
  std::vector<std::vector<std::size_t>> train_indices;    // per client, ascending
  std::vector<std::vector<std::size_t>> test_indices;     // per client, ascending
};

std::string plan_to_json_string(const PartitionPlan& plan);

// Sort by reward margin descending (stable) and cut into contiguous
// near-equal shards; client 0 receives the largest margins.
PartitionPlan partition_reward_margin(const std::vector<PreferenceTriple>& data,
                                      std::size_t n_clients, double train_ratio,
                                      std::uint64_t seed);

// Assign each sample to the client owning its domain_tag.
PartitionPlan partition_by_label(const std::vector<PreferenceTriple>& data,
                                 const std::map<std::string, std::size_t>& label_groups,
                                 double train_ratio, std::uint64_t seed);

struct CrossDomainResult {
  std::vector<PreferenceTriple> data;  // datasets concatenated, tags rewritten
  PartitionPlan plan;
};

// Client i receives dataset i wholesale; domain_tag is set to the dataset name.
CrossDomainResult assign_cross_domain(
    const std::vector<std::pair<std::string, std::vector<PreferenceTriple>>>& datasets,
    double train_ratio, std::uint64_t seed);

}  // namespace fedpdpo
