#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "fedpdpo/data.hpp"
#include "fedpdpo/federation.hpp"
#include "fedpdpo/model.hpp"
#include "fedpdpo/objectives.hpp"

namespace fedpdpo {

// ---------------------------------------------------------------------------
// Configuration

struct DataSourceConfig {
  std::string type = "synthetic";  // synthetic | jsonl | cross_domain
  SyntheticSpec synthetic;
  std::string jsonl_path;
  std::vector<std::pair<std::string, std::string>> datasets;  // cross_domain
  std::size_t max_vocab_words = 2000;                         // jsonl sources
};

struct PartitionConfig {
  std::string strategy = "reward_margin";  // reward_margin | by_label | cross_domain
  std::size_t n_clients = 3;
  double train_test_ratio = 0.9;
  std::map<std::string, std::size_t> label_groups;
};

enum class Ablation { kFull, kNoBottleneck, kNoRewardHead };

const char* ablation_name(Ablation a);
Ablation ablation_from_name(const std::string& name);

struct ExperimentConfig {
  FederationConfig federation;
  ModelConfig model;
  ObjectiveConfig objective;
  DataSourceConfig data;
  PartitionConfig partition;
  Ablation ablation = Ablation::kFull;
  std::string output_dir;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  bool save_checkpoints = false;
};

ExperimentConfig parse_experiment_config(const std::string& json_text);
ExperimentConfig load_experiment_config(const std::string& path);
std::string serialize_experiment_config(const ExperimentConfig& cfg);
void validate_experiment_config(const ExperimentConfig& cfg);

// Resolves a path against FEDPDPO_OUTPUT_ROOT when it is set and the path
// is relative.
std::string resolve_output_path(const std::string& path);

// ---------------------------------------------------------------------------
// Metrics

// Append-only JSONL writer with explicit flush points. The file is created
// on construction so an empty run still leaves a valid (empty) file.
class MetricsSink {
 public:
  explicit MetricsSink(const std::string& path);
  MetricsSink(const MetricsSink&) = delete;
  ~MetricsSink();

  void append(const RoundRecord& record);
  void flush();
  const std::string& path() const { return path_; }
  std::size_t records_written() const { return records_written_; }

 private:
  std::string path_;
  std::ofstream out_;
  std::vector<std::string> buffer_;
  std::size_t records_written_ = 0;
};

void emit_round_metrics(MetricsSink& sink, const RoundRecord& record);

// ---------------------------------------------------------------------------
// Evaluation

// Fraction of triples whose chosen response gets strictly higher sequence
// log-likelihood; ties count as incorrect.
double preference_accuracy(const ClientModel& model, const Vocabulary& vocab,
                           const std::vector<PreferenceTriple>& test);

// ---------------------------------------------------------------------------
// Experiment orchestration

struct BuiltDataset {
  std::vector<PreferenceTriple> corpus;
  Vocabulary vocab;
  PartitionPlan plan;
};

// Materializes the corpus, vocabulary and partition for one seed. Ablation
// choices never affect this stage, so every variant sees identical data.
BuiltDataset build_dataset(const ExperimentConfig& cfg, std::uint64_t seed);

struct SeedResult {
  std::uint64_t seed = 0;
  std::vector<RoundRecord> history;
  std::vector<double> first_round_accuracy;  // per client
  std::vector<double> final_round_accuracy;  // per client
  double mean_first_accuracy = 0.0;
  double mean_final_accuracy = 0.0;
  std::string metrics_path;  // empty when no output dir configured
};

struct ExperimentSummary {
  std::vector<SeedResult> per_seed;
  double mean_accuracy = 0.0;  // over seeds, of the per-seed client means
  double std_accuracy = 0.0;   // population std over seeds
};

ExperimentSummary run_experiment(const ExperimentConfig& cfg);
std::string summary_to_json(const ExperimentSummary& summary);

struct AblationRow {
  std::string name;
  double mean_accuracy = 0.0;
  double std_accuracy = 0.0;
  std::vector<double> per_seed;
};

struct AblationResult {
  AblationRow no_bottleneck;  // A1
  AblationRow no_reward_head; // A2
  AblationRow full;           // A3
};

// Runs the three variants on identical data, partitions and seeds.
AblationResult run_ablation(const ExperimentConfig& base);
std::string ablation_to_json(const AblationResult& result);

// ---------------------------------------------------------------------------
// Gradient check entry point (also used by the CLI)

struct GradCheckReport {
  std::string group;
  double max_rel_err = 0.0;
  bool pass = false;
};

// Builds a fixed tiny model (one layer, the given hidden size, vocab 16,
// dropout off) and compares analytic PDPO gradients per trainable group
// against central finite differences through the public sequence ops.
std::vector<GradCheckReport> pdpo_gradient_check(int hidden_dim, double h, double tol);

}  // namespace fedpdpo
