#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "snlp/model.hpp"
#include "snlp/solver.hpp"

namespace snlp {

// eval section: the token stream every evaluation mode reads from.
struct EvalConfig {
  int seq_len = 32;
  int n_eval_tokens = 128;
  std::uint64_t data_seed = 0;
  std::string source = "markov";  // "uniform" | "markov"
};

struct SsdSection {
  int block_size = 4;
  int max_tokens = 16;
  int n_prompts = 4;
  int prefill = 8;
};

struct JdSection {
  int window = 5;
  int max_tokens = 16;
  int n_prompts = 4;
  int prefill = 8;
};

struct AblationSection {
  std::uint64_t ordering_seed = 0;
  std::string ordering_mode;  // "", "forward", "reversed", "shuffle"; "" = all
  bool early_exit = true;     // explicit false disables the early-exit mode
  bool propagation = true;    // explicit false disables the propagation mode
  int n_shuffles = 3;
};

// Full experiment description parsed from a strict-JSON config file.
// Unknown keys anywhere are hard errors.
struct ExperimentConfig {
  ModelConfig model;
  std::uint64_t model_seed = 1;
  float branch_gain = 0.1f;
  SnlpConfig snlp;
  EvalConfig eval;
  SsdSection ssd;
  JdSection jd;
  AblationSection ablation;
  std::string config_hash;  // hex FNV-1a of the raw config text

  static ExperimentConfig from_json_text(const std::string& text);
  static ExperimentConfig load(const std::string& path);
};

// One metrics row: column name -> printed value. Columns absent from the
// map render as empty CSV cells.
struct MetricsRow {
  std::map<std::string, std::string> values;

  void set(const std::string& key, const std::string& value);
  void set(const std::string& key, double value);         // %.9g; nan/inf literal
  void set_int(const std::string& key, long long value);  // %lld
  void set_bool(const std::string& key, bool value);      // true/false
};

// The locked CSV column order; a golden-header test pins it.
const std::vector<std::string>& csv_columns();

std::string format_double(double value);

// Appends rows to path, writing the header first when the file is missing
// or empty. Values must not contain commas or newlines.
void append_rows(const std::string& path, const std::vector<MetricsRow>& rows);

// Throws when the config's model section disagrees with the checkpoint.
void require_model_match(const ExperimentConfig& cfg, const ModelWeights& w);

// The eval token stream split into seq_len-sized sequences.
std::vector<std::vector<int>> eval_sequences(const ExperimentConfig& cfg);

std::vector<MetricsRow> run_ppl(const ExperimentConfig& cfg, const ModelWeights& w);
std::vector<MetricsRow> run_ablate(const ExperimentConfig& cfg, const ModelWeights& w,
                                   const std::string& mode);
std::vector<MetricsRow> run_ssd(const ExperimentConfig& cfg, const ModelWeights& w);
std::vector<MetricsRow> run_jd(const ExperimentConfig& cfg, const ModelWeights& w);

}  // namespace snlp
