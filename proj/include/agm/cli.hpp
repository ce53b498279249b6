// Operator surface behind the `agm` executable: corpus generation, grid
// training with per-cell run directories, summary tables, attribution
// heatmaps and the ADS study.

#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "agm/attribution.hpp"
#include "agm/config.hpp"
#include "agm/data.hpp"
#include "agm/evaluation.hpp"
#include "agm/model.hpp"

namespace agm::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitNumeric = 2;
inline constexpr int kExitMissing = 3;

// Relative paths resolve against this variable when it is set.
inline constexpr const char* kWorkspaceEnv = "AGM_WORKSPACE";

std::filesystem::path workspace_root();
std::filesystem::path resolve(const std::filesystem::path& p);

// Writes to a sibling temporary file, then renames over `path`.
void write_atomic(const std::filesystem::path& path, const std::string& content);
std::string read_file(const std::filesystem::path& path);

enum class Protocol { leave_one_out, single_source };
std::string to_string(Protocol p);
Protocol protocol_from_string(const std::string& s);

struct RunConfig {
  std::vector<Method> methods{Method::erm};
  Protocol protocol = Protocol::leave_one_out;
  // Folds to run: targets (leave-one-out) or sources (single-source). Empty
  // means every domain.
  std::vector<std::string> folds;
  std::vector<std::uint64_t> seeds = kDefaultSeeds;
  std::string data_dir = "data";
  std::string output_dir = "runs";
  // "desk" or "full". Under "full", non-AGM methods train with batch 32 and
  // no accumulation; AGM keeps the preset's effective batch of 16.
  std::string preset = "desk";
  TrainConfig train;
};

void to_json(nlohmann::json& j, const RunConfig& c);
// "preset": "full" starts from the full-scale preset instead of the desk
// defaults; "train" keys then override it. Unknown keys raise ConfigError.
void from_json(const nlohmann::json& j, RunConfig& c);

// Applies "a.b.c=value" overrides to a JSON document. The value is parsed as
// JSON when possible, else kept as a string.
void apply_override(nlohmann::json& doc, const std::string& assignment);

struct SuiteOptions {
  std::uint64_t seed = 7;
  double rho = 0.9;
  int divisor = 10;
  int vocab_capacity = 1000;
  int max_seq_len = 64;
};

struct Corpus {
  Tokenizer tokenizer;
  std::vector<Domain> domains;
  nlohmann::json manifest;
};

// Writes <dir>/vocab.txt, <dir>/manifest.json and
// <dir>/<domain>/{train,validation,test,ads}.jsonl.
void write_corpus(const std::filesystem::path& dir, const SyntheticSuite& suite,
                  const nlohmann::json& provenance);
Corpus load_corpus(const std::filesystem::path& dir);

// Run directory of one (method, fold, seed) cell.
std::filesystem::path cell_dir(const std::filesystem::path& output, Method method,
                               Protocol protocol, const std::string& fold,
                               std::uint64_t seed);

// Resolved-config snapshot stored in every run directory.
nlohmann::json cell_snapshot(const RunConfig& config, Method method,
                             const std::string& fold, std::uint64_t seed,
                             const Corpus& corpus);

// Trains the cell described by `snapshot` and writes config.json, model.bin,
// log.jsonl, flags.json (final-epoch detection counts per token) and the cell
// result file(s) into `dir`. Refuses an existing cell
// unless `overwrite`. Returns the cell results.
std::vector<CellResult> run_snapshot(const nlohmann::json& snapshot,
                                     const std::filesystem::path& dir, bool overwrite);

struct SummaryRow {
  std::string method;
  std::string target;
  double source_f1 = 0.0;
  double target_f1 = 0.0;
  double delta = 0.0;
  double te = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
};

struct Aggregate {
  TransferReport report;
  SummaryRow row;  // means over seeds plus the delta CI
  double source_sd = 0.0, target_sd = 0.0, delta_sd = 0.0, te_sd = 0.0;
};

// Every cell*.json below `runs`. SchemaError when their config snapshots
// disagree outside method/fold/seed; the message lists the differing fields.
std::vector<CellResult> collect_cells(const std::filesystem::path& runs);
std::vector<Aggregate> aggregate(const std::vector<CellResult>& cells);

std::string summary_csv(const std::vector<Aggregate>& rows);
std::vector<SummaryRow> parse_summary_csv(const std::string& text);
// Targets as rows, methods as columns, mean +- std of delta; the smallest
// mean delta per row in bold. `methods` restricts and orders the columns.
std::string gap_table_markdown(const std::vector<Aggregate>& rows,
                               const std::vector<std::string>& methods = {});
std::string f1_table_markdown(const std::vector<Aggregate>& rows);

struct HeatmapColumn {
  std::string label;
  std::vector<std::string> tokens;
  std::vector<double> scores;
  std::vector<std::uint8_t> flagged;
  int prediction = 0;
};

struct HeatmapRow {
  std::string id;
  int label = 0;
  std::vector<HeatmapColumn> columns;
};

HeatmapColumn heatmap_column(const Model& model, const Tokenizer& tokenizer,
                             const Example& example, const std::string& label,
                             double tau_high = 0.75);
std::string heatmap_html(const std::vector<HeatmapRow>& rows);
std::string heatmap_ansi(const std::vector<HeatmapRow>& rows);

// Entry point of the executable. Never throws; maps errors to exit codes.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace agm::cli
