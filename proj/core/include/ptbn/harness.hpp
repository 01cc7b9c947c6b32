#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "ptbn/data.hpp"
#include "ptbn/diagnostics.hpp"
#include "ptbn/methods.hpp"
#include "ptbn/metrics.hpp"
#include "ptbn/model.hpp"
#include "ptbn/shift.hpp"

namespace ptbn {

std::string_view code_version();

struct DatasetConfig {
    enum class Kind { SyntheticTabular, SyntheticImage, Csv };
    Kind kind = Kind::SyntheticTabular;
    TabularSpec tabular;
    ImageSpec image;
    // Csv only.
    std::filesystem::path train_path, val_path, test_path;
    std::size_t num_classes = 0;
    std::optional<Shape> image_shape;
    double val_fraction = 0.1;  // carved from the end of train when val_path is empty
};

struct ShiftGridEntry {
    ShiftKind kind = ShiftKind::Identity;
    std::vector<double> severities;
};

/// A split whose examples each come from one of several corruptions.
struct MixedShiftConfig {
    std::vector<ShiftKind> kinds;
    double severity = 5;
};

struct DiagnoseConfig {
    /// Norm layers ("normK") to histogram; empty means all.
    std::vector<std::string> histogram_layers;
    std::vector<std::size_t> histogram_channels{0, 1};
    std::size_t histogram_bins = 30;
    /// Training rows used as the reference distribution.
    std::size_t reference_size = 2000;
    std::size_t n_keep = kDefaultKeep;
};

struct ExperimentConfig {
    static constexpr int kSchemaVersion = 1;

    std::string name = "experiment";
    DatasetConfig dataset;
    /// input_shape / num_classes are taken from the data unless given.
    ModelSpec model;
    bool model_shape_from_data = true;
    TrainConfig train;
    std::vector<MethodSpec> methods;
    bool include_clean = true;
    std::vector<ShiftGridEntry> shifts;
    std::optional<MixedShiftConfig> mixed;
    std::vector<std::size_t> batch_sizes{500};
    std::vector<std::uint64_t> seeds{1};
    std::uint64_t shift_seed = 7;
    std::vector<double> eps_multipliers{1, 10, 100, 1000};
    DiagnoseConfig diagnose;
    std::filesystem::path output_dir = "runs/experiment";
    std::size_t workers = 1;

    void validate() const;
    /// 16 hex digits over the canonical JSON form, ignoring output_dir and workers.
    std::string hash() const;
    std::string to_json_string() const;
};

ExperimentConfig parse_config(std::string_view json_text);
ExperimentConfig load_config(const std::filesystem::path& path);

/// CLI-level overrides applied on top of a loaded config.
struct Overrides {
    std::optional<std::filesystem::path> output_dir;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> workers;
};
void apply_overrides(ExperimentConfig& cfg, const Overrides& o);

DataSplits load_data(const DatasetConfig& cfg);

/// The config's model spec with shapes filled in from the data.
ModelSpec resolve_model(const ExperimentConfig& cfg, const DataSplits& data);

/// Evaluation splits in grid order: clean, each kind by severity, mixed.
std::vector<Dataset> build_eval_splits(const ExperimentConfig& cfg, const DataSplits& data);

/// A trained model family: architecture and norm after method overrides.
struct ModelFamily {
    Architecture architecture;
    NormKind norm;
    std::string tag() const;
    bool operator==(const ModelFamily&) const = default;
};

ModelFamily family_of(const ExperimentConfig& cfg, const MethodSpec& m);
std::vector<ModelFamily> families(const ExperimentConfig& cfg);
/// Members needed per (family, seed): the largest ensemble using the family.
std::size_t members_needed(const ExperimentConfig& cfg, const ModelFamily& f);
std::filesystem::path checkpoint_path(const ExperimentConfig& cfg, const ModelFamily& f, std::uint64_t seed,
                                      std::size_t member);
/// Model and train seeds for one ensemble member.
std::uint64_t member_seed(std::uint64_t seed, std::size_t member);

/// Table cell: empty, text, integer or real. Reals print in shortest
/// round-trip form; empty cells are blank in CSV and null in JSON.
using Cell = std::variant<std::monostate, std::string, std::int64_t, double>;

struct Table {
    std::string name;
    std::vector<std::string> columns;
    std::vector<std::vector<Cell>> rows;

    std::string to_csv() const;
    std::string to_jsonl() const;
};

/// Writes <dir>/<name>.csv and <dir>/<name>.jsonl.
void write_table(const Table& t, const std::filesystem::path& dir);

/// Reads a table back from its JSON lines mirror.
Table read_table(const std::filesystem::path& jsonl, std::string name);

/// run_meta.json bookkeeping for command-level idempotency.
class ResultStore {
   public:
    explicit ResultStore(std::filesystem::path root);
    const std::filesystem::path& root() const { return root_; }
    /// True when `command` finished earlier with this config hash.
    bool completed(const std::string& command, const std::string& config_hash) const;
    /// Throws ConfigError when the directory holds another config's results.
    void check_owner(const std::string& config_hash, bool force) const;
    void mark_completed(const std::string& command, const std::string& config_hash);

   private:
    std::filesystem::path root_;
};

struct CommandOptions {
    bool force = false;
    /// Progress lines; silent when empty.
    std::function<void(const std::string&)> log;
};

struct TrainSummary {
    std::size_t trained = 0;
    std::size_t reused = 0;
};

TrainSummary cmd_train(const ExperimentConfig& cfg, const CommandOptions& opts = {});

struct EvalOutput {
    std::vector<EvalRecord> records;  // grid order: seed, method, split, batch size
    bool skipped = false;             // already complete with the same hash
};

EvalOutput cmd_eval(const ExperimentConfig& cfg, const CommandOptions& opts = {});

struct DiscrepancyRow {
    std::uint64_t seed = 0;
    std::string mode;
    std::string shift_kind;
    double severity = 0.0;
    double discrepancy = 0.0;
    double brier = 0.0;
};

struct DiagnoseOutput {
    std::vector<DiscrepancyRow> discrepancy;
    bool skipped = false;
};

DiagnoseOutput cmd_diagnose(const ExperimentConfig& cfg, const CommandOptions& opts = {});

struct EpsRow {
    std::uint64_t seed = 0;
    std::string method;
    double multiplier = 1.0;
    double eps = 0.0;
    EvalRecord record;
};

struct SweepOutput {
    std::vector<EpsRow> rows;
    bool skipped = false;
};

SweepOutput cmd_sweep_eps(const ExperimentConfig& cfg, const CommandOptions& opts = {});

struct ReportOutput {
    Table by_severity;
    bool empty = false;
};

/// Summarizes <store>/results/eval.jsonl grouped by method, severity and batch
/// size (min, quartiles, median, max over seeds and shift kinds).
ReportOutput cmd_report(const std::filesystem::path& store, const CommandOptions& opts = {});

/// Linear-interpolation quantile of unsorted values, q in [0, 1].
double quantile(std::vector<double> values, double q);

/// Runs fn(i) for i in [0, n) on `workers` threads; rethrows the first error
/// by index.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn);

}  // namespace ptbn
