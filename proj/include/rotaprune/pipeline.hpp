#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "rotaprune/checkpoint.hpp"
#include "rotaprune/config.hpp"
#include "rotaprune/denoiser.hpp"
#include "rotaprune/pruner.hpp"
#include "rotaprune/transformer.hpp"

namespace rotaprune {

// File names inside the output directory.
inline constexpr const char* kFusedFile = "fused.dnrt";
inline constexpr const char* kStatsFile = "stats.dnrt";
inline constexpr const char* kRotationsFile = "rotations.dnrt";
inline constexpr const char* kMergedFile = "merged.dnrt";
inline constexpr const char* kPrunedFile = "pruned.dnrt";
inline constexpr const char* kBaselineFile = "pruned_baseline.dnrt";
inline constexpr const char* kMaskDir = "masks";

/// Rethrows the exception in flight as the same error kind with the stage name
/// (and layer index, if any) prepended. Call from inside a catch block.
[[noreturn]] void rethrow_in_stage(std::string_view stage, std::optional<std::size_t> layer = std::nullopt);

/// Loads `model_path` or draws a random model, then folds its norms.
Model fuse_stage(const PipelineConfig& config);

/// Non-overlapping windows of `seq_len` bytes, at most `max_windows` of them
/// (0 = no limit). A trailing partial window is dropped.
std::vector<std::vector<std::uint8_t>> byte_windows(const std::vector<std::uint8_t>& bytes, std::size_t seq_len,
                                                    std::size_t max_windows = 0);
std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);
/// Bytes reduced modulo the vocabulary so any text fits a small toy vocabulary.
std::vector<std::uint8_t> to_tokens(const std::vector<std::uint8_t>& bytes, std::size_t vocab_size);

/// One H = X X^T per hook site and layer, accumulated over the hidden-state
/// sequences (tokens x hidden) and sealed.
std::vector<LayerStats> collect_stats(const Model& fused, const std::vector<Matrix>& sequences);
/// Calibration inputs per the config: seeded Gaussian hidden states or embedded text windows.
std::vector<Matrix> calibration_inputs(const Model& fused, const PipelineConfig& config);
std::vector<LayerStats> calibrate(const Model& fused, const PipelineConfig& config);

/// The seven linears of one layer with their shared statistics.
LayerBundle layer_bundle(const Model& fused, std::size_t layer, const LayerStats& stats, Metric metric, double damp);

struct DenoiseOutput {
    std::vector<Matrix> r1, r2;
    std::vector<TrainResult> runs;
    /// The statistics objects each layer's objective read, for the reuse check.
    std::vector<std::vector<const CalibStats*>> stats_used;
};

/// Trains one rotation pair per layer, layers running concurrently. With the
/// rotator disabled the pairs stay at the identity and only the step-0 loss is recorded.
DenoiseOutput denoise(const Model& fused, const std::vector<LayerStats>& stats, const PipelineConfig& config);

/// The rotated (merged) model, or the fused model untouched when the rotator is disabled.
StoredModel merge_stage(const Model& fused, const std::vector<Matrix>& r1, const std::vector<Matrix>& r2,
                        const PipelineConfig& config);
void save_stored_model(const std::filesystem::path& path, const StoredModel& stored);

struct LayerPrune {
    std::vector<PruneMask> masks;  // one per linear, in kAllLinears order
    double pruned_score_before = 0;  // Σ over pruned entries of the scores, no rotation
    double pruned_score_after = 0;   // same in the rotated basis
    double calib_deviation_unrotated = 0;
    double calib_deviation_rotated = 0;
    std::vector<const CalibStats*> stats_used;
};

struct PruneOutput {
    StoredModel pruned;  // rotated weights pruned, same boundary maps as the input
    Model baseline;      // the fused model pruned without rotation
    std::vector<LayerPrune> layers;
};

/// Prunes every linear of `merged` against the rotated calibration Hessians and
/// the fused model against the raw ones, layers running concurrently.
PruneOutput prune_stage(const Model& fused, const StoredModel& merged, const std::vector<LayerStats>& stats,
                        const PipelineConfig& config);

/// exp(mean next-byte negative log-likelihood) over the windows.
double perplexity(const Model& model, const std::vector<std::vector<std::uint8_t>>& windows);
std::vector<std::vector<std::uint8_t>> eval_windows(const PipelineConfig& config);

struct EvalOutput {
    std::map<std::string, double> metrics;
    std::vector<double> heldout_deviation_unrotated;
    std::vector<double> heldout_deviation_rotated;
};

EvalOutput evaluate(const Model& fused, const StoredModel& pruned, const Model& baseline, const PipelineConfig& config);

inline constexpr int kReportSchemaVersion = 1;

struct LayerRow {
    std::size_t layer = 0;
    double entropy_before = 0;
    double entropy_after = 0;
    double pruned_score_before = 0;
    double pruned_score_after = 0;
    double calib_deviation_unrotated = 0;
    double calib_deviation_rotated = 0;
    double heldout_deviation_unrotated = 0;
    double heldout_deviation_rotated = 0;
    friend bool operator==(const LayerRow&, const LayerRow&) = default;
};

struct RunReport {
    int schema_version = kReportSchemaVersion;
    nlohmann::json config = nlohmann::json::object();
    std::vector<LayerRow> layers;
    std::vector<double> trajectory;     // total entropy over layers after k updates
    std::vector<double> trajectory_ms;  // empty unless timing is reported
    std::map<std::string, double> metrics;
    std::map<std::string, double> stage_ms;  // empty unless timing is reported
    friend bool operator==(const RunReport&, const RunReport&) = default;
};

nlohmann::json report_to_json(const RunReport& report);
/// Throws IoError for a wrong schema version or missing fields.
RunReport report_from_json(const nlohmann::json& j);

/// Writes report.json, entropy_trajectory.csv (step,loss,wall_ms) and
/// layer_table.csv. Throws NumericalError for a non-finite number, IoError
/// naming the path on write failure.
void report_emit(const RunReport& report, const std::filesystem::path& dir);

/// Report pieces each stage writes as stage_<name>.json. Timing fields appear
/// only when the config asks for them.
nlohmann::json calibrate_fragment(const std::vector<LayerStats>& stats);
nlohmann::json denoise_fragment(const DenoiseOutput& out, bool timing);
nlohmann::json prune_fragment(const PruneOutput& out);
nlohmann::json eval_fragment(const EvalOutput& out);
/// Builds the report from the fuse, calibrate, denoise, prune and eval fragments.
RunReport assemble_report(const PipelineConfig& config, const std::map<std::string, nlohmann::json>& fragments);

inline constexpr std::string_view kStageNames[] = {"fuse", "calibrate", "denoise", "merge", "prune", "eval"};

/// Runs one stage against the output directory: reads what earlier stages
/// left there, writes its checkpoints and stage_<name>.json.
void run_stage(std::string_view stage, const PipelineConfig& config);
/// Re-assembles and emits the report from the stage files in the output directory.
RunReport run_report(const PipelineConfig& config);
/// All stages in order, in memory, persisting every artifact along the way.
RunReport run_pipeline(const PipelineConfig& config);

}  // namespace rotaprune
