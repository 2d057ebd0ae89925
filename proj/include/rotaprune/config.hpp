#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "rotaprune/importance.hpp"
#include "rotaprune/pruner.hpp"
#include "rotaprune/transformer.hpp"

namespace rotaprune {

/// Everything one pipeline run needs. Field defaults are the toy configuration.
struct PipelineConfig {
    std::filesystem::path model_path;  // empty: random model from `model`
    ModelSpec model;
    std::uint64_t model_seed = 0;

    std::string calib_source = "synthetic";  // synthetic | text-file
    std::filesystem::path calib_file;
    std::size_t calib_samples = 16;
    std::size_t calib_seq_len = 32;
    std::uint64_t calib_seed = 1;

    bool rotator_enabled = true;
    std::size_t rotator_steps = 200;
    double rotator_lr = 0.01;
    std::size_t rotator_block_count = 1;
    std::uint64_t rotator_seed = 0;
    std::optional<Metric> rotator_metric;  // unset: follows prune_method

    std::string prune_method = "sparsegpt";  // magnitude | wanda | sparsegpt
    SparsityPattern prune_pattern = SparsityPattern::n_of_m(2, 4);
    CompareGroup prune_group = CompareGroup::PerRow;
    double prune_damp = 0.01;
    std::size_t prune_block_size = 1;

    std::string eval_source = "synthetic";  // synthetic | text-file
    std::filesystem::path eval_file;
    std::size_t eval_seq_len = 32;
    std::size_t eval_bytes = 1024;  // synthetic text length
    std::uint64_t eval_seed = 2;
    std::vector<std::string> eval_metrics = {"perplexity", "deviation"};

    std::filesystem::path output_dir = "out";
    /// Wall-clock numbers make reports differ run to run, so they are off by default.
    bool report_timing = false;

    /// The importance metric the rotations are trained for.
    Metric rotation_metric() const;
    bool wants_metric(std::string_view name) const;
    /// Every key with its effective value, in schema order.
    nlohmann::json to_json() const;
};

/// Flat `key = value` lines; `#` starts a comment. Unknown or repeated keys,
/// malformed values and inconsistent settings throw ConfigError naming the line.
/// Relative file paths are resolved against `base_dir`.
PipelineConfig parse_config(std::string_view text, const std::filesystem::path& base_dir = {});
PipelineConfig load_config(const std::filesystem::path& path);

/// All accepted keys in schema order.
std::vector<std::string> config_keys();

}  // namespace rotaprune
