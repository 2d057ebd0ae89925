#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rotaprune/importance.hpp"
#include "rotaprune/transformer.hpp"

namespace rotaprune {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
    std::string name;
    Matrix value;
};

struct Checkpoint {
    nlohmann::json meta;  // caller fields; "tensors" holds the directory
    std::vector<NamedTensor> tensors;

    const Matrix& tensor(const std::string& name) const;
    bool has(const std::string& name) const;
};

/// File layout: "DNRT", u32 version, u64 metadata length, UTF-8 JSON metadata,
/// then every tensor as little-endian f64 in directory order. The directory
/// (name, shape, byte offset into the payload) is written under "tensors".
void write_checkpoint(const std::filesystem::path& path, nlohmann::json meta, const std::vector<NamedTensor>& tensors);
Checkpoint read_checkpoint(const std::filesystem::path& path);

nlohmann::json spec_to_json(const ModelSpec& spec);
ModelSpec spec_from_json(const nlohmann::json& j);

/// A model, optionally with the rotations it carries.
struct StoredModel {
    Model model;
    std::vector<Matrix> r1;
    std::vector<Matrix> r2;
    std::string rotation = "none";  // none | explicit | merged
};

void save_model(const std::filesystem::path& path, const Model& model);
void save_rotated_model(const std::filesystem::path& path, const RotatedModel& rotated);
StoredModel load_model(const std::filesystem::path& path);
RotatedModel to_rotated(const StoredModel& stored);

/// Per-layer statistics for the four hook sites.
struct LayerStats {
    std::shared_ptr<CalibStats> attn_in, attn_out, ffn_in, ffn_mid;
    std::shared_ptr<const CalibStats> for_linear(Linear l) const;
};

void save_stats(const std::filesystem::path& path, const std::vector<LayerStats>& stats);
/// Loaded statistics come back sealed.
std::vector<LayerStats> load_stats(const std::filesystem::path& path);

/// Trained rotation factors (not the raw a-matrices) per layer.
void save_rotations(const std::filesystem::path& path, const std::vector<Matrix>& r1, const std::vector<Matrix>& r2,
                    const nlohmann::json& extra = nlohmann::json::object());
Checkpoint load_rotations(const std::filesystem::path& path, std::vector<Matrix>& r1, std::vector<Matrix>& r2);

}  // namespace rotaprune
