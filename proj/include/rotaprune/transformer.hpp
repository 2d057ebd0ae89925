#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "rotaprune/importance.hpp"
#include "rotaprune/matrix.hpp"

namespace rotaprune {

struct ModelSpec {
    std::size_t hidden_dim = 64;
    std::size_t n_layers = 4;
    std::size_t n_heads = 4;
    std::size_t head_dim = 16;
    std::size_t ffn_dim = 172;
    std::size_t vocab_size = 256;
    bool rope = true;
    double rope_base = 10000.0;
    double norm_eps = 1e-6;

    /// Throws InvalidArgument unless every count is >= 1, hidden = heads * head_dim
    /// and head_dim is even when rope is on.
    void validate() const;
    friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

/// Linear weights are stored Y = W X (d_out x d_in); activations are rows.
struct LayerWeights {
    Matrix wq, wk, wv, wo, wgate, wup, wdown;
    std::optional<std::vector<double>> attn_norm;  // absent once fused
    std::optional<std::vector<double>> ffn_norm;

    const Matrix& weight(Linear l) const;
    Matrix& weight(Linear l);
};

struct Model {
    ModelSpec spec;
    Matrix embedding;  // vocab x hidden
    std::vector<LayerWeights> layers;
    std::optional<std::vector<double>> final_norm;
    Matrix lm_head;  // vocab x hidden
    /// Residual-stream basis changes applied on entering / leaving each layer
    /// (row convention, h <- h * M). Empty matrices mean "none".
    std::vector<Matrix> entry;
    std::vector<Matrix> exit;

    bool fused() const;
    bool has_boundaries() const;
    /// Entries held by the entry/exit maps.
    std::size_t boundary_parameter_count() const;
    /// Entries held by all weights, norms and boundary maps.
    std::size_t parameter_count() const;
};

/// Gaussian weights (std 1/sqrt(d_in)), unit-variance embeddings and norm weights
/// drawn from [0.5, 1.5].
Model random_model(const ModelSpec& spec, std::uint64_t seed);

/// Folds RMSNorm weights into the consuming linears as column scaling.
/// Throws StateError when already fused, InvalidArgument for a non-positive weight.
LayerWeights fuse_rmsnorm(const LayerWeights& weights);
/// Fuses every layer and folds the final norm into the LM head.
Model fuse_model(const Model& model);

/// x * g / sqrt(mean(x^2) + eps), row by row. `weight` may be empty.
Matrix rms_norm(const Matrix& x, const std::vector<double>& weight, double eps);

/// Where calibration reads a linear's input inside a layer.
enum class HookSite { AttnIn, AttnOut, FfnIn, FfnMid };
const char* hook_site_name(HookSite site);
/// The hook site feeding a linear.
HookSite hook_site(Linear l);

/// Receives (layer, site, activations with one token per row).
using ActivationHook = std::function<void(std::size_t layer, HookSite site, const Matrix& acts)>;

/// Runs all layers on one sequence of hidden states (tokens x hidden), returning
/// the residual stream before the final norm.
Matrix forward_hidden(const Model& model, const Matrix& hidden, const ActivationHook& hook = {});
/// Embeds one token sequence and returns the LM logits (tokens x vocab).
Matrix logits(const Model& model, const std::vector<std::uint8_t>& tokens, const ActivationHook& hook = {});
Matrix embed(const Model& model, const std::vector<std::uint8_t>& tokens);

enum class RotationMode { Explicit, Merged };

/// A fused model with per-layer rotations folded into its weights.
///
/// Explicit: each layer rotates the residual stream by R1 on entry and back by
/// R1^T on exit. Merged: adjacent maps are combined into one entry map per layer
/// and the last exit is folded into the LM head.
struct RotatedModel {
    Model model;
    std::vector<Matrix> r1;  // hidden x hidden
    std::vector<Matrix> r2;  // per-head block diagonal over the value features
    RotationMode mode = RotationMode::Explicit;
};

/// Throws StateError for an unfused model or one that already carries boundary
/// maps, InvalidArgument for non-orthogonal factors or an R2 that mixes heads.
RotatedModel apply_rotations(const Model& fused, const std::vector<Matrix>& r1, const std::vector<Matrix>& r2);
/// Throws StateError when already merged.
RotatedModel merge_rotations(const RotatedModel& rotated);

/// Extra stored entries after merging: one hidden x hidden map per layer.
std::size_t merged_overhead(const ModelSpec& spec);

}  // namespace rotaprune
