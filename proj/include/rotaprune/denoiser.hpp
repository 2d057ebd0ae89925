#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <vector>

#include "rotaprune/entropy.hpp"
#include "rotaprune/importance.hpp"
#include "rotaprune/tape.hpp"

namespace rotaprune {

/// Assembles square orthogonal blocks along the diagonal.
/// Throws ShapeError for a non-square block and InvalidArgument for a block
/// that is not orthogonal within 1e-8.
Matrix make_block_diagonal(const std::vector<Matrix>& blocks);

/// Learnable rotations of one decoder layer.
///
/// R1 (hidden x hidden) is the orthogonal factor of `a1`, optionally split into
/// `a1.size()` equal diagonal blocks. R2 acts on the value/output feature space
/// and always has one block per attention head, so it never mixes heads.
struct RotationPair {
    std::vector<Matrix> a1;
    std::vector<Matrix> a2;
    std::size_t hidden_dim = 0;
    std::size_t head_dim_total = 0;

    /// a1 = a2 = I, so q1 = q2 = I.
    static RotationPair identity(std::size_t hidden_dim, std::size_t n_heads, std::size_t head_dim,
                                 std::size_t block_count = 1);

    std::size_t block_count() const { return a1.size(); }
    std::size_t head_count() const { return a2.size(); }
    Matrix q1() const;
    Matrix q2() const;
};

struct LinearTerm {
    Linear kind = Linear::Q;
    Matrix w;  // Y = W X layout, d_out x d_in
    std::shared_ptr<const CalibStats> stats;
    std::shared_ptr<const Matrix> h_inv;  // dampened inverse, SparseGPT metric only
};

/// The seven linears that share one layer's rotations.
struct LayerBundle {
    std::vector<LinearTerm> linears;
    Metric metric = Metric::Obd;
    std::size_t n_heads = 1;
    double damp = 0.01;

    std::size_t hidden_dim() const;
    std::size_t head_dim_total() const;
};

/// Checks shapes and order (Q, K, V, O, Gate, Up, Down) and precomputes the
/// inverse Hessians a SparseGPT metric needs. Linears sharing a CalibStats
/// object share one inverse. Statistics must be sealed.
LayerBundle make_bundle(std::vector<LinearTerm> linears, Metric metric, std::size_t n_heads, double damp = 0.01);

/// Shapes and input statistics of a random LLaMA-style layer bundle.
struct SyntheticBundleSpec {
    std::size_t hidden_dim = 64;
    std::size_t n_heads = 4;
    std::size_t ffn_dim = 172;
    Metric metric = Metric::Obd;
    /// Input covariance eigenvalues fall off as decay^k in a random basis.
    double spectrum_decay = 0.9;
    /// Calibration samples per input, as a multiple of the input width.
    std::size_t sample_factor = 4;
    double damp = 0.01;
};

/// Gaussian weights (std 1/sqrt(d_in)) and Hessians accumulated from correlated
/// Gaussian inputs: one statistics object per distinct input (attention in,
/// attention out, FFN in, FFN mid), shared by the linears that read it.
LayerBundle synthetic_bundle(const SyntheticBundleSpec& spec, std::uint64_t seed);

struct TrainConfig {
    std::size_t steps = 2000;
    double lr = 0.01;
    std::uint64_t seed = 0;
    std::size_t block_count = 1;
    double epsilon = 1e-12;
    /// Standard deviation of a seeded perturbation added to the identity start.
    /// Zero keeps the exact identity initialization.
    double init_noise = 0.0;
    /// Assemble the hidden-side factor through the block path even for one block.
    bool force_block_assembly = false;
};

struct LossGraph {
    NodeId loss;
    NodeId r1;
    NodeId r2;
    std::vector<NodeId> a1;
    std::vector<NodeId> a2;
};

/// Sum over the bundle's linears of the entropies of all their normalization
/// groups, with scores computed from R1 = Q(a1), R2 = Q(a2) recomputed on the tape.
/// `force_block_assembly` routes even a single block through block_diag.
LossGraph build_loss(const LayerBundle& bundle, const RotationPair& pair, Tape& tape, double epsilon = 1e-12,
                     bool force_block_assembly = false);

/// Same objective for rotation nodes that already exist on the tape.
NodeId build_loss_from_rotations(const LayerBundle& bundle, Tape& tape, NodeId r1, NodeId r2, double epsilon);

/// The objective evaluated without a tape for explicit rotations.
double bundle_entropy(const LayerBundle& bundle, const Matrix& r1, const Matrix& r2, double epsilon);
/// Upper bound: sum over all groups of ln |G|.
double bundle_max_entropy(const LayerBundle& bundle);

struct TrainResult {
    RotationPair pair;
    std::vector<double> losses;   // losses[k] is the objective after k updates
    std::vector<double> wall_ms;  // elapsed time at each recorded loss
};

/// Called once per recorded loss with the step index and the current pair.
using TrainObserver = std::function<void(std::size_t step, double loss, const RotationPair& pair)>;

/// Adam on the unconstrained a-matrices. W and H in the bundle are never modified.
/// Throws NumericalError naming the step if the loss becomes non-finite or the
/// QR of a parameter becomes rank deficient.
TrainResult train_rotations(const LayerBundle& bundle, const TrainConfig& config, const TrainObserver& observer = {});

/// CSV with header `step,loss,wall_ms`, one line per recorded loss.
void write_trajectory_csv(std::ostream& out, const std::vector<double>& losses, const std::vector<double>& wall_ms);

}  // namespace rotaprune
