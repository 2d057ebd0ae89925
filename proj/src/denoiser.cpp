#include "rotaprune/denoiser.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <string>

#include "rotaprune/adam.hpp"
#include "rotaprune/linalg.hpp"

namespace rotaprune {

Matrix make_block_diagonal(const std::vector<Matrix>& blocks) {
    std::size_t total = 0;
    for (std::size_t b = 0; b < blocks.size(); ++b) {
        if (!blocks[b].is_square()) {
            throw ShapeError("make_block_diagonal: block " + std::to_string(b) + " is not square " +
                             blocks[b].shape_string());
        }
        require_orthogonal(blocks[b], 1e-8, "make_block_diagonal");
        total += blocks[b].rows();
    }
    Matrix out(total, total);
    std::size_t off = 0;
    for (const Matrix& blk : blocks) {
        for (std::size_t i = 0; i < blk.rows(); ++i)
            for (std::size_t j = 0; j < blk.cols(); ++j) out(off + i, off + j) = blk(i, j);
        off += blk.rows();
    }
    return out;
}

RotationPair RotationPair::identity(std::size_t hidden_dim, std::size_t n_heads, std::size_t head_dim,
                                    std::size_t block_count) {
    if (block_count == 0 || hidden_dim % block_count != 0) {
        throw InvalidArgument("rotation pair: hidden dim " + std::to_string(hidden_dim) +
                              " is not divisible by block count " + std::to_string(block_count));
    }
    if (n_heads == 0 || head_dim == 0) throw InvalidArgument("rotation pair: need at least one head of size >= 1");
    RotationPair p;
    p.hidden_dim = hidden_dim;
    p.head_dim_total = n_heads * head_dim;
    p.a1.assign(block_count, Matrix::identity(hidden_dim / block_count));
    p.a2.assign(n_heads, Matrix::identity(head_dim));
    return p;
}

namespace {

Matrix orthogonal_factor(const std::vector<Matrix>& blocks) {
    if (blocks.size() == 1) return qr_decompose(blocks.front()).q;
    std::vector<Matrix> qs;
    qs.reserve(blocks.size());
    for (const Matrix& a : blocks) qs.push_back(qr_decompose(a).q);
    return make_block_diagonal(qs);
}

}  // namespace

Matrix RotationPair::q1() const { return orthogonal_factor(a1); }
Matrix RotationPair::q2() const { return orthogonal_factor(a2); }

std::size_t LayerBundle::hidden_dim() const { return linears.empty() ? 0 : linears.front().w.cols(); }
std::size_t LayerBundle::head_dim_total() const { return linears.size() < 3 ? 0 : linears[2].w.rows(); }

LayerBundle make_bundle(std::vector<LinearTerm> linears, Metric metric, std::size_t n_heads, double damp) {
    if (linears.size() != kAllLinears.size()) {
        throw InvalidArgument("make_bundle: expected 7 linears, got " + std::to_string(linears.size()));
    }
    for (std::size_t k = 0; k < linears.size(); ++k) {
        if (linears[k].kind != kAllLinears[k]) {
            throw InvalidArgument("make_bundle: linear " + std::to_string(k) + " should be " +
                                  std::string(linear_name(kAllLinears[k])));
        }
        if (!linears[k].stats) throw InvalidArgument("make_bundle: missing statistics for " + std::string(linear_name(linears[k].kind)));
        if (!linears[k].stats->sealed) {
            throw StateError("make_bundle: statistics for " + std::string(linear_name(linears[k].kind)) + " are not sealed");
        }
        if (linears[k].stats->dim() != linears[k].w.cols()) {
            throw ShapeError("make_bundle: " + std::string(linear_name(linears[k].kind)) + " weight " +
                             linears[k].w.shape_string() + " vs hessian dim " + std::to_string(linears[k].stats->dim()));
        }
    }
    const std::size_t d = linears[0].w.cols();
    const std::size_t dv = linears[2].w.rows();
    const std::size_t ffn = linears[5].w.rows();
    auto expect = [&](Linear l, std::size_t r, std::size_t c) {
        const Matrix& w = linears[static_cast<std::size_t>(l)].w;
        if (w.rows() != r || w.cols() != c) {
            throw ShapeError("make_bundle: " + std::string(linear_name(l)) + " has shape " + w.shape_string() +
                             ", expected " + shape_string(r, c));
        }
    };
    expect(Linear::K, linears[1].w.rows(), d);
    expect(Linear::V, dv, d);
    expect(Linear::O, d, dv);
    expect(Linear::Gate, ffn, d);
    expect(Linear::Up, ffn, d);
    expect(Linear::Down, d, ffn);
    if (n_heads == 0 || dv % n_heads != 0) {
        throw InvalidArgument("make_bundle: value dim " + std::to_string(dv) + " not divisible by " +
                              std::to_string(n_heads) + " heads");
    }

    if (metric == Metric::SparseGpt) {
        std::map<const CalibStats*, std::shared_ptr<const Matrix>> inverses;
        for (LinearTerm& t : linears) {
            auto& inv = inverses[t.stats.get()];
            if (!inv) inv = std::make_shared<const Matrix>(cholesky_inverse(t.stats->h, damp));
            t.h_inv = inv;
        }
    }
    return LayerBundle{std::move(linears), metric, n_heads, damp};
}

namespace {

std::shared_ptr<CalibStats> correlated_stats(std::size_t dim, const SyntheticBundleSpec& spec, std::mt19937_64& rng) {
    const Matrix basis = qr_decompose(Matrix::gaussian(dim, dim, rng)).q;
    Matrix mix = basis;
    double scale = 1.0;
    for (std::size_t k = 0; k < dim; ++k, scale *= std::sqrt(spec.spectrum_decay))
        for (std::size_t i = 0; i < dim; ++i) mix(i, k) *= scale;
    auto stats = std::make_shared<CalibStats>(dim);
    accumulate_hessian(*stats, matmul(mix, Matrix::gaussian(dim, spec.sample_factor * dim, rng)));
    stats->seal();
    return stats;
}

}  // namespace

LayerBundle synthetic_bundle(const SyntheticBundleSpec& spec, std::uint64_t seed) {
    if (spec.hidden_dim == 0 || spec.ffn_dim == 0 || spec.n_heads == 0 || spec.hidden_dim % spec.n_heads != 0) {
        throw InvalidArgument("synthetic_bundle: hidden dim must be a positive multiple of the head count");
    }
    if (!(spec.spectrum_decay > 0.0 && spec.spectrum_decay <= 1.0) || spec.sample_factor == 0) {
        throw InvalidArgument("synthetic_bundle: decay must lie in (0, 1] and sample factor be >= 1");
    }
    std::mt19937_64 rng(seed);
    const std::size_t d = spec.hidden_dim, f = spec.ffn_dim;
    auto weight = [&](std::size_t rows, std::size_t cols) {
        return Matrix::gaussian(rows, cols, rng, 1.0 / std::sqrt(static_cast<double>(cols)));
    };
    const auto attn_in = correlated_stats(d, spec, rng);
    const auto attn_out = correlated_stats(d, spec, rng);
    const auto ffn_in = correlated_stats(d, spec, rng);
    const auto ffn_mid = correlated_stats(f, spec, rng);
    std::vector<LinearTerm> linears = {
        {Linear::Q, weight(d, d), attn_in, nullptr},      {Linear::K, weight(d, d), attn_in, nullptr},
        {Linear::V, weight(d, d), attn_in, nullptr},      {Linear::O, weight(d, d), attn_out, nullptr},
        {Linear::Gate, weight(f, d), ffn_in, nullptr},    {Linear::Up, weight(f, d), ffn_in, nullptr},
        {Linear::Down, weight(d, f), ffn_mid, nullptr},
    };
    return make_bundle(std::move(linears), spec.metric, spec.n_heads, spec.damp);
}

namespace {

// Per-tape cache so linears that share a Hessian share its rotated diagonal.
class LossBuilder {
public:
    LossBuilder(const LayerBundle& bundle, Tape& tape, NodeId r1, NodeId r2, double eps)
        : bundle_(bundle), tape_(tape), r1_(r1), r2_(r2), eps_(eps) {}

    NodeId build() {
        NodeId total{};
        bool first = true;
        for (const LinearTerm& term : bundle_.linears) {
            const NodeId e = linear_entropy(term);
            total = first ? e : tape_.add(total, e);
            first = false;
        }
        return total;
    }

private:
    enum class Side { None, R1, R2 };

    static Side hessian_side(RotationCase c) {
        switch (c) {
            case RotationCase::RightOnly:
            case RotationCase::TwoSidedV: return Side::R1;
            case RotationCase::TwoSidedO: return Side::R2;
            case RotationCase::LeftOnly: return Side::None;
        }
        return Side::None;
    }

    NodeId transposed(Side s) {
        auto& slot = s == Side::R1 ? r1t_ : r2t_;
        if (!slot) slot = tape_.transpose(s == Side::R1 ? r1_ : r2_);
        return *slot;
    }

    // diag(R^T M R) as a 1 x n row: column sums of R (.) (M R).
    NodeId rotated_diag(const Matrix& m, Side side) {
        const auto key = std::make_pair(&m, side);
        if (auto it = diag_cache_.find(key); it != diag_cache_.end()) return it->second;
        NodeId out;
        if (side == Side::None) {
            out = tape_.constant(Matrix::row_vector(diagonal_of(m)));
        } else {
            const NodeId r = side == Side::R1 ? r1_ : r2_;
            const NodeId mr = tape_.matmul(tape_.constant(m), r);
            out = tape_.sum_cols(tape_.mul(r, mr));
        }
        diag_cache_.emplace(key, out);
        return out;
    }

    NodeId rotated_weight(const LinearTerm& term) {
        const NodeId w = tape_.constant(term.w);
        switch (rotation_case(term.kind)) {
            case RotationCase::RightOnly: return tape_.matmul(w, r1_);
            case RotationCase::LeftOnly: return tape_.matmul(transposed(Side::R1), w);
            case RotationCase::TwoSidedV: return tape_.matmul(tape_.matmul(transposed(Side::R2), w), r1_);
            case RotationCase::TwoSidedO: return tape_.matmul(tape_.matmul(transposed(Side::R1), w), r2_);
        }
        return w;
    }

    NodeId scores(const LinearTerm& term) {
        const NodeId w2 = tape_.square(rotated_weight(term));
        const Side side = hessian_side(rotation_case(term.kind));
        switch (bundle_.metric) {
            case Metric::Magnitude: return w2;
            case Metric::Wanda:
            case Metric::Obd: return tape_.mul_row(w2, rotated_diag(term.stats->h, side));
            case Metric::SparseGpt: return tape_.mul_row(w2, tape_.reciprocal(rotated_diag(*term.h_inv, side)));
        }
        return w2;
    }

    NodeId row_entropy(NodeId s) {
        const NodeId t = tape_.add_scalar(s, eps_);
        const NodeId p = tape_.mul_col(t, tape_.reciprocal(tape_.sum_rows(t)));
        return tape_.sum_all(tape_.sum_rows(tape_.neg_xlogx(p)));
    }

    NodeId column_entropy(NodeId s) {
        const NodeId t = tape_.add_scalar(s, eps_);
        const NodeId p = tape_.mul_row(t, tape_.reciprocal(tape_.sum_cols(t)));
        return tape_.sum_all(tape_.sum_cols(tape_.neg_xlogx(p)));
    }

    NodeId linear_entropy(const LinearTerm& term) {
        const NodeId s = scores(term);
        switch (layout_for(rotation_case(term.kind))) {
            case GroupLayout::Rows: return row_entropy(s);
            case GroupLayout::Columns: return column_entropy(s);
            case GroupLayout::RowsAndColumns: return tape_.add(row_entropy(s), column_entropy(s));
        }
        return s;
    }

    const LayerBundle& bundle_;
    Tape& tape_;
    NodeId r1_, r2_;
    double eps_;
    std::optional<NodeId> r1t_, r2t_;
    std::map<std::pair<const Matrix*, Side>, NodeId> diag_cache_;
};

NodeId rotation_node(Tape& tape, const std::vector<Matrix>& blocks, std::vector<NodeId>& leaves, bool force_blocks) {
    std::vector<NodeId> qs;
    for (const Matrix& a : blocks) {
        leaves.push_back(tape.parameter(a));
        qs.push_back(tape.qr(leaves.back()));
    }
    if (qs.size() == 1 && !force_blocks) return qs.front();
    return tape.block_diag(qs);
}

}  // namespace

NodeId build_loss_from_rotations(const LayerBundle& bundle, Tape& tape, NodeId r1, NodeId r2, double epsilon) {
    if (epsilon < 0.0) throw InvalidArgument("build_loss: epsilon must be >= 0");
    return LossBuilder(bundle, tape, r1, r2, epsilon).build();
}

LossGraph build_loss(const LayerBundle& bundle, const RotationPair& pair, Tape& tape, double epsilon,
                     bool force_block_assembly) {
    if (pair.hidden_dim != bundle.hidden_dim() || pair.head_dim_total != bundle.head_dim_total()) {
        throw ShapeError("build_loss: rotation pair dims (" + std::to_string(pair.hidden_dim) + ", " +
                         std::to_string(pair.head_dim_total) + ") do not match the bundle (" +
                         std::to_string(bundle.hidden_dim()) + ", " + std::to_string(bundle.head_dim_total()) + ")");
    }
    if (pair.head_count() != bundle.n_heads) {
        throw ShapeError("build_loss: pair has " + std::to_string(pair.head_count()) + " head blocks, bundle has " +
                         std::to_string(bundle.n_heads) + " heads");
    }
    LossGraph g;
    g.r1 = rotation_node(tape, pair.a1, g.a1, force_block_assembly);
    g.r2 = rotation_node(tape, pair.a2, g.a2, force_block_assembly);
    g.loss = build_loss_from_rotations(bundle, tape, g.r1, g.r2, epsilon);
    return g;
}

double bundle_entropy(const LayerBundle& bundle, const Matrix& r1, const Matrix& r2, double epsilon) {
    double total = 0.0;
    for (const LinearTerm& term : bundle.linears) {
        const RotationCase c = rotation_case(term.kind);
        const RotatedLinear rl = rotate_linear(term.w, term.stats->h, c, r1, r2);
        Matrix s;
        switch (bundle.metric) {
            case Metric::Magnitude: s = square(rl.w); break;
            case Metric::Wanda:
            case Metric::Obd: s = score_obd(rl.w, rl.h).scores; break;
            case Metric::SparseGpt: s = score_sparsegpt(rl.w, rotate_hessian(*term.h_inv, c, r1, r2)).scores; break;
        }
        total += group_entropy(s, layout_for(c), epsilon).total;
    }
    return total;
}

double bundle_max_entropy(const LayerBundle& bundle) {
    double total = 0.0;
    for (const LinearTerm& term : bundle.linears)
        total += max_group_entropy(term.w.rows(), term.w.cols(), layout_for(rotation_case(term.kind)));
    return total;
}

TrainResult train_rotations(const LayerBundle& bundle, const TrainConfig& config, const TrainObserver& observer) {
    if (!(config.lr > 0.0)) throw InvalidArgument("train_rotations: lr must be > 0");
    if (config.epsilon < 0.0) throw InvalidArgument("train_rotations: epsilon must be >= 0");
    if (config.block_count == 0) throw InvalidArgument("train_rotations: block count must be >= 1");

    const std::size_t d = bundle.hidden_dim();
    const std::size_t dv = bundle.head_dim_total();
    TrainResult result;
    result.pair = RotationPair::identity(d, bundle.n_heads, dv / bundle.n_heads, config.block_count);
    if (config.init_noise > 0.0) {
        std::mt19937_64 rng(config.seed);
        for (Matrix& a : result.pair.a1) a += Matrix::gaussian(a.rows(), a.cols(), rng, config.init_noise);
        for (Matrix& a : result.pair.a2) a += Matrix::gaussian(a.rows(), a.cols(), rng, config.init_noise);
    }

    const AdamOptions opts{config.lr};
    std::vector<AdamState> s1, s2;
    for (const Matrix& a : result.pair.a1) s1.emplace_back(a.rows(), a.cols(), opts);
    for (const Matrix& a : result.pair.a2) s2.emplace_back(a.rows(), a.cols(), opts);

    const double upper = bundle_max_entropy(bundle);
    const auto start = std::chrono::steady_clock::now();
    for (std::size_t step = 0;; ++step) {
        Tape tape;
        LossGraph g;
        try {
            g = build_loss(bundle, result.pair, tape, config.epsilon, config.force_block_assembly);
        } catch (const NumericalError& e) {
            throw NumericalError("train_rotations: step " + std::to_string(step) + ": " + e.what());
        }
        const double loss = tape.scalar(g.loss);
        if (!std::isfinite(loss)) {
            throw NumericalError("train_rotations: non-finite loss at step " + std::to_string(step));
        }
        if (loss < 0.0 || loss > upper * (1.0 + 1e-12)) {
            throw NumericalError("train_rotations: loss " + std::to_string(loss) + " outside [0, " +
                                 std::to_string(upper) + "] at step " + std::to_string(step));
        }
        result.losses.push_back(loss);
        result.wall_ms.push_back(
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count());
        if (observer) observer(step, loss, result.pair);
        if (step == config.steps) break;

        const Gradients grads = tape.backward(g.loss);
        for (std::size_t b = 0; b < g.a1.size(); ++b)
            result.pair.a1[b] = adam_step(s1[b], result.pair.a1[b], grads[g.a1[b]]);
        for (std::size_t b = 0; b < g.a2.size(); ++b)
            result.pair.a2[b] = adam_step(s2[b], result.pair.a2[b], grads[g.a2[b]]);
    }
    return result;
}

void write_trajectory_csv(std::ostream& out, const std::vector<double>& losses, const std::vector<double>& wall_ms) {
    out << "step,loss,wall_ms\n";
    char buf[96];
    for (std::size_t k = 0; k < losses.size(); ++k) {
        const double ms = k < wall_ms.size() ? wall_ms[k] : 0.0;
        std::snprintf(buf, sizeof buf, "%zu,%.17g,%.3f\n", k, losses[k], ms);
        out << buf;
    }
}

}  // namespace rotaprune
