#include "rotaprune/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <utility>

#include "rotaprune/linalg.hpp"

namespace rotaprune {

void ModelSpec::validate() const {
    if (hidden_dim == 0 || n_layers == 0 || n_heads == 0 || head_dim == 0 || ffn_dim == 0 || vocab_size == 0) {
        throw InvalidArgument("model spec: every dimension must be >= 1");
    }
    if (hidden_dim != n_heads * head_dim) {
        throw InvalidArgument("model spec: hidden dim " + std::to_string(hidden_dim) + " != heads " +
                              std::to_string(n_heads) + " x head dim " + std::to_string(head_dim));
    }
    if (rope && head_dim % 2 != 0) throw InvalidArgument("model spec: rotary embedding needs an even head dim");
    if (vocab_size > 256) throw InvalidArgument("model spec: byte-level vocabulary is at most 256");
    if (!(norm_eps > 0.0) || !(rope_base > 0.0)) throw InvalidArgument("model spec: norm eps and rope base must be > 0");
}

const Matrix& LayerWeights::weight(Linear l) const {
    switch (l) {
        case Linear::Q: return wq;
        case Linear::K: return wk;
        case Linear::V: return wv;
        case Linear::O: return wo;
        case Linear::Gate: return wgate;
        case Linear::Up: return wup;
        case Linear::Down: return wdown;
    }
    return wq;
}

Matrix& LayerWeights::weight(Linear l) { return const_cast<Matrix&>(std::as_const(*this).weight(l)); }

bool Model::fused() const {
    if (final_norm) return false;
    return std::none_of(layers.begin(), layers.end(), [](const LayerWeights& l) { return l.attn_norm || l.ffn_norm; });
}

bool Model::has_boundaries() const {
    auto any = [](const std::vector<Matrix>& v) { return std::any_of(v.begin(), v.end(), [](const Matrix& m) { return !m.empty(); }); };
    return any(entry) || any(exit);
}

std::size_t Model::boundary_parameter_count() const {
    std::size_t n = 0;
    for (const Matrix& m : entry) n += m.size();
    for (const Matrix& m : exit) n += m.size();
    return n;
}

std::size_t Model::parameter_count() const {
    std::size_t n = embedding.size() + lm_head.size() + boundary_parameter_count();
    if (final_norm) n += final_norm->size();
    for (const LayerWeights& l : layers) {
        for (Linear k : kAllLinears) n += l.weight(k).size();
        if (l.attn_norm) n += l.attn_norm->size();
        if (l.ffn_norm) n += l.ffn_norm->size();
    }
    return n;
}

Model random_model(const ModelSpec& spec, std::uint64_t seed) {
    spec.validate();
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> gamma(0.5, 1.5);
    auto norm = [&] {
        std::vector<double> g(spec.hidden_dim);
        for (double& x : g) x = gamma(rng);
        return g;
    };
    auto weight = [&](std::size_t rows, std::size_t cols) {
        return Matrix::gaussian(rows, cols, rng, 1.0 / std::sqrt(static_cast<double>(cols)));
    };
    const std::size_t d = spec.hidden_dim, f = spec.ffn_dim;
    Model m;
    m.spec = spec;
    m.embedding = Matrix::gaussian(spec.vocab_size, d, rng);
    for (std::size_t i = 0; i < spec.n_layers; ++i) {
        LayerWeights l;
        l.wq = weight(d, d);
        l.wk = weight(d, d);
        l.wv = weight(d, d);
        l.wo = weight(d, d);
        l.wgate = weight(f, d);
        l.wup = weight(f, d);
        l.wdown = weight(d, f);
        l.attn_norm = norm();
        l.ffn_norm = norm();
        m.layers.push_back(std::move(l));
    }
    m.final_norm = norm();
    m.lm_head = weight(spec.vocab_size, d);
    m.entry.assign(spec.n_layers, Matrix());
    m.exit.assign(spec.n_layers, Matrix());
    return m;
}

namespace {

Matrix scale_columns(const Matrix& w, const std::vector<double>& g) {
    if (g.size() != w.cols()) {
        throw ShapeError("fuse: norm weight of length " + std::to_string(g.size()) + " for weight " + w.shape_string());
    }
    Matrix out = w;
    for (std::size_t i = 0; i < w.rows(); ++i)
        for (std::size_t j = 0; j < w.cols(); ++j) out(i, j) *= g[j];
    return out;
}

void require_positive(const std::vector<double>& g, const char* what) {
    for (std::size_t j = 0; j < g.size(); ++j) {
        if (!(g[j] > 0.0)) {
            throw InvalidArgument(std::string(what) + ": non-positive norm weight at " + std::to_string(j));
        }
    }
}

}  // namespace

LayerWeights fuse_rmsnorm(const LayerWeights& weights) {
    if (!weights.attn_norm || !weights.ffn_norm) throw StateError("fuse_rmsnorm: layer is already fused");
    require_positive(*weights.attn_norm, "fuse_rmsnorm attention norm");
    require_positive(*weights.ffn_norm, "fuse_rmsnorm ffn norm");
    LayerWeights out = weights;
    out.wq = scale_columns(weights.wq, *weights.attn_norm);
    out.wk = scale_columns(weights.wk, *weights.attn_norm);
    out.wv = scale_columns(weights.wv, *weights.attn_norm);
    out.wgate = scale_columns(weights.wgate, *weights.ffn_norm);
    out.wup = scale_columns(weights.wup, *weights.ffn_norm);
    out.attn_norm.reset();
    out.ffn_norm.reset();
    return out;
}

Model fuse_model(const Model& model) {
    if (!model.final_norm) throw StateError("fuse_model: model is already fused");
    require_positive(*model.final_norm, "fuse_model final norm");
    Model out = model;
    for (std::size_t i = 0; i < model.layers.size(); ++i) out.layers[i] = fuse_rmsnorm(model.layers[i]);
    out.lm_head = scale_columns(model.lm_head, *model.final_norm);
    out.final_norm.reset();
    return out;
}

Matrix rms_norm(const Matrix& x, const std::vector<double>& weight, double eps) {
    if (!weight.empty() && weight.size() != x.cols()) throw ShapeError("rms_norm: weight length mismatch");
    Matrix out(x.rows(), x.cols());
    const double n = static_cast<double>(x.cols());
    for (std::size_t i = 0; i < x.rows(); ++i) {
        double ss = 0.0;
        for (double v : x.row(i)) ss += v * v;
        const double inv = 1.0 / std::sqrt(ss / n + eps);
        for (std::size_t j = 0; j < x.cols(); ++j) out(i, j) = x(i, j) * inv * (weight.empty() ? 1.0 : weight[j]);
    }
    return out;
}

const char* hook_site_name(HookSite site) {
    switch (site) {
        case HookSite::AttnIn: return "attn_in";
        case HookSite::AttnOut: return "attn_out";
        case HookSite::FfnIn: return "ffn_in";
        case HookSite::FfnMid: return "ffn_mid";
    }
    return "?";
}

HookSite hook_site(Linear l) {
    switch (l) {
        case Linear::Q:
        case Linear::K:
        case Linear::V: return HookSite::AttnIn;
        case Linear::O: return HookSite::AttnOut;
        case Linear::Gate:
        case Linear::Up: return HookSite::FfnIn;
        case Linear::Down: return HookSite::FfnMid;
    }
    return HookSite::AttnIn;
}

namespace {

const std::vector<double> kNoWeight;

// Rotate-half convention on each head: pairs (i, i + head_dim / 2).
void apply_rope(Matrix& x, const ModelSpec& spec) {
    const std::size_t half = spec.head_dim / 2;
    for (std::size_t pos = 0; pos < x.rows(); ++pos) {
        for (std::size_t i = 0; i < half; ++i) {
            const double freq = std::pow(spec.rope_base, -2.0 * static_cast<double>(i) / static_cast<double>(spec.head_dim));
            const double angle = static_cast<double>(pos) * freq;
            const double c = std::cos(angle), s = std::sin(angle);
            for (std::size_t h = 0; h < spec.n_heads; ++h) {
                double& a = x(pos, h * spec.head_dim + i);
                double& b = x(pos, h * spec.head_dim + i + half);
                const double a0 = a, b0 = b;
                a = a0 * c - b0 * s;
                b = a0 * s + b0 * c;
            }
        }
    }
}

Matrix attention(const Matrix& q, const Matrix& k, const Matrix& v, const ModelSpec& spec) {
    const std::size_t t = q.rows();
    const std::size_t hd = spec.head_dim;
    const std::size_t vd = v.cols() / spec.n_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    Matrix out(t, v.cols());
    std::vector<double> w(t);
    for (std::size_t h = 0; h < spec.n_heads; ++h) {
        for (std::size_t i = 0; i < t; ++i) {
            double mx = -INFINITY;
            for (std::size_t j = 0; j <= i; ++j) {
                double s = 0.0;
                for (std::size_t c = 0; c < hd; ++c) s += q(i, h * hd + c) * k(j, h * hd + c);
                w[j] = s * scale;
                mx = std::max(mx, w[j]);
            }
            double z = 0.0;
            for (std::size_t j = 0; j <= i; ++j) {
                w[j] = std::exp(w[j] - mx);
                z += w[j];
            }
            for (std::size_t c = 0; c < vd; ++c) {
                double s = 0.0;
                for (std::size_t j = 0; j <= i; ++j) s += w[j] * v(j, h * vd + c);
                out(i, h * vd + c) = s / z;
            }
        }
    }
    return out;
}

double silu(double x) { return x / (1.0 + std::exp(-x)); }

}  // namespace

Matrix forward_hidden(const Model& model, const Matrix& hidden, const ActivationHook& hook) {
    const ModelSpec& spec = model.spec;
    if (hidden.cols() != spec.hidden_dim) {
        throw ShapeError("forward: hidden states " + hidden.shape_string() + " for model width " +
                         std::to_string(spec.hidden_dim));
    }
    Matrix h = hidden;
    for (std::size_t li = 0; li < model.layers.size(); ++li) {
        const LayerWeights& l = model.layers[li];
        if (li < model.entry.size() && !model.entry[li].empty()) h = matmul(h, model.entry[li]);

        const Matrix a = rms_norm(h, l.attn_norm ? *l.attn_norm : kNoWeight, spec.norm_eps);
        if (hook) hook(li, HookSite::AttnIn, a);
        Matrix q = matmul_nt(a, l.wq);
        Matrix k = matmul_nt(a, l.wk);
        const Matrix v = matmul_nt(a, l.wv);
        if (spec.rope) {
            apply_rope(q, spec);
            apply_rope(k, spec);
        }
        const Matrix o = attention(q, k, v, spec);
        if (hook) hook(li, HookSite::AttnOut, o);
        h += matmul_nt(o, l.wo);

        const Matrix f = rms_norm(h, l.ffn_norm ? *l.ffn_norm : kNoWeight, spec.norm_eps);
        if (hook) hook(li, HookSite::FfnIn, f);
        Matrix g = matmul_nt(f, l.wgate);
        const Matrix u = matmul_nt(f, l.wup);
        for (std::size_t i = 0; i < g.rows(); ++i)
            for (std::size_t j = 0; j < g.cols(); ++j) g(i, j) = silu(g(i, j)) * u(i, j);
        if (hook) hook(li, HookSite::FfnMid, g);
        h += matmul_nt(g, l.wdown);

        if (li < model.exit.size() && !model.exit[li].empty()) h = matmul(h, model.exit[li]);
    }
    require_finite(h, "forward");
    return h;
}

Matrix embed(const Model& model, const std::vector<std::uint8_t>& tokens) {
    Matrix x(tokens.size(), model.spec.hidden_dim);
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        if (tokens[t] >= model.spec.vocab_size) {
            throw InvalidArgument("embed: token " + std::to_string(tokens[t]) + " outside vocabulary of " +
                                  std::to_string(model.spec.vocab_size));
        }
        const auto src = model.embedding.row(tokens[t]);
        std::copy(src.begin(), src.end(), x.row(t).begin());
    }
    return x;
}

Matrix logits(const Model& model, const std::vector<std::uint8_t>& tokens, const ActivationHook& hook) {
    const Matrix h = forward_hidden(model, embed(model, tokens), hook);
    const Matrix n = rms_norm(h, model.final_norm ? *model.final_norm : kNoWeight, model.spec.norm_eps);
    return matmul_nt(n, model.lm_head);
}

namespace {

void require_head_blocks(const Matrix& r2, std::size_t n_heads, std::size_t layer) {
    const std::size_t hd = r2.rows() / n_heads;
    for (std::size_t i = 0; i < r2.rows(); ++i)
        for (std::size_t j = 0; j < r2.cols(); ++j)
            if (i / hd != j / hd && r2(i, j) != 0.0) {
                throw InvalidArgument("apply_rotations: layer " + std::to_string(layer) +
                                      " value-side rotation mixes attention heads at (" + std::to_string(i) + ", " +
                                      std::to_string(j) + ")");
            }
}

}  // namespace

RotatedModel apply_rotations(const Model& fused, const std::vector<Matrix>& r1, const std::vector<Matrix>& r2) {
    if (!fused.fused()) throw StateError("apply_rotations: model must be fused first");
    if (fused.has_boundaries()) throw StateError("apply_rotations: model is already rotated");
    const std::size_t n = fused.layers.size();
    if (r1.size() != n || r2.size() != n) {
        throw ShapeError("apply_rotations: need one rotation pair per layer (" + std::to_string(n) + "), got " +
                         std::to_string(r1.size()) + " and " + std::to_string(r2.size()));
    }
    const std::size_t d = fused.spec.hidden_dim;
    RotatedModel out{fused, r1, r2, RotationMode::Explicit};
    for (std::size_t i = 0; i < n; ++i) {
        const std::string where = "apply_rotations layer " + std::to_string(i);
        if (r1[i].rows() != d || r2[i].rows() != fused.layers[i].wv.rows()) {
            throw ShapeError(where + ": rotation shapes " + r1[i].shape_string() + ", " + r2[i].shape_string());
        }
        require_orthogonal(r1[i], 1e-8, where.c_str());
        require_orthogonal(r2[i], 1e-8, where.c_str());
        require_head_blocks(r2[i], fused.spec.n_heads, i);
        LayerWeights& l = out.model.layers[i];
        for (Linear k : kAllLinears) l.weight(k) = rotate_weight(l.weight(k), rotation_case(k), r1[i], r2[i]);
        out.model.entry[i] = r1[i];
        out.model.exit[i] = transpose(r1[i]);
    }
    return out;
}

RotatedModel merge_rotations(const RotatedModel& rotated) {
    if (rotated.mode == RotationMode::Merged) throw StateError("merge_rotations: rotations are already merged");
    RotatedModel out = rotated;
    Model& m = out.model;
    const std::size_t n = m.layers.size();
    for (std::size_t i = 0; i < n; ++i) {
        m.entry[i] = i == 0 ? rotated.r1[0] : matmul_tn(rotated.r1[i - 1], rotated.r1[i]);
        m.exit[i] = Matrix();
    }
    if (n > 0) m.lm_head = matmul(m.lm_head, rotated.r1[n - 1]);
    out.mode = RotationMode::Merged;
    return out;
}

std::size_t merged_overhead(const ModelSpec& spec) { return spec.n_layers * spec.hidden_dim * spec.hidden_dim; }

}  // namespace rotaprune
