#include "rotaprune/pruner.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <numeric>
#include <ostream>

#include "rotaprune/importance.hpp"
#include "rotaprune/linalg.hpp"

namespace rotaprune {

SparsityPattern SparsityPattern::unstructured(double ratio) {
    if (!(ratio >= 0.0 && ratio <= 1.0)) throw InvalidArgument("sparsity: ratio must lie in [0, 1]");
    SparsityPattern p;
    p.kind = Kind::Unstructured;
    p.ratio = ratio;
    return p;
}

SparsityPattern SparsityPattern::n_of_m(std::size_t n, std::size_t m) {
    if (m == 0 || n >= m) {
        throw InvalidArgument("sparsity: n:m needs n < m, got " + std::to_string(n) + ":" + std::to_string(m));
    }
    SparsityPattern p;
    p.kind = Kind::NofM;
    p.n = n;
    p.m = m;
    return p;
}

SparsityPattern SparsityPattern::parse(std::string_view text) {
    const std::string s(text);
    constexpr std::string_view prefix = "unstructured:";
    try {
        if (text.substr(0, prefix.size()) == prefix) {
            std::size_t used = 0;
            const std::string rest = s.substr(prefix.size());
            const double r = std::stod(rest, &used);
            if (used != rest.size()) throw std::invalid_argument("trailing characters");
            return unstructured(r);
        }
        const auto colon = s.find(':');
        if (colon != std::string::npos) {
            std::size_t u1 = 0, u2 = 0;
            const std::string a = s.substr(0, colon), b = s.substr(colon + 1);
            const unsigned long n = std::stoul(a, &u1), m = std::stoul(b, &u2);
            if (u1 == a.size() && u2 == b.size() && a[0] != '-' && b[0] != '-') return n_of_m(n, m);
        }
    } catch (const std::logic_error&) {
    }
    throw InvalidArgument("sparsity: cannot parse '" + s + "' (expected unstructured:<ratio> or <n>:<m>)");
}

std::string SparsityPattern::to_string() const {
    if (kind == Kind::NofM) return std::to_string(n) + ":" + std::to_string(m);
    char buf[64];
    std::snprintf(buf, sizeof buf, "unstructured:%g", ratio);
    return buf;
}

std::string_view compare_group_name(CompareGroup g) { return g == CompareGroup::PerRow ? "per-row" : "per-layer"; }

CompareGroup parse_compare_group(std::string_view text) {
    if (text == "per-row") return CompareGroup::PerRow;
    if (text == "per-layer") return CompareGroup::PerLayer;
    throw InvalidArgument("unknown comparison group '" + std::string(text) + "' (per-row or per-layer)");
}

std::size_t PruneMask::kept_count() const { return static_cast<std::size_t>(std::count(keep.begin(), keep.end(), 1)); }

PruneMask PruneMask::all(std::size_t rows, std::size_t cols, bool keep) {
    PruneMask m;
    m.rows = rows;
    m.cols = cols;
    m.keep.assign(rows * cols, keep ? 1 : 0);
    return m;
}

std::size_t pruned_count(std::size_t size, double ratio) {
    return static_cast<std::size_t>(std::floor(static_cast<double>(size) * ratio + 1e-9));
}

namespace {

struct Entry {
    double score;
    std::size_t col;
    std::size_t row;
};

bool lower_first(const Entry& a, const Entry& b) {
    if (a.score != b.score) return a.score < b.score;
    if (a.col != b.col) return a.col < b.col;
    return a.row < b.row;
}

void require_nonnegative(const Matrix& scores, const char* what) {
    for (double s : scores.data())
        if (s < 0.0) throw InvalidArgument(std::string(what) + ": negative score");
}

// Prunes the `count` lowest entries of `entries` in `mask`.
void prune_lowest(std::vector<Entry>& entries, std::size_t count, PruneMask& mask) {
    std::partial_sort(entries.begin(), entries.begin() + static_cast<std::ptrdiff_t>(count), entries.end(), lower_first);
    for (std::size_t k = 0; k < count; ++k) mask.keep[entries[k].row * mask.cols + entries[k].col] = 0;
}

}  // namespace

PruneMask mask_unstructured(const Matrix& scores, double ratio, CompareGroup group) {
    require_nonnegative(scores, "mask_unstructured");
    PruneMask mask = PruneMask::all(scores.rows(), scores.cols(), true);
    mask.pattern = SparsityPattern::unstructured(ratio);
    mask.group = group;
    if (group == CompareGroup::PerRow) {
        const std::size_t count = pruned_count(scores.cols(), ratio);
        std::vector<Entry> row(scores.cols());
        for (std::size_t i = 0; i < scores.rows(); ++i) {
            for (std::size_t j = 0; j < scores.cols(); ++j) row[j] = {scores(i, j), j, i};
            prune_lowest(row, count, mask);
        }
    } else {
        std::vector<Entry> all;
        all.reserve(scores.size());
        for (std::size_t i = 0; i < scores.rows(); ++i)
            for (std::size_t j = 0; j < scores.cols(); ++j) all.push_back({scores(i, j), j, i});
        prune_lowest(all, pruned_count(scores.size(), ratio), mask);
    }
    return mask;
}

namespace {

void require_group_width(std::size_t cols, std::size_t m) {
    if (m == 0 || cols % m != 0) {
        throw InvalidArgument("n:m: " + std::to_string(cols) + " columns are not a multiple of m = " + std::to_string(m));
    }
}

void prune_group(const Matrix& scores, std::size_t row, std::size_t start, std::size_t n, std::size_t m, PruneMask& mask) {
    std::vector<Entry> g(m);
    for (std::size_t k = 0; k < m; ++k) g[k] = {scores(row, start + k), start + k, row};
    prune_lowest(g, m - n, mask);
}

}  // namespace

PruneMask mask_nm(const Matrix& scores, std::size_t n, std::size_t m) {
    require_nonnegative(scores, "mask_nm");
    const SparsityPattern pattern = SparsityPattern::n_of_m(n, m);
    require_group_width(scores.cols(), m);
    PruneMask mask = PruneMask::all(scores.rows(), scores.cols(), true);
    mask.pattern = pattern;
    for (std::size_t i = 0; i < scores.rows(); ++i)
        for (std::size_t s = 0; s < scores.cols(); s += m) prune_group(scores, i, s, n, m, mask);
    return mask;
}

PruneMask make_mask(const Matrix& scores, const SparsityPattern& pattern, CompareGroup group) {
    if (pattern.kind == SparsityPattern::Kind::NofM) return mask_nm(scores, pattern.n, pattern.m);
    return mask_unstructured(scores, pattern.ratio, group);
}

void validate_mask(const PruneMask& mask) {
    if (mask.keep.size() != mask.rows * mask.cols) throw InvalidArgument("mask: storage does not match shape");
    const SparsityPattern& p = mask.pattern;
    if (p.kind == SparsityPattern::Kind::NofM) {
        require_group_width(mask.cols, p.m);
        for (std::size_t i = 0; i < mask.rows; ++i)
            for (std::size_t s = 0; s < mask.cols; s += p.m) {
                std::size_t kept = 0;
                for (std::size_t k = 0; k < p.m; ++k) kept += mask.kept(i, s + k);
                if (kept > p.n) {
                    throw InvalidArgument("mask: row " + std::to_string(i) + " group at column " + std::to_string(s) +
                                          " keeps " + std::to_string(kept) + " > " + std::to_string(p.n));
                }
            }
        return;
    }
    if (mask.group == CompareGroup::PerRow) {
        const std::size_t want = mask.cols - pruned_count(mask.cols, p.ratio);
        for (std::size_t i = 0; i < mask.rows; ++i) {
            std::size_t kept = 0;
            for (std::size_t j = 0; j < mask.cols; ++j) kept += mask.kept(i, j);
            if (kept != want) {
                throw InvalidArgument("mask: row " + std::to_string(i) + " keeps " + std::to_string(kept) +
                                      ", expected " + std::to_string(want));
            }
        }
        return;
    }
    const std::size_t want = mask.keep.size() - pruned_count(mask.keep.size(), p.ratio);
    if (mask.kept_count() != want) {
        throw InvalidArgument("mask: keeps " + std::to_string(mask.kept_count()) + ", expected " + std::to_string(want));
    }
}

namespace {

void require_mask_shape(const Matrix& w, const PruneMask& mask, const char* what) {
    if (mask.rows != w.rows() || mask.cols != w.cols()) {
        throw ShapeError(std::string(what) + ": mask " + shape_string(mask.rows, mask.cols) + " vs weight " +
                         w.shape_string());
    }
}

}  // namespace

Matrix prune_simple(const Matrix& w, const PruneMask& mask) {
    require_mask_shape(w, mask, "prune_simple");
    Matrix out = w;
    for (std::size_t i = 0; i < w.rows(); ++i)
        for (std::size_t j = 0; j < w.cols(); ++j)
            if (!mask.kept(i, j)) out(i, j) = 0.0;
    return out;
}

namespace {

// Upper factor U with U^T U = (H + lambda I)^-1.
Matrix inverse_upper_factor(const Matrix& h, double damp, std::size_t cols) {
    if (h.rows() != cols || !h.is_square()) {
        throw ShapeError("sparsegpt: hessian " + h.shape_string() + " for " + std::to_string(cols) + " input columns");
    }
    Matrix u = transpose(cholesky(cholesky_inverse(h, damp)));
    for (std::size_t j = 0; j < cols; ++j) {
        if (!(u(j, j) > 0.0) || !std::isfinite(u(j, j))) {
            throw NumericalError("sparsegpt: singular inverse-hessian pivot at column " + std::to_string(j));
        }
    }
    return u;
}

// One OBS step on column j for the rows the mask prunes.
void compensate_column(Matrix& w, const Matrix& u, const PruneMask& mask, std::size_t j) {
    const double pivot = u(j, j);
    for (std::size_t i = 0; i < w.rows(); ++i) {
        if (mask.kept(i, j)) continue;
        const double e = w(i, j) / pivot;
        for (std::size_t k = j + 1; k < w.cols(); ++k) w(i, k) -= e * u(j, k);
        w(i, j) = 0.0;
    }
}

}  // namespace

Matrix prune_sparsegpt_with_mask(const Matrix& w, const Matrix& h, const PruneMask& mask, double damp) {
    require_mask_shape(w, mask, "prune_sparsegpt");
    const Matrix u = inverse_upper_factor(h, damp, w.cols());
    Matrix out = w;
    for (std::size_t j = 0; j < w.cols(); ++j) compensate_column(out, u, mask, j);
    require_finite(out, "prune_sparsegpt");
    return out;
}

Matrix compensate_obs(const Matrix& w, const Matrix& h, const PruneMask& mask, double damp) {
    require_mask_shape(w, mask, "compensate_obs");
    if (!h.is_square() || h.rows() != w.cols()) {
        throw ShapeError("compensate_obs: hessian " + h.shape_string() + " for weight " + w.shape_string());
    }
    const double lambda = dampening(h, damp);
    Matrix out = prune_simple(w, mask);
    std::vector<std::size_t> kept, pruned;
    for (std::size_t i = 0; i < w.rows(); ++i) {
        kept.clear();
        pruned.clear();
        for (std::size_t j = 0; j < w.cols(); ++j) (mask.kept(i, j) ? kept : pruned).push_back(j);
        if (kept.empty() || pruned.empty()) continue;
        Matrix hkk(kept.size(), kept.size()), rhs(kept.size(), 1);
        for (std::size_t a = 0; a < kept.size(); ++a) {
            for (std::size_t b = 0; b < kept.size(); ++b) hkk(a, b) = h(kept[a], kept[b]);
            hkk(a, a) += lambda;
            double s = 0.0;
            for (std::size_t p : pruned) s += h(kept[a], p) * w(i, p);
            rhs(a, 0) = s;
        }
        Matrix l;
        try {
            l = cholesky(hkk);
        } catch (const NumericalError& e) {
            throw NumericalError("compensate_obs: row " + std::to_string(i) + ": " + e.what());
        }
        const Matrix shift = solve_upper(transpose(l), solve_lower(l, rhs));
        for (std::size_t a = 0; a < kept.size(); ++a) out(i, kept[a]) += shift(a, 0);
    }
    require_finite(out, "compensate_obs");
    return out;
}

SparseGptResult prune_sparsegpt(const Matrix& w, const Matrix& h, const SparsityPattern& pattern,
                                std::size_t block_size, double damp, CompareGroup group) {
    if (block_size == 0) throw InvalidArgument("sparsegpt: block size must be >= 1");
    const std::size_t rows = w.rows(), cols = w.cols();
    const Matrix u = inverse_upper_factor(h, damp, cols);
    const bool nm = pattern.kind == SparsityPattern::Kind::NofM;
    if (nm) require_group_width(cols, pattern.m);

    SparseGptResult res{w, PruneMask::all(rows, cols, true)};
    res.mask.pattern = pattern;
    res.mask.group = group;
    Matrix& cur = res.w;
    auto score = [&](std::size_t i, std::size_t j) { return cur(i, j) * cur(i, j) / (u(j, j) * u(j, j)); };

    // Remaining prune quota per row (per-row) or for the whole matrix (per-layer).
    std::vector<std::size_t> quota(rows, nm ? 0 : pruned_count(cols, pattern.ratio));
    std::size_t layer_quota = nm ? 0 : pruned_count(rows * cols, pattern.ratio);

    for (std::size_t b = 0; b < cols; b += block_size) {
        const std::size_t e = std::min(cols, b + block_size);
        if (!nm) {
            // Choose the lowest remaining entries over all columns >= b, commit those inside the block.
            auto commit = [&](std::vector<Entry>& cand, std::size_t count) {
                std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(count), cand.end(), lower_first);
                std::size_t used = 0;
                for (std::size_t k = 0; k < count; ++k) {
                    if (cand[k].col < e) {
                        res.mask.keep[cand[k].row * cols + cand[k].col] = 0;
                        ++used;
                    }
                }
                return used;
            };
            if (group == CompareGroup::PerRow) {
                std::vector<Entry> cand(cols - b);
                for (std::size_t i = 0; i < rows; ++i) {
                    for (std::size_t j = b; j < cols; ++j) cand[j - b] = {score(i, j), j, i};
                    quota[i] -= commit(cand, quota[i]);
                }
            } else {
                std::vector<Entry> cand;
                cand.reserve(rows * (cols - b));
                for (std::size_t i = 0; i < rows; ++i)
                    for (std::size_t j = b; j < cols; ++j) cand.push_back({score(i, j), j, i});
                layer_quota -= commit(cand, layer_quota);
            }
        }
        for (std::size_t j = b; j < e; ++j) {
            if (nm && j % pattern.m == 0) {
                Matrix s(rows, cols);
                for (std::size_t i = 0; i < rows; ++i)
                    for (std::size_t k = j; k < j + pattern.m; ++k) s(i, k) = score(i, k);
                for (std::size_t i = 0; i < rows; ++i) prune_group(s, i, j, pattern.n, pattern.m, res.mask);
            }
            compensate_column(cur, u, res.mask, j);
        }
    }
    require_finite(cur, "prune_sparsegpt");
    return res;
}

double output_deviation(const Matrix& w, const Matrix& w_hat, const Matrix& h) {
    require_same_shape(w, w_hat, "output_deviation");
    require_symmetric(h, 1e-10, "output_deviation");
    return quadratic_form_trace(w - w_hat, h);
}

double pruned_score_sum(const Matrix& scores, const PruneMask& mask) {
    require_mask_shape(scores, mask, "pruned_score_sum");
    std::vector<double> pruned;
    for (std::size_t i = 0; i < scores.rows(); ++i)
        for (std::size_t j = 0; j < scores.cols(); ++j)
            if (!mask.kept(i, j)) pruned.push_back(scores(i, j));
    return ordered_sum(std::move(pruned));
}

void write_mask(std::ostream& out, const PruneMask& mask) {
    auto u32 = [&](std::size_t v) {
        if (v > 0xffffffffu) throw InvalidArgument("write_mask: dimension exceeds 32 bits");
        for (int i = 0; i < 4; ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xff));
    };
    u32(mask.rows);
    u32(mask.cols);
    const std::size_t n = mask.keep.size();
    for (std::size_t byte = 0; byte < (n + 7) / 8; ++byte) {
        unsigned char b = 0;
        for (std::size_t bit = 0; bit < 8 && byte * 8 + bit < n; ++bit)
            if (mask.keep[byte * 8 + bit]) b |= static_cast<unsigned char>(1u << bit);
        out.put(static_cast<char>(b));
    }
    if (!out) throw IoError("write_mask: stream failure");
}

PruneMask read_mask(std::istream& in) {
    auto u32 = [&] {
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            const int c = in.get();
            if (c == std::char_traits<char>::eof()) throw IoError("read_mask: truncated header");
            v |= static_cast<std::uint32_t>(c) << (8 * i);
        }
        return v;
    };
    const std::size_t rows = u32(), cols = u32();
    PruneMask m = PruneMask::all(rows, cols, false);
    const std::size_t n = rows * cols;
    for (std::size_t byte = 0; byte < (n + 7) / 8; ++byte) {
        const int c = in.get();
        if (c == std::char_traits<char>::eof()) throw IoError("read_mask: truncated bit stream");
        for (std::size_t bit = 0; bit < 8 && byte * 8 + bit < n; ++bit) m.keep[byte * 8 + bit] = (c >> bit) & 1;
    }
    return m;
}

}  // namespace rotaprune
