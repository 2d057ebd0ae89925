#include "rotaprune/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <future>
#include <iterator>
#include <random>
#include <sstream>

#include "rotaprune/linalg.hpp"

namespace rotaprune {

namespace fs = std::filesystem;

void rethrow_in_stage(std::string_view stage, std::optional<std::size_t> layer) {
    std::string prefix = "stage " + std::string(stage);
    if (layer) prefix += ", layer " + std::to_string(*layer);
    prefix += ": ";
    auto tag = [&](const std::exception& e) {
        const std::string what = e.what();
        return what.rfind("stage ", 0) == 0 ? what : prefix + what;
    };
    try {
        throw;
    } catch (const ConfigError& e) {
        throw ConfigError(tag(e));
    } catch (const NumericalError& e) {
        throw NumericalError(tag(e));
    } catch (const ShapeError& e) {
        throw ShapeError(tag(e));
    } catch (const InvalidArgument& e) {
        throw InvalidArgument(tag(e));
    } catch (const StateError& e) {
        throw StateError(tag(e));
    } catch (const IoError& e) {
        throw IoError(tag(e));
    } catch (const std::exception& e) {
        throw Error(tag(e));
    }
}

Model fuse_stage(const PipelineConfig& config) {
    Model m;
    if (config.model_path.empty()) {
        m = random_model(config.model, config.model_seed);
    } else {
        StoredModel s = load_model(config.model_path);
        if (s.rotation != "none") throw StateError("fuse: " + config.model_path.string() + " already carries rotations");
        m = std::move(s.model);
    }
    return m.fused() ? m : fuse_model(m);
}

std::vector<std::vector<std::uint8_t>> byte_windows(const std::vector<std::uint8_t>& bytes, std::size_t seq_len,
                                                    std::size_t max_windows) {
    if (seq_len == 0) throw InvalidArgument("byte_windows: window length must be positive");
    std::vector<std::vector<std::uint8_t>> out;
    for (std::size_t s = 0; s + seq_len <= bytes.size(); s += seq_len) {
        if (max_windows && out.size() == max_windows) break;
        out.emplace_back(bytes.begin() + static_cast<std::ptrdiff_t>(s),
                         bytes.begin() + static_cast<std::ptrdiff_t>(s + seq_len));
    }
    return out;
}

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(path.string() + ": cannot open for reading");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<std::uint8_t> to_tokens(const std::vector<std::uint8_t>& bytes, std::size_t vocab_size) {
    std::vector<std::uint8_t> out(bytes.size());
    std::transform(bytes.begin(), bytes.end(), out.begin(),
                   [&](std::uint8_t b) { return static_cast<std::uint8_t>(b % vocab_size); });
    return out;
}

std::vector<LayerStats> collect_stats(const Model& fused, const std::vector<Matrix>& sequences) {
    if (sequences.empty()) throw InvalidArgument("calibrate: calibration set is empty");
    const ModelSpec& spec = fused.spec;
    std::vector<LayerStats> stats(spec.n_layers);
    for (LayerStats& s : stats) {
        s.attn_in = std::make_shared<CalibStats>(spec.hidden_dim);
        s.attn_out = std::make_shared<CalibStats>(spec.n_heads * spec.head_dim);
        s.ffn_in = std::make_shared<CalibStats>(spec.hidden_dim);
        s.ffn_mid = std::make_shared<CalibStats>(spec.ffn_dim);
    }
    const ActivationHook hook = [&](std::size_t layer, HookSite site, const Matrix& acts) {
        LayerStats& s = stats[layer];
        CalibStats& target = site == HookSite::AttnIn    ? *s.attn_in
                             : site == HookSite::AttnOut ? *s.attn_out
                             : site == HookSite::FfnIn   ? *s.ffn_in
                                                         : *s.ffn_mid;
        accumulate_hessian_rows(target, acts);
    };
    for (const Matrix& seq : sequences) forward_hidden(fused, seq, hook);
    for (LayerStats& s : stats)
        for (auto* p : {&s.attn_in, &s.attn_out, &s.ffn_in, &s.ffn_mid}) (*p)->seal();
    return stats;
}

std::vector<Matrix> calibration_inputs(const Model& fused, const PipelineConfig& config) {
    std::vector<Matrix> seqs;
    if (config.calib_source == "synthetic") {
        std::mt19937_64 rng(config.calib_seed);
        for (std::size_t i = 0; i < config.calib_samples; ++i)
            seqs.push_back(Matrix::gaussian(config.calib_seq_len, fused.spec.hidden_dim, rng));
        return seqs;
    }
    const auto tokens = to_tokens(read_bytes(config.calib_file), fused.spec.vocab_size);
    for (const auto& w : byte_windows(tokens, config.calib_seq_len, config.calib_samples)) seqs.push_back(embed(fused, w));
    if (seqs.empty()) {
        throw InvalidArgument("calibrate: " + config.calib_file.string() + " holds no full window of " +
                              std::to_string(config.calib_seq_len) + " bytes");
    }
    return seqs;
}

std::vector<LayerStats> calibrate(const Model& fused, const PipelineConfig& config) {
    if (!fused.fused()) throw StateError("calibrate: model is not fused");
    return collect_stats(fused, calibration_inputs(fused, config));
}

LayerBundle layer_bundle(const Model& fused, std::size_t layer, const LayerStats& stats, Metric metric, double damp) {
    std::vector<LinearTerm> terms;
    for (Linear k : kAllLinears) terms.push_back({k, fused.layers.at(layer).weight(k), stats.for_linear(k), nullptr});
    return make_bundle(std::move(terms), metric, fused.spec.n_heads, damp);
}

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

// Runs fn(layer) for every layer concurrently and collects results in layer order.
template <class F>
auto per_layer(std::string_view stage, std::size_t n, F fn) -> std::vector<decltype(fn(std::size_t{}))> {
    using R = decltype(fn(std::size_t{}));
    std::vector<std::future<R>> jobs;
    for (std::size_t i = 0; i < n; ++i) jobs.push_back(std::async(std::launch::async, fn, i));
    std::vector<R> out;
    out.reserve(n);
    std::exception_ptr first;
    std::size_t first_layer = 0;
    for (std::size_t i = 0; i < n; ++i) {
        try {
            out.push_back(jobs[i].get());
        } catch (...) {
            if (!first) {
                first = std::current_exception();
                first_layer = i;
            }
        }
    }
    if (first) {
        try {
            std::rethrow_exception(first);
        } catch (...) {
            rethrow_in_stage(stage, first_layer);
        }
    }
    return out;
}

Matrix layer_r1(const StoredModel& m, std::size_t i) {
    return m.r1.empty() ? Matrix::identity(m.model.spec.hidden_dim) : m.r1.at(i);
}
Matrix layer_r2(const StoredModel& m, std::size_t i) {
    return m.r2.empty() ? Matrix::identity(m.model.spec.n_heads * m.model.spec.head_dim) : m.r2.at(i);
}

ImportanceMap metric_scores(const Matrix& w, const Matrix& h, Metric metric, double damp) {
    switch (metric) {
        case Metric::Magnitude: return score_magnitude(w);
        case Metric::Wanda: return score_wanda(w, h);
        case Metric::Obd: return score_obd(w, h);
        case Metric::SparseGpt: return score_sparsegpt(w, cholesky_inverse(h, damp));
    }
    throw InvalidArgument("unknown metric");
}

std::pair<Matrix, PruneMask> prune_linear(const Matrix& w, const Matrix& h, const PipelineConfig& c) {
    if (c.prune_method == "sparsegpt") {
        auto r = prune_sparsegpt(w, h, c.prune_pattern, c.prune_block_size, c.prune_damp, c.prune_group);
        return {std::move(r.w), std::move(r.mask)};
    }
    const Matrix s = c.prune_method == "wanda" ? score_wanda(w, h).scores : score_magnitude(w).scores;
    PruneMask mask = make_mask(s, c.prune_pattern, c.prune_group);
    validate_mask(mask);
    return {prune_simple(w, mask), std::move(mask)};
}

double lowest_pruned_sum(const Matrix& scores, const PipelineConfig& c) {
    return pruned_score_sum(scores, make_mask(scores, c.prune_pattern, c.prune_group));
}

}  // namespace

DenoiseOutput denoise(const Model& fused, const std::vector<LayerStats>& stats, const PipelineConfig& config) {
    if (stats.size() != fused.layers.size()) throw ShapeError("denoise: statistics for a different layer count");
    const Metric metric = config.rotation_metric();
    struct One {
        TrainResult run;
        std::vector<const CalibStats*> used;
    };
    auto results = per_layer("denoise", fused.layers.size(), [&](std::size_t i) {
        const LayerBundle bundle = layer_bundle(fused, i, stats[i], metric, config.prune_damp);
        TrainConfig tc;
        tc.steps = config.rotator_enabled ? config.rotator_steps : 0;
        tc.lr = config.rotator_lr;
        tc.seed = config.rotator_seed + i;
        tc.block_count = config.rotator_block_count;
        One o{train_rotations(bundle, tc), {}};
        for (const LinearTerm& t : bundle.linears) o.used.push_back(t.stats.get());
        return o;
    });
    DenoiseOutput out;
    for (One& o : results) {
        out.r1.push_back(o.run.pair.q1());
        out.r2.push_back(o.run.pair.q2());
        out.runs.push_back(std::move(o.run));
        out.stats_used.push_back(std::move(o.used));
    }
    return out;
}

StoredModel merge_stage(const Model& fused, const std::vector<Matrix>& r1, const std::vector<Matrix>& r2,
                        const PipelineConfig& config) {
    if (!config.rotator_enabled) return {fused, {}, {}, "none"};
    const RotatedModel merged = merge_rotations(apply_rotations(fused, r1, r2));
    return {merged.model, merged.r1, merged.r2, "merged"};
}

void save_stored_model(const fs::path& path, const StoredModel& s) {
    if (s.rotation == "none") {
        save_model(path, s.model);
        return;
    }
    save_rotated_model(path, to_rotated(s));
}

PruneOutput prune_stage(const Model& fused, const StoredModel& merged, const std::vector<LayerStats>& stats,
                        const PipelineConfig& config) {
    const std::size_t n = fused.layers.size();
    if (stats.size() != n || merged.model.layers.size() != n) throw ShapeError("prune: layer counts disagree");
    const bool rotated = merged.rotation != "none";
    const Metric metric = config.rotation_metric();
    struct One {
        LayerPrune report;
        LayerWeights pruned, baseline;
    };
    auto results = per_layer("prune", n, [&](std::size_t i) {
        One o{{}, merged.model.layers[i], fused.layers[i]};
        const Matrix r1 = layer_r1(merged, i), r2 = layer_r2(merged, i);
        for (Linear k : kAllLinears) {
            const auto st = stats[i].for_linear(k);
            o.report.stats_used.push_back(st.get());
            const RotationCase rc = rotation_case(k);
            const Matrix& w0 = fused.layers[i].weight(k);
            const Matrix& w_rot = merged.model.layers[i].weight(k);
            const Matrix h_rot = rotated ? rotate_hessian(st->h, rc, r1, r2) : st->h;

            auto [w_hat, mask] = prune_linear(w_rot, h_rot, config);
            o.report.calib_deviation_rotated += output_deviation(w_rot, w_hat, h_rot);
            o.pruned.weight(k) = std::move(w_hat);
            o.report.masks.push_back(std::move(mask));

            if (rotated) {
                auto base = prune_linear(w0, st->h, config);
                o.report.calib_deviation_unrotated += output_deviation(w0, base.first, st->h);
                o.baseline.weight(k) = std::move(base.first);
            } else {
                o.baseline.weight(k) = o.pruned.weight(k);
            }

            const double before = lowest_pruned_sum(metric_scores(w0, st->h, metric, config.prune_damp).scores, config);
            o.report.pruned_score_before += before;
            o.report.pruned_score_after +=
                rotated ? lowest_pruned_sum(metric_scores(w_rot, h_rot, metric, config.prune_damp).scores, config)
                        : before;
        }
        if (!rotated) o.report.calib_deviation_unrotated = o.report.calib_deviation_rotated;
        return o;
    });
    PruneOutput out{merged, fused, {}};
    for (std::size_t i = 0; i < n; ++i) {
        out.pruned.model.layers[i] = std::move(results[i].pruned);
        out.baseline.layers[i] = std::move(results[i].baseline);
        out.layers.push_back(std::move(results[i].report));
    }
    return out;
}

double perplexity(const Model& model, const std::vector<std::vector<std::uint8_t>>& windows) {
    double nll = 0.0;
    std::size_t count = 0;
    for (const auto& w : windows) {
        if (w.size() < 2) continue;
        const Matrix l = logits(model, w);
        for (std::size_t t = 0; t + 1 < w.size(); ++t) {
            const auto row = l.row(t);
            const double mx = *std::max_element(row.begin(), row.end());
            double z = 0.0;
            for (double v : row) z += std::exp(v - mx);
            nll += mx + std::log(z) - row[w[t + 1]];
            ++count;
        }
    }
    if (count == 0) throw InvalidArgument("evaluate: eval text is empty");
    return std::exp(nll / static_cast<double>(count));
}

std::vector<std::vector<std::uint8_t>> eval_windows(const PipelineConfig& config) {
    std::vector<std::uint8_t> bytes;
    if (config.eval_source == "synthetic") {
        std::mt19937_64 rng(config.eval_seed);
        std::uniform_int_distribution<int> printable(32, 126);
        bytes.resize(config.eval_bytes);
        for (auto& b : bytes) b = static_cast<std::uint8_t>(printable(rng));
    } else {
        bytes = read_bytes(config.eval_file);
    }
    if (bytes.size() < 2) throw InvalidArgument("evaluate: eval text is empty");
    if (bytes.size() < config.eval_seq_len) return {bytes};
    return byte_windows(bytes, config.eval_seq_len);
}

EvalOutput evaluate(const Model& fused, const StoredModel& pruned, const Model& baseline, const PipelineConfig& config) {
    EvalOutput out;
    auto windows = eval_windows(config);
    for (auto& w : windows) w = to_tokens(w, fused.spec.vocab_size);
    if (config.wants_metric("perplexity")) {
        const double dense = perplexity(fused, windows), after = perplexity(pruned.model, windows);
        out.metrics["perplexity_dense"] = dense;
        out.metrics["perplexity_pruned"] = after;
        out.metrics["perplexity_baseline"] = perplexity(baseline, windows);
        out.metrics["perplexity_delta"] = after - dense;
    }
    const bool rotated = pruned.rotation != "none";
    if (config.wants_metric("deviation")) {
        std::vector<Matrix> seqs;
        for (const auto& w : windows) seqs.push_back(embed(fused, w));
        const auto held = collect_stats(fused, seqs);
        double sum_rot = 0.0, sum_base = 0.0;
        for (std::size_t i = 0; i < fused.layers.size(); ++i) {
            const Matrix r1 = layer_r1(pruned, i), r2 = layer_r2(pruned, i);
            double rot = 0.0, base = 0.0;
            for (Linear k : kAllLinears) {
                const RotationCase rc = rotation_case(k);
                const Matrix& h = held[i].for_linear(k)->h;
                const Matrix& w0 = fused.layers[i].weight(k);
                base += output_deviation(w0, baseline.layers[i].weight(k), h);
                if (rotated) {
                    rot += output_deviation(rotate_weight(w0, rc, r1, r2), pruned.model.layers[i].weight(k),
                                            rotate_hessian(h, rc, r1, r2));
                } else {
                    rot += output_deviation(w0, pruned.model.layers[i].weight(k), h);
                }
            }
            out.heldout_deviation_rotated.push_back(rot);
            out.heldout_deviation_unrotated.push_back(base);
            sum_rot += rot;
            sum_base += base;
        }
        const double n = static_cast<double>(fused.layers.size());
        out.metrics["mean_output_deviation"] = sum_rot / n;
        out.metrics["mean_output_deviation_unrotated"] = sum_base / n;
        if (sum_base > 0.0) out.metrics["deviation_ratio"] = sum_rot / sum_base;
    }
    if (pruned.rotation == "merged") {
        // The same pruned weights behind explicit per-layer maps must give the same outputs.
        RotatedModel explicit_model = apply_rotations(fused, pruned.r1, pruned.r2);
        for (std::size_t i = 0; i < fused.layers.size(); ++i)
            for (Linear k : kAllLinears) explicit_model.model.layers[i].weight(k) = pruned.model.layers[i].weight(k);
        double worst = 0.0;
        for (std::size_t w = 0; w < std::min<std::size_t>(windows.size(), 4); ++w)
            worst = std::max(worst, max_abs_diff(logits(explicit_model.model, windows[w]),
                                                 logits(pruned.model, windows[w])));
        out.metrics["merge_max_abs_diff"] = worst;
    }
    return out;
}

nlohmann::json report_to_json(const RunReport& r) {
    nlohmann::json layers = nlohmann::json::array();
    for (const LayerRow& l : r.layers) {
        layers.push_back({{"layer", l.layer},
                          {"entropy_before", l.entropy_before},
                          {"entropy_after", l.entropy_after},
                          {"pruned_score_before", l.pruned_score_before},
                          {"pruned_score_after", l.pruned_score_after},
                          {"calib_deviation_unrotated", l.calib_deviation_unrotated},
                          {"calib_deviation_rotated", l.calib_deviation_rotated},
                          {"heldout_deviation_unrotated", l.heldout_deviation_unrotated},
                          {"heldout_deviation_rotated", l.heldout_deviation_rotated}});
    }
    return {{"schema_version", r.schema_version},
            {"config", r.config},
            {"layers", layers},
            {"trajectory", r.trajectory},
            {"trajectory_ms", r.trajectory_ms},
            {"metrics", r.metrics},
            {"stage_ms", r.stage_ms}};
}

RunReport report_from_json(const nlohmann::json& j) {
    try {
        RunReport r;
        r.schema_version = j.at("schema_version").get<int>();
        if (r.schema_version != kReportSchemaVersion) {
            throw IoError("report: unsupported schema version " + std::to_string(r.schema_version));
        }
        r.config = j.at("config");
        for (const auto& l : j.at("layers")) {
            LayerRow row;
            row.layer = l.at("layer");
            row.entropy_before = l.at("entropy_before");
            row.entropy_after = l.at("entropy_after");
            row.pruned_score_before = l.at("pruned_score_before");
            row.pruned_score_after = l.at("pruned_score_after");
            row.calib_deviation_unrotated = l.at("calib_deviation_unrotated");
            row.calib_deviation_rotated = l.at("calib_deviation_rotated");
            row.heldout_deviation_unrotated = l.at("heldout_deviation_unrotated");
            row.heldout_deviation_rotated = l.at("heldout_deviation_rotated");
            r.layers.push_back(row);
        }
        r.trajectory = j.at("trajectory").get<std::vector<double>>();
        r.trajectory_ms = j.at("trajectory_ms").get<std::vector<double>>();
        r.metrics = j.at("metrics").get<std::map<std::string, double>>();
        r.stage_ms = j.at("stage_ms").get<std::map<std::string, double>>();
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("report: malformed: ") + e.what());
    }
}

namespace {

void require_finite_report(const RunReport& r) {
    auto check = [](double v, const std::string& what) {
        if (!std::isfinite(v)) throw NumericalError("report: non-finite value in " + what);
    };
    for (const LayerRow& l : r.layers) {
        const std::string at = "layer " + std::to_string(l.layer);
        for (double v : {l.entropy_before, l.entropy_after, l.pruned_score_before, l.pruned_score_after,
                         l.calib_deviation_unrotated, l.calib_deviation_rotated, l.heldout_deviation_unrotated,
                         l.heldout_deviation_rotated})
            check(v, at);
    }
    for (double v : r.trajectory) check(v, "trajectory");
    for (double v : r.trajectory_ms) check(v, "trajectory_ms");
    for (const auto& [k, v] : r.metrics) check(v, "metric " + k);
    for (const auto& [k, v] : r.stage_ms) check(v, "stage_ms " + k);
}

std::ofstream open_out(const fs::path& path) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError(path.string() + ": cannot open for writing");
    return f;
}

void finish(std::ofstream& f, const fs::path& path) {
    f.flush();
    if (!f) throw IoError(path.string() + ": write failed");
}

void write_json(const fs::path& path, const nlohmann::json& j) {
    auto f = open_out(path);
    f << j.dump(2) << '\n';
    finish(f, path);
}

nlohmann::json read_json(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(path.string() + ": cannot open for reading (did the earlier stage run?)");
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw IoError(path.string() + ": " + e.what());
    }
}

}  // namespace

void report_emit(const RunReport& report, const fs::path& dir) {
    require_finite_report(report);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError(dir.string() + ": " + ec.message());
    write_json(dir / "report.json", report_to_json(report));

    const fs::path traj = dir / "entropy_trajectory.csv";
    auto t = open_out(traj);
    write_trajectory_csv(t, report.trajectory, report.trajectory_ms);
    finish(t, traj);

    const fs::path table = dir / "layer_table.csv";
    auto f = open_out(table);
    f << "layer,entropy_before,entropy_after,pruned_score_before,pruned_score_after,calib_deviation_unrotated,"
         "calib_deviation_rotated,heldout_deviation_unrotated,heldout_deviation_rotated\n";
    char buf[512];
    for (const LayerRow& l : report.layers) {
        std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", l.layer,
                      l.entropy_before, l.entropy_after, l.pruned_score_before, l.pruned_score_after,
                      l.calib_deviation_unrotated, l.calib_deviation_rotated, l.heldout_deviation_unrotated,
                      l.heldout_deviation_rotated);
        f << buf;
    }
    finish(f, table);
}

nlohmann::json calibrate_fragment(const std::vector<LayerStats>& stats) {
    nlohmann::json samples = nlohmann::json::array();
    for (const LayerStats& s : stats) samples.push_back(s.attn_in->samples);
    return {{"samples", samples}};
}

nlohmann::json denoise_fragment(const DenoiseOutput& out, bool timing) {
    std::vector<double> before, after, total, ms;
    for (const TrainResult& r : out.runs) {
        before.push_back(r.losses.front());
        after.push_back(r.losses.back());
    }
    const std::size_t steps = out.runs.empty() ? 0 : out.runs.front().losses.size();
    for (std::size_t k = 0; k < steps; ++k) {
        double s = 0.0, m = 0.0;
        for (const TrainResult& r : out.runs) {
            s += r.losses.at(k);
            m = std::max(m, r.wall_ms.at(k));
        }
        total.push_back(s);
        ms.push_back(m);
    }
    nlohmann::json j = {{"entropy_before", before}, {"entropy_after", after}, {"trajectory", total}};
    j["trajectory_ms"] = timing ? ms : std::vector<double>{};
    return j;
}

nlohmann::json prune_fragment(const PruneOutput& out) {
    std::vector<double> before, after, dev_u, dev_r;
    for (const LayerPrune& l : out.layers) {
        before.push_back(l.pruned_score_before);
        after.push_back(l.pruned_score_after);
        dev_u.push_back(l.calib_deviation_unrotated);
        dev_r.push_back(l.calib_deviation_rotated);
    }
    return {{"pruned_score_before", before},
            {"pruned_score_after", after},
            {"calib_deviation_unrotated", dev_u},
            {"calib_deviation_rotated", dev_r}};
}

nlohmann::json eval_fragment(const EvalOutput& out) {
    return {{"metrics", out.metrics},
            {"heldout_deviation_unrotated", out.heldout_deviation_unrotated},
            {"heldout_deviation_rotated", out.heldout_deviation_rotated}};
}

RunReport assemble_report(const PipelineConfig& config, const std::map<std::string, nlohmann::json>& fragments) {
    auto frag = [&](const char* name) -> const nlohmann::json& {
        const auto it = fragments.find(name);
        if (it == fragments.end()) throw IoError(std::string("report: stage ") + name + " has not run");
        return it->second;
    };
    try {
        RunReport r;
        r.config = config.to_json();
        // Where the report is written is not part of the experiment.
        r.config.erase("output.dir");
        const auto& den = frag("denoise");
        const auto& pr = frag("prune");
        const auto& ev = frag("eval");
        const auto e0 = den.at("entropy_before").get<std::vector<double>>();
        const auto e1 = den.at("entropy_after").get<std::vector<double>>();
        const auto p0 = pr.at("pruned_score_before").get<std::vector<double>>();
        const auto p1 = pr.at("pruned_score_after").get<std::vector<double>>();
        const auto cu = pr.at("calib_deviation_unrotated").get<std::vector<double>>();
        const auto cr = pr.at("calib_deviation_rotated").get<std::vector<double>>();
        const auto hu = ev.at("heldout_deviation_unrotated").get<std::vector<double>>();
        const auto hr = ev.at("heldout_deviation_rotated").get<std::vector<double>>();
        for (std::size_t i = 0; i < e0.size(); ++i) {
            LayerRow row;
            row.layer = i;
            row.entropy_before = e0[i];
            row.entropy_after = e1.at(i);
            row.pruned_score_before = p0.at(i);
            row.pruned_score_after = p1.at(i);
            row.calib_deviation_unrotated = cu.at(i);
            row.calib_deviation_rotated = cr.at(i);
            row.heldout_deviation_unrotated = i < hu.size() ? hu[i] : 0.0;
            row.heldout_deviation_rotated = i < hr.size() ? hr[i] : 0.0;
            r.layers.push_back(row);
        }
        r.trajectory = den.at("trajectory").get<std::vector<double>>();
        if (config.report_timing) r.trajectory_ms = den.at("trajectory_ms").get<std::vector<double>>();
        r.metrics = ev.at("metrics").get<std::map<std::string, double>>();
        double before = 0.0, after = 0.0;
        for (const LayerRow& l : r.layers) {
            before += l.entropy_before;
            after += l.entropy_after;
        }
        r.metrics["entropy_total_before"] = before;
        r.metrics["entropy_total_after"] = after;
        if (config.report_timing)
            for (const auto& [name, j] : fragments)
                if (j.contains("ms")) r.stage_ms[name] = j.at("ms").get<double>();
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("report: malformed stage file: ") + e.what());
    } catch (const std::out_of_range& e) {
        throw IoError(std::string("report: stage files disagree on the layer count: ") + e.what());
    }
}

namespace {

fs::path stage_file(const PipelineConfig& c, std::string_view stage) {
    return c.output_dir / ("stage_" + std::string(stage) + ".json");
}

void write_fragment(const PipelineConfig& c, std::string_view stage, nlohmann::json j, Clock::time_point t0) {
    j["stage"] = stage;
    if (c.report_timing) j["ms"] = ms_since(t0);
    write_json(stage_file(c, stage), j);
}

void save_denoise(const PipelineConfig& c, const DenoiseOutput& out) {
    save_rotations(c.output_dir / kRotationsFile, out.r1, out.r2,
                   {{"enabled", c.rotator_enabled}, {"steps", c.rotator_enabled ? c.rotator_steps : 0}});
    fs::create_directories(c.output_dir / "trajectories");
    for (std::size_t i = 0; i < out.runs.size(); ++i) {
        const fs::path p = c.output_dir / "trajectories" / ("layer" + std::to_string(i) + ".csv");
        auto f = open_out(p);
        write_trajectory_csv(f, out.runs[i].losses, c.report_timing ? out.runs[i].wall_ms : std::vector<double>{});
        finish(f, p);
    }
}

void save_prune(const PipelineConfig& c, const PruneOutput& out) {
    save_stored_model(c.output_dir / kPrunedFile, out.pruned);
    save_model(c.output_dir / kBaselineFile, out.baseline);
    fs::create_directories(c.output_dir / kMaskDir);
    for (std::size_t i = 0; i < out.layers.size(); ++i) {
        for (std::size_t k = 0; k < kAllLinears.size(); ++k) {
            const fs::path p = c.output_dir / kMaskDir /
                               ("layer" + std::to_string(i) + "_" + std::string(linear_name(kAllLinears[k])) + ".mask");
            auto f = open_out(p);
            write_mask(f, out.layers[i].masks[k]);
            finish(f, p);
        }
    }
}

Model load_fused(const PipelineConfig& c) {
    StoredModel s = load_model(c.output_dir / kFusedFile);
    if (!s.model.fused()) throw StateError(kFusedFile + std::string(" holds an unfused model"));
    return std::move(s.model);
}

void prepare_dir(const PipelineConfig& c) {
    std::error_code ec;
    fs::create_directories(c.output_dir, ec);
    if (ec) throw IoError(c.output_dir.string() + ": " + ec.message());
}

}  // namespace

void run_stage(std::string_view stage, const PipelineConfig& c) {
    prepare_dir(c);
    const auto t0 = Clock::now();
    try {
        if (stage == "fuse") {
            save_model(c.output_dir / kFusedFile, fuse_stage(c));
            write_fragment(c, stage, nlohmann::json::object(), t0);
        } else if (stage == "calibrate") {
            const auto stats = calibrate(load_fused(c), c);
            save_stats(c.output_dir / kStatsFile, stats);
            write_fragment(c, stage, calibrate_fragment(stats), t0);
        } else if (stage == "denoise") {
            const auto out = denoise(load_fused(c), load_stats(c.output_dir / kStatsFile), c);
            save_denoise(c, out);
            write_fragment(c, stage, denoise_fragment(out, c.report_timing), t0);
        } else if (stage == "merge") {
            std::vector<Matrix> r1, r2;
            load_rotations(c.output_dir / kRotationsFile, r1, r2);
            save_stored_model(c.output_dir / kMergedFile, merge_stage(load_fused(c), r1, r2, c));
            write_fragment(c, stage, nlohmann::json::object(), t0);
        } else if (stage == "prune") {
            const auto out = prune_stage(load_fused(c), load_model(c.output_dir / kMergedFile),
                                         load_stats(c.output_dir / kStatsFile), c);
            save_prune(c, out);
            write_fragment(c, stage, prune_fragment(out), t0);
        } else if (stage == "eval") {
            const auto out = evaluate(load_fused(c), load_model(c.output_dir / kPrunedFile),
                                      load_model(c.output_dir / kBaselineFile).model, c);
            write_fragment(c, stage, eval_fragment(out), t0);
        } else {
            throw InvalidArgument("unknown stage '" + std::string(stage) + "'");
        }
    } catch (...) {
        rethrow_in_stage(stage);
    }
}

RunReport run_report(const PipelineConfig& c) {
    std::map<std::string, nlohmann::json> fragments;
    for (std::string_view s : kStageNames) {
        const fs::path p = stage_file(c, s);
        if (fs::exists(p)) fragments[std::string(s)] = read_json(p);
    }
    RunReport r = assemble_report(c, fragments);
    report_emit(r, c.output_dir);
    return r;
}

RunReport run_pipeline(const PipelineConfig& c) {
    prepare_dir(c);
    std::map<std::string, nlohmann::json> fragments;
    auto stage = [&](const char* name, auto&& body) {
        const auto t0 = Clock::now();
        try {
            nlohmann::json j = body();
            j["stage"] = name;
            if (c.report_timing) j["ms"] = ms_since(t0);
            write_json(stage_file(c, name), j);
            fragments[name] = std::move(j);
        } catch (...) {
            rethrow_in_stage(name);
        }
    };

    Model fused;
    std::vector<LayerStats> stats;
    DenoiseOutput den;
    StoredModel merged;
    PruneOutput pruned;
    stage("fuse", [&] {
        fused = fuse_stage(c);
        save_model(c.output_dir / kFusedFile, fused);
        return nlohmann::json::object();
    });
    stage("calibrate", [&] {
        stats = calibrate(fused, c);
        save_stats(c.output_dir / kStatsFile, stats);
        return calibrate_fragment(stats);
    });
    stage("denoise", [&] {
        den = denoise(fused, stats, c);
        save_denoise(c, den);
        return denoise_fragment(den, c.report_timing);
    });
    stage("merge", [&] {
        merged = merge_stage(fused, den.r1, den.r2, c);
        save_stored_model(c.output_dir / kMergedFile, merged);
        return nlohmann::json::object();
    });
    stage("prune", [&] {
        pruned = prune_stage(fused, merged, stats, c);
        // Both stages must have read the very same statistics objects.
        for (std::size_t i = 0; i < pruned.layers.size(); ++i) {
            if (pruned.layers[i].stats_used != den.stats_used.at(i)) {
                throw StateError("layer " + std::to_string(i) + ": pruning did not reuse the denoiser's statistics");
            }
        }
        save_prune(c, pruned);
        return prune_fragment(pruned);
    });
    stage("eval", [&] { return eval_fragment(evaluate(fused, pruned.pruned, pruned.baseline, c)); });

    RunReport report = assemble_report(c, fragments);
    report_emit(report, c.output_dir);
    return report;
}

}  // namespace rotaprune
